"""Latent conditioning token: small conv backbone -> global pool -> linear.

The backbone is a configurable stack of conv+GELU stages standing in for a
full classification network with its head removed; it sees the original
(never masked) image and its pooled features become a single conditioning
token of the transformer width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mltr import autodiff as ad
from mltr.errors import CheckpointError, ConfigError, ShapeError


@dataclass
class BackboneSpec:
    """Conv stages as (out_channels, kernel, stride) triples."""

    stages: list = field(default_factory=lambda: [(16, 3, 2), (32, 3, 2), (64, 3, 2)])
    input_channels: int = 1
    pretrained_weights: str | None = None
    freeze: bool = False

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        for i, (ch, k, s) in enumerate(self.stages):
            if ch <= 0 or k <= 0 or s < 1:
                raise ConfigError(f"backbone stage {i} invalid: {(ch, k, s)}")
        if self.input_channels <= 0:
            raise ConfigError("backbone input_channels must be positive")

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Backbone:
    """Stack of conv+GELU stages with 'same'-ish padding (k//2)."""

    def __init__(self, spec: BackboneSpec, rng: np.random.Generator,
                 dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.weights = []
        self.biases = []
        cin = spec.input_channels
        for ch, k, s in spec.stages:
            w = ad.Tensor(he_uniform((ch, cin, k, k), cin * k * k, rng, dtype),
                          requires_grad=not spec.freeze)
            b = ad.Tensor(np.zeros(ch, dtype=dtype), requires_grad=not spec.freeze)
            self.weights.append(w)
            self.biases.append(b)
            cin = ch
        if spec.pretrained_weights:
            load_backbone_weights(self, spec.pretrained_weights)

    def params(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"stage{i}.weight"] = w
            out[f"stage{i}.bias"] = b
        return out

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        if x.shape[0] != self.spec.input_channels:
            raise ShapeError(
                f"backbone expects {self.spec.input_channels} channels, got {x.shape}")
        for (ch, k, s), w, b in zip(self.spec.stages, self.weights, self.biases):
            x = ad.conv2d(x, w, stride=s, padding=k // 2)
            x = ad.add_channel_bias(x, b)
            x = ad.gelu(x)
        return x

    def output_shape(self, h: int, w: int) -> tuple:
        for ch, k, s in self.spec.stages:
            p = k // 2
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        return (self.spec.out_channels, h, w)


def build_backbone(spec: BackboneSpec, rng_seed: int, dtype=np.float32) -> Backbone:
    """Deterministic build: same seed, bit-identical weights."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    return Backbone(spec, rng, dtype=dtype)


class LatentEmbedder:
    """Backbone -> adaptive average pool -> flatten -> linear, giving (1,D)."""

    def __init__(self, backbone: Backbone, dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.backbone = backbone
        c_last = backbone.spec.out_channels
        self.embed_w = ad.Tensor(
            rng.normal(0.0, 0.02, size=(c_last, dim)).astype(dtype),
            requires_grad=True)
        self.embed_b = ad.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def params(self) -> dict:
        out = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        out["embed.weight"] = self.embed_w
        out["embed.bias"] = self.embed_b
        return out

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        feats = self.backbone.forward(x)
        pooled = ad.adaptive_avg_pool(feats)              # (C,1,1)
        flat = ad.reshape(pooled, (1, feats.shape[0]))    # (1,C)
        return ad.add(ad.matmul(flat, self.embed_w), self.embed_b)


def embed_latent(embedder: LatentEmbedder, x: ad.Tensor) -> ad.Tensor:
    """Single conditioning token (1,D) from the original image."""
    return embedder.forward(x)


def load_backbone_weights(backbone: Backbone, path: str) -> None:
    """Pull backbone tensors out of any checkpoint file.

    Accepts tensors named either 'stageN.*' (backbone-only checkpoints) or
    'latent.backbone.stageN.*' (full model checkpoints). Shape or name
    mismatches fail with the offending tensor names listed.
    """
    from mltr.checkpoint import read_checkpoint

    _, tensors = read_checkpoint(path)
    stripped = {}
    for name, arr in tensors.items():
        if name.startswith("latent.backbone."):
            stripped[name[len("latent.backbone."):]] = arr
        else:
            stripped[name] = arr
    own = backbone.params()
    missing = [k for k in own if k not in stripped]
    if missing:
        raise CheckpointError(
            f"checkpoint {path} lacks backbone tensors: {', '.join(sorted(missing))}")
    bad = [k for k in own if stripped[k].shape != own[k].shape]
    if bad:
        diff = ", ".join(f"{k}: {stripped[k].shape} != {own[k].shape}" for k in sorted(bad))
        raise CheckpointError(f"checkpoint {path} shape mismatch: {diff}")
    for k, t in own.items():
        t.data = stripped[k].astype(t.data.dtype, copy=True)


def pretrain_backbone(backbone: Backbone, images, labels, n_classes: int,
                      seed: int, epochs: int = 5, lr: float = 1e-3) -> float:
    """Train backbone+pool+linear as a plain classifier; returns final accuracy.

    Emulates 'pretrained backbone' workflows on locally available data; the
    caller saves backbone.params() into a checkpoint for later reuse.
    """
    from mltr.optim import AdamState, adam_step

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    dtype = backbone.weights[0].data.dtype
    head_w = ad.Tensor(rng.normal(0.0, 0.02, (backbone.spec.out_channels, n_classes))
                       .astype(dtype), requires_grad=True)
    head_b = ad.Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True)
    params = dict(backbone.params())
    params["head.weight"] = head_w
    params["head.bias"] = head_b
    state = AdamState()
    acc = 0.0
    for _ in range(epochs):
        correct = 0
        order = rng.permutation(len(images))
        for i in order:
            ad.reset_tape()
            x = ad.Tensor(images[i], dtype=dtype)
            feats = ad.adaptive_avg_pool(backbone.forward(x))
            flat = ad.reshape(feats, (1, backbone.spec.out_channels))
            logits = ad.add(ad.matmul(flat, head_w), head_b)
            loss = ad.cross_entropy(ad.reshape(logits, (n_classes,)), int(labels[i]))
            ad.backward(loss)
            adam_step(params, state, lr=lr, weight_decay=0.0)
            correct += int(np.argmax(logits.data) == labels[i])
        acc = correct / len(images)
    ad.reset_tape()
    return acc
