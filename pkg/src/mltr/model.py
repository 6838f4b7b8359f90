"""Masked latent transformer: conditioned blocks, encoder/decoder, heads.

Every block normalizes without learned affine parameters; scale, shift and
the per-branch residual gate are regressed from the latent conditioning
token by a per-block zero-initialized linear map, so each block starts as
the exact identity. Attention carries an additive learned bias indexed by
the relative sequence offset, with a dedicated per-head scalar for any pair
involving the cls token.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from mltr import autodiff as ad
from mltr import masking as mk
from mltr.errors import CapacityError, ConfigError, ContractError, ShapeError
from mltr.latent import Backbone, BackboneSpec, LatentEmbedder

TOGGLE_NAMES = ("latent_embedder", "aux_loss", "adaln_final_linear",
                "relpos_bias", "masked_shortcut", "masking")

# flat bias-LUT indices keyed by (length, max_len); shared by all blocks,
# bounded because training visits many distinct kept-lengths
_BIAS_INDEX_CACHE: dict[tuple[int, int], np.ndarray] = {}
_BIAS_INDEX_CACHE_LIMIT = 16


def _bias_flat_index(length: int, max_len: int) -> np.ndarray:
    """Per-pair LUT index: offset i-j shifted positive; slot 2*max_len-1 for cls."""
    key = (length, max_len)
    cached = _BIAS_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    pos = np.arange(length)
    idx = (pos[:, None] - pos[None, :] + (max_len - 1)).astype(np.int64)
    idx[0, :] = 2 * max_len - 1
    idx[:, 0] = 2 * max_len - 1
    flat = idx.reshape(-1)
    if len(_BIAS_INDEX_CACHE) >= _BIAS_INDEX_CACHE_LIMIT:
        _BIAS_INDEX_CACHE.clear()
    _BIAS_INDEX_CACHE[key] = flat
    return flat


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    channels: int = 1
    patch: int = 8
    dim: int = 64
    heads: int = 4
    enc_depth: int = 4
    dec_depth: int = 2
    mlp_ratio: float = 4.0
    n_classes: int = 4
    ratio_lo: float = 0.3
    ratio_hi: float = 0.8
    ln_eps: float = 1e-5
    latent_embedder: bool = True
    aux_loss: bool = True
    adaln_final_linear: bool = True
    relpos_bias: bool = True
    masked_shortcut: bool = True
    masking: bool = True
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.enc_depth < 1 or self.dec_depth < 1:
            raise ConfigError("encoder and decoder need at least one block")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"patch {self.patch} does not divide {self.height}x{self.width}")
        if not (0.0 <= self.ratio_lo <= self.ratio_hi < 1.0):
            raise ConfigError(f"ratio range [{self.ratio_lo}, {self.ratio_hi}] invalid")
        self.backbone.validate()
        if self.backbone.input_channels != self.channels:
            raise ConfigError("backbone input_channels must match image channels")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def max_len(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def micro_config(**overrides) -> ModelConfig:
    """Desk-scale config: 64x64 images, patch 8, D=64, 4 heads, 4+2 blocks."""
    cfg = ModelConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def small_config(**overrides) -> ModelConfig:
    """Desk-scale config: 64x64 images, patch 8, D=128, 8 heads, 6+3 blocks."""
    cfg = ModelConfig(dim=128, heads=8, enc_depth=6, dec_depth=3)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@dataclass
class SequenceState:
    """Token sequence plus the bookkeeping the heads need."""

    tokens: ad.Tensor
    has_cls: bool
    plan: Optional[mk.MaskPlan]


class LTBlock:
    """Pre-norm transformer block with conditioned modulation and biased MSA."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, max_len: int,
                 eps: float, use_relpos: bool, rng: np.random.Generator,
                 dtype=np.float32):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.max_len = max_len
        self.eps = eps
        self.use_relpos = use_relpos

        def lin(shape):
            return ad.Tensor(rng.normal(0.0, 0.02, shape).astype(dtype),
                             requires_grad=True)

        def zeros(shape):
            return ad.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        hidden = int(round(mlp_ratio * dim))
        self.wq, self.bq = lin((dim, dim)), zeros(dim)
        self.wk, self.bk = lin((dim, dim)), zeros(dim)
        self.wv, self.bv = lin((dim, dim)), zeros(dim)
        self.wo, self.bo = lin((dim, dim)), zeros(dim)
        # offset table covers |i-j| <= max_len-1; one extra learned scalar
        # per head for any pair involving the cls row
        self.relpos_table = lin((heads, 2 * max_len - 1))
        self.relpos_cls = zeros((heads, 1))
        self.mlp_w1, self.mlp_b1 = lin((dim, hidden)), zeros(hidden)
        self.mlp_w2, self.mlp_b2 = lin((hidden, dim)), zeros(dim)
        # zero init: all six modulation vectors start at zero -> identity block
        self.mod_w, self.mod_b = zeros((dim, 6 * dim)), zeros(6 * dim)

    def params(self) -> dict:
        return {
            "attn.wq": self.wq, "attn.bq": self.bq,
            "attn.wk": self.wk, "attn.bk": self.bk,
            "attn.wv": self.wv, "attn.bv": self.bv,
            "attn.wo": self.wo, "attn.bo": self.bo,
            "attn.relpos_table": self.relpos_table,
            "attn.relpos_cls": self.relpos_cls,
            "mlp.w1": self.mlp_w1, "mlp.b1": self.mlp_b1,
            "mlp.w2": self.mlp_w2, "mlp.b2": self.mlp_b2,
            "mod.weight": self.mod_w, "mod.bias": self.mod_b,
        }

    def attention(self, z: ad.Tensor, collect: list | None = None) -> ad.Tensor:
        """Multi-head self-attention with the additive relative-offset bias."""
        length = z.shape[0]
        if length > self.max_len:
            raise CapacityError(f"sequence of {length} exceeds capacity {self.max_len}")
        h, dh = self.heads, self.head_dim
        q = ad.add(ad.matmul(z, self.wq), self.bq)
        k = ad.add(ad.matmul(z, self.wk), self.bk)
        v = ad.add(ad.matmul(z, self.wv), self.bv)
        q3 = ad.transpose(ad.reshape(q, (length, h, dh)), (1, 0, 2))
        k3 = ad.transpose(ad.reshape(k, (length, h, dh)), (1, 0, 2))
        v3 = ad.transpose(ad.reshape(v, (length, h, dh)), (1, 0, 2))
        scores = ad.scale(ad.matmul(q3, ad.transpose(k3, (0, 2, 1))),
                          1.0 / math.sqrt(dh))
        if self.use_relpos:
            table = ad.concat([self.relpos_table, self.relpos_cls], axis=1)
            table = ad.transpose(table, (1, 0))            # (2*max_len, heads)
            flat = ad.index_select(table, _bias_flat_index(length, self.max_len))
            bias = ad.transpose(ad.reshape(flat, (length, length, h)), (2, 0, 1))
            scores = ad.add(scores, bias)
        attn = ad.softmax(scores, axis=-1)
        if collect is not None:
            collect.append(np.array(attn.data, copy=True))
        ctx = ad.matmul(attn, v3)
        ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (length, self.dim))
        return ad.add(ad.matmul(ctx, self.wo), self.bo)

    def _modulation(self, cond: ad.Tensor) -> tuple:
        m = ad.add(ad.matmul(cond, self.mod_w), self.mod_b)  # (1, 6D)
        d = self.dim
        parts = [ad.reshape(ad.narrow(m, 1, i * d, d), (d,)) for i in range(6)]
        return tuple(parts)

    def forward(self, z: ad.Tensor, cond: ad.Tensor | None,
                collect: list | None = None) -> ad.Tensor:
        if cond is not None:
            g1, b1, a1, g2, b2, a2 = self._modulation(cond)
            h = ad.layer_norm(z, self.eps)
            h = ad.add(ad.mul(h, ad.add(g1, 1.0)), b1)
            z1 = ad.add(ad.mul(self.attention(h, collect), a1), z)
            h2 = ad.layer_norm(z1, self.eps)
            h2 = ad.add(ad.mul(h2, ad.add(g2, 1.0)), b2)
            mlp = self._mlp(h2)
            return ad.add(ad.mul(mlp, a2), z1)
        # no conditioning token: plain pre-norm block (gamma=beta=0, alpha=1)
        h = ad.layer_norm(z, self.eps)
        z1 = ad.add(self.attention(h, collect), z)
        h2 = ad.layer_norm(z1, self.eps)
        return ad.add(self._mlp(h2), z1)

    def _mlp(self, h: ad.Tensor) -> ad.Tensor:
        h = ad.add(ad.matmul(h, self.mlp_w1), self.mlp_b1)
        h = ad.gelu(h)
        return ad.add(ad.matmul(h, self.mlp_w2), self.mlp_b2)


def masked_shortcut(dec_in: ad.Tensor, dec_out: ad.Tensor,
                    mask: np.ndarray) -> ad.Tensor:
    """Mix decoder input/output: kept rows from the input, rest from the output.

    Row 0 (cls) always comes from the decoder output; non-cls row i+1 comes
    from dec_in when mask[i] == 1 (kept/unmasked), else from dec_out. Kept
    rows are copied bit-exactly.
    """
    if dec_in.shape != dec_out.shape:
        raise ShapeError(
            f"masked_shortcut: shapes differ {dec_in.shape} vs {dec_out.shape}")
    n = dec_in.shape[0] - 1
    mask = np.asarray(mask)
    if mask.shape != (n,):
        raise ShapeError(f"masked_shortcut: mask of {mask.shape} for {n} rows")
    full_mask = np.concatenate([[0], mask]).astype(bool)
    return ad.row_select(full_mask, dec_in, dec_out)


class Model:
    """Full network; per-sequence forward, one image at a time."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
        cfg = config
        d = cfg.dim

        def lin(shape):
            return ad.Tensor(rng.normal(0.0, 0.02, shape).astype(dtype),
                             requires_grad=True)

        def zeros(shape):
            return ad.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        self.latent: LatentEmbedder | None = None
        if cfg.latent_embedder:
            backbone = Backbone(cfg.backbone, rng, dtype=dtype)
            self.latent = LatentEmbedder(backbone, d, rng, dtype=dtype)
        self.patch_w = lin((cfg.patch_dim, d))
        self.patch_b = zeros(d)
        self.cls = lin((1, d))
        self.mask_token = lin((1, d))
        self.pos_enc = lin((cfg.max_len, d))
        self.pos_dec = lin((cfg.max_len, d))
        self.enc_blocks = [
            LTBlock(d, cfg.heads, cfg.mlp_ratio, cfg.max_len, cfg.ln_eps,
                    cfg.relpos_bias, rng, dtype) for _ in range(cfg.enc_depth)]
        self.dec_blocks = [
            LTBlock(d, cfg.heads, cfg.mlp_ratio, cfg.max_len, cfg.ln_eps,
                    cfg.relpos_bias, rng, dtype) for _ in range(cfg.dec_depth)]
        self.head_w = lin((d, cfg.n_classes))
        self.head_b = zeros(cfg.n_classes)
        self.recon_mod_w = zeros((d, 2 * d))
        self.recon_mod_b = zeros(2 * d)
        self.recon_w = lin((d, cfg.patch_dim))
        self.recon_b = zeros(cfg.patch_dim)

    def params(self) -> dict:
        out = {}
        if self.latent is not None:
            for k, v in self.latent.params().items():
                out[f"latent.{k}"] = v
        out["patch.weight"] = self.patch_w
        out["patch.bias"] = self.patch_b
        out["cls"] = self.cls
        out["mask_token"] = self.mask_token
        out["pos.encoder"] = self.pos_enc
        out["pos.decoder"] = self.pos_dec
        for i, blk in enumerate(self.enc_blocks):
            for k, v in blk.params().items():
                out[f"encoder.{i}.{k}"] = v
        for i, blk in enumerate(self.dec_blocks):
            for k, v in blk.params().items():
                out[f"decoder.{i}.{k}"] = v
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        out["recon.mod.weight"] = self.recon_mod_w
        out["recon.mod.bias"] = self.recon_mod_b
        out["recon.weight"] = self.recon_w
        out["recon.bias"] = self.recon_b
        return out

    def trainable_params(self) -> dict:
        return {k: v for k, v in self.params().items() if v.requires_grad}

    # ----- pipeline pieces -------------------------------------------------

    def latent_tokens(self, x: ad.Tensor) -> ad.Tensor | None:
        if self.latent is None:
            return None
        return self.latent.forward(x)

    def embed_patches(self, x: ad.Tensor) -> ad.Tensor:
        """Patchify, project, and add original-position embeddings: (N, D)."""
        rows = mk.patchify(x, self.config.patch)
        tokens = ad.add(ad.matmul(rows, self.patch_w), self.patch_b)
        return ad.add(tokens, ad.narrow(self.pos_enc, 0, 1, self.config.n_patches))

    def encode(self, tokens: ad.Tensor, cond: ad.Tensor | None,
               plan: mk.MaskPlan | None, training: bool,
               collect: list | None = None) -> SequenceState:
        """Prepend cls (with its position) and run the encoder blocks.

        Training requires a plan and the kept-token subset; inference
        requires the full token set and no plan.
        """
        cfg = self.config
        if training and cfg.masking and plan is None:
            raise ContractError("training encode needs a mask plan")
        if not training and plan is not None:
            raise ContractError("inference encode must not receive a mask plan")
        expected = plan.n_kept if plan is not None else cfg.n_patches
        if tokens.shape[0] != expected:
            raise ShapeError(f"encode: {tokens.shape[0]} tokens, expected {expected}")
        cls_tok = ad.add(self.cls, ad.narrow(self.pos_enc, 0, 0, 1))
        z = ad.concat([cls_tok, tokens], axis=0)
        if z.shape[0] > cfg.max_len:
            raise CapacityError(f"sequence {z.shape[0]} exceeds {cfg.max_len}")
        for blk in self.enc_blocks:
            z = blk.forward(z, cond, collect)
        return SequenceState(tokens=z, has_cls=True, plan=plan)

    def decode(self, enc: SequenceState, cond: ad.Tensor | None,
               collect: list | None = None) -> tuple[SequenceState, ad.Tensor]:
        """Append mask tokens, unshuffle, add positions, run decoder blocks.

        Returns (output state, pre-position decoder input); the latter is
        what the masked shortcut preserves.
        """
        cfg = self.config
        n = cfg.n_patches
        cls_row = ad.narrow(enc.tokens, 0, 0, 1)
        rest = ad.narrow(enc.tokens, 0, 1, enc.tokens.shape[0] - 1)
        if enc.plan is not None:
            plan = enc.plan
            n_masked = plan.n - plan.n_kept
            mask_rows = ad.index_select(self.mask_token,
                                        np.zeros(n_masked, dtype=np.int64))
            full = ad.concat([rest, mask_rows], axis=0)
            restored = mk.restore_order(full, plan)
        else:
            if rest.shape[0] != n:
                raise ShapeError(f"decode: {rest.shape[0]} tokens, expected {n}")
            restored = rest
        dec_in = ad.concat([cls_row, restored], axis=0)     # (N+1, D)
        z = ad.add(dec_in, self.pos_dec)
        for blk in self.dec_blocks:
            z = blk.forward(z, cond, collect)
        return SequenceState(tokens=z, has_cls=True, plan=enc.plan), dec_in

    def class_head(self, state: SequenceState) -> ad.Tensor:
        """Linear map of the cls row to class logits (n_classes,)."""
        if not state.has_cls:
            raise ContractError("class head needs a sequence with a cls token")
        row = ad.narrow(state.tokens, 0, 0, 1)
        logits = ad.add(ad.matmul(row, self.head_w), self.head_b)
        return ad.reshape(logits, (self.config.n_classes,))

    def reconstruction_head(self, state: SequenceState,
                            cond: ad.Tensor | None) -> ad.Tensor:
        """Map non-cls rows back to an image (C,H,W)."""
        cfg = self.config
        if state.tokens.shape[0] != cfg.max_len:
            raise ShapeError(
                f"reconstruction needs {cfg.max_len} rows, got {state.tokens.shape[0]}")
        rows = ad.narrow(state.tokens, 0, 1, cfg.n_patches)
        if cfg.adaln_final_linear and cond is not None:
            m = ad.add(ad.matmul(cond, self.recon_mod_w), self.recon_mod_b)
            gamma = ad.reshape(ad.narrow(m, 1, 0, cfg.dim), (cfg.dim,))
            beta = ad.reshape(ad.narrow(m, 1, cfg.dim, cfg.dim), (cfg.dim,))
            rows = ad.layer_norm(rows, cfg.ln_eps)
            rows = ad.add(ad.mul(rows, ad.add(gamma, 1.0)), beta)
        elif cfg.adaln_final_linear:
            rows = ad.layer_norm(rows, cfg.ln_eps)
        pixels = ad.add(ad.matmul(rows, self.recon_w), self.recon_b)
        return mk.unpatchify(pixels, cfg.channels, cfg.height, cfg.width, cfg.patch)

    # ----- full passes ------------------------------------------------------

    def forward_train(self, x, rng: np.random.Generator, rho: float | None = None):
        """Training pass: returns (logits, reconstruction, plan)."""
        cfg = self.config
        x_t = x if isinstance(x, ad.Tensor) else ad.Tensor(x, dtype=self.dtype)
        if x_t.shape != (cfg.channels, cfg.height, cfg.width):
            raise ShapeError(f"image {x_t.shape} does not match config "
                             f"{(cfg.channels, cfg.height, cfg.width)}")
        cond = self.latent_tokens(x_t)
        tokens = self.embed_patches(x_t)
        plan = None
        if cfg.masking:
            if rho is None:
                rho = mk.sample_ratio(rng, cfg.ratio_lo, cfg.ratio_hi)
            plan = mk.make_mask_plan(cfg.n_patches, rho, rng)
            tokens = mk.gather_kept(tokens, plan)
        enc = self.encode(tokens, cond, plan, training=True)
        dec, dec_in = self.decode(enc, cond)
        if cfg.masked_shortcut:
            mask = plan.mask if plan is not None else np.ones(cfg.n_patches, np.int64)
            final = SequenceState(masked_shortcut(dec_in, dec.tokens, mask),
                                  has_cls=True, plan=plan)
        else:
            final = dec
        logits = self.class_head(final)
        recon = self.reconstruction_head(final, cond)
        return logits, recon, plan

    def forward_infer(self, x, collect_attention: list | None = None) -> np.ndarray:
        """Inference pass: full sequence, no masking; returns logits array."""
        cfg = self.config
        with ad.no_grad():
            x_t = x if isinstance(x, ad.Tensor) else ad.Tensor(x, dtype=self.dtype)
            if x_t.shape != (cfg.channels, cfg.height, cfg.width):
                raise ShapeError(f"image {x_t.shape} does not match config "
                                 f"{(cfg.channels, cfg.height, cfg.width)}")
            cond = self.latent_tokens(x_t)
            tokens = self.embed_patches(x_t)
            enc = self.encode(tokens, cond, None, training=False,
                              collect=collect_attention)
            dec, dec_in = self.decode(enc, cond, collect=collect_attention)
            if cfg.masked_shortcut:
                ones = np.ones(cfg.n_patches, dtype=np.int64)
                final = SequenceState(masked_shortcut(dec_in, dec.tokens, ones),
                                      has_cls=True, plan=None)
            else:
                final = dec
            logits = self.class_head(final)
        return np.array(logits.data, copy=True)

    def forward_infer_batch(self, xs: np.ndarray) -> np.ndarray:
        """Stack of images (B,C,H,W) -> logits (B, n_classes)."""
        if xs.ndim != 4:
            raise ShapeError(f"need (B,C,H,W), got {xs.shape}")
        return np.stack([self.forward_infer(x) for x in xs])
