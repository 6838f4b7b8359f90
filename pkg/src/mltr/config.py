"""Run configuration: strict JSON schema with full round-tripping.

Unknown keys are rejected everywhere so a typo in an ablation toggle fails
loudly instead of silently training the wrong model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from mltr.errors import ConfigError
from mltr.latent import BackboneSpec
from mltr.model import TOGGLE_NAMES, ModelConfig


@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 16
    lr_max: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-5
    lookahead: bool = True
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    seed: int = 0
    stop_at_train_acc: float | None = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if self.lr_max < 0 or self.lr_min < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be >= 0")
        if self.lookahead_k < 1 or not (0.0 <= self.lookahead_alpha <= 1.0):
            raise ConfigError("lookahead needs k >= 1 and alpha in [0, 1]")


@dataclass
class SynthSpec:
    n_per_class: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.n_per_class < 2:
            raise ConfigError("synth n_per_class must be >= 2")


@dataclass
class DataConfig:
    root: str | None = None
    synth: SynthSpec | None = None
    split_ratio: float = 0.7
    split_seed: int = 0
    augment_multiplier: int = 1
    gamma: float = 1.2
    clahe_clip: float = 2.0
    clahe_tiles: tuple = (8, 8)

    def validate(self) -> None:
        if not (0.0 <= self.split_ratio <= 1.0):
            raise ConfigError("split_ratio must be in [0, 1]")
        if self.augment_multiplier < 1:
            raise ConfigError("augment_multiplier must be >= 1")
        if self.synth is not None:
            self.synth.validate()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()


def _check_keys(doc: dict, allowed, where: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _parse_backbone(doc: dict) -> BackboneSpec:
    _check_keys(doc, {"stages", "input_channels", "pretrained", "freeze"},
                "model.backbone")
    spec = BackboneSpec()
    if "stages" in doc:
        spec.stages = [tuple(int(v) for v in stage) for stage in doc["stages"]]
    if "input_channels" in doc:
        spec.input_channels = int(doc["input_channels"])
    spec.pretrained_weights = doc.get("pretrained")
    spec.freeze = bool(doc.get("freeze", False))
    return spec


def _parse_model(doc: dict) -> ModelConfig:
    allowed = {"image", "channels", "patch", "dim", "heads", "enc_depth",
               "dec_depth", "mlp_ratio", "n_classes", "ratio_range", "ln_eps",
               "toggles", "backbone"}
    _check_keys(doc, allowed, "model")
    cfg = ModelConfig()
    if "image" in doc:
        cfg.height, cfg.width = (int(v) for v in doc["image"])
    for key, attr in (("channels", "channels"), ("patch", "patch"),
                      ("dim", "dim"), ("heads", "heads"),
                      ("enc_depth", "enc_depth"), ("dec_depth", "dec_depth"),
                      ("n_classes", "n_classes")):
        if key in doc:
            setattr(cfg, attr, int(doc[key]))
    if "mlp_ratio" in doc:
        cfg.mlp_ratio = float(doc["mlp_ratio"])
    if "ln_eps" in doc:
        cfg.ln_eps = float(doc["ln_eps"])
    if "ratio_range" in doc:
        cfg.ratio_lo, cfg.ratio_hi = (float(v) for v in doc["ratio_range"])
    toggles = doc.get("toggles", {})
    _check_keys(toggles, set(TOGGLE_NAMES), "model.toggles")
    for name, value in toggles.items():
        setattr(cfg, name, bool(value))
    cfg.backbone = _parse_backbone(doc.get("backbone", {}))
    if "input_channels" not in doc.get("backbone", {}):
        cfg.backbone.input_channels = cfg.channels
    return cfg


def _parse_train(doc: dict) -> TrainConfig:
    allowed = {"epochs", "batch", "lr_max", "lr_min", "weight_decay",
               "lookahead", "lookahead_k", "lookahead_alpha", "seed",
               "stop_at_train_acc"}
    _check_keys(doc, allowed, "train")
    cfg = TrainConfig()
    for key in ("epochs", "batch", "lookahead_k", "seed"):
        if key in doc:
            setattr(cfg, key, int(doc[key]))
    for key in ("lr_max", "lr_min", "weight_decay", "lookahead_alpha"):
        if key in doc:
            setattr(cfg, key, float(doc[key]))
    if "lookahead" in doc:
        cfg.lookahead = bool(doc["lookahead"])
    if "stop_at_train_acc" in doc and doc["stop_at_train_acc"] is not None:
        cfg.stop_at_train_acc = float(doc["stop_at_train_acc"])
    return cfg


def _parse_data(doc: dict) -> DataConfig:
    allowed = {"root", "synth", "split_ratio", "split_seed",
               "augment_multiplier", "gamma", "clahe_clip", "clahe_tiles"}
    _check_keys(doc, allowed, "data")
    cfg = DataConfig()
    cfg.root = doc.get("root")
    if doc.get("synth") is not None:
        synth_doc = doc["synth"]
        _check_keys(synth_doc, {"n_per_class", "seed"}, "data.synth")
        cfg.synth = SynthSpec(n_per_class=int(synth_doc.get("n_per_class", 8)),
                              seed=int(synth_doc.get("seed", 0)))
    for key in ("split_ratio", "gamma", "clahe_clip"):
        if key in doc:
            setattr(cfg, key, float(doc[key]))
    for key in ("split_seed", "augment_multiplier"):
        if key in doc:
            setattr(cfg, key, int(doc[key]))
    if "clahe_tiles" in doc:
        cfg.clahe_tiles = tuple(int(v) for v in doc["clahe_tiles"])
    return cfg


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(doc, {"model", "train", "data"}, "config")
    run = RunConfig(model=_parse_model(doc.get("model", {})),
                    train=_parse_train(doc.get("train", {})),
                    data=_parse_data(doc.get("data", {})))
    run.validate()
    return run


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc)


def config_to_doc(run: RunConfig) -> dict:
    """Full JSON document; parse_config(config_to_doc(run)) round-trips."""
    model = run.model
    doc = {
        "model": {
            "image": [model.height, model.width],
            "channels": model.channels,
            "patch": model.patch,
            "dim": model.dim,
            "heads": model.heads,
            "enc_depth": model.enc_depth,
            "dec_depth": model.dec_depth,
            "mlp_ratio": model.mlp_ratio,
            "n_classes": model.n_classes,
            "ratio_range": [model.ratio_lo, model.ratio_hi],
            "ln_eps": model.ln_eps,
            "toggles": {name: getattr(model, name) for name in TOGGLE_NAMES},
            "backbone": {
                "stages": [list(stage) for stage in model.backbone.stages],
                "input_channels": model.backbone.input_channels,
                "pretrained": model.backbone.pretrained_weights,
                "freeze": model.backbone.freeze,
            },
        },
        "train": {
            "epochs": run.train.epochs,
            "batch": run.train.batch,
            "lr_max": run.train.lr_max,
            "lr_min": run.train.lr_min,
            "weight_decay": run.train.weight_decay,
            "lookahead": run.train.lookahead,
            "lookahead_k": run.train.lookahead_k,
            "lookahead_alpha": run.train.lookahead_alpha,
            "seed": run.train.seed,
            "stop_at_train_acc": run.train.stop_at_train_acc,
        },
        "data": {
            "root": run.data.root,
            "synth": None if run.data.synth is None else {
                "n_per_class": run.data.synth.n_per_class,
                "seed": run.data.synth.seed,
            },
            "split_ratio": run.data.split_ratio,
            "split_seed": run.data.split_seed,
            "augment_multiplier": run.data.augment_multiplier,
            "gamma": run.data.gamma,
            "clahe_clip": run.data.clahe_clip,
            "clahe_tiles": list(run.data.clahe_tiles),
        },
    }
    return doc
