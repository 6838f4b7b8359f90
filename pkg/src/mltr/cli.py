"""Command-line entry points: train, eval, preprocess, synth, attn-dump, gradcheck.

Exit codes: 0 success, 2 configuration/usage error, 3 dataset or I/O error,
4 checkpoint incompatible with the model.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from mltr.errors import (CheckpointError, ConfigError, DatasetError,
                         FormatError, MltrError)

CLASS_DIRS = ("normal", "mild", "moderate", "severe")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mltr",
        description="Masked latent transformer with random masking ratio")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--config", required=True, help="run config JSON")
    src = p_train.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset root directory")
    src.add_argument("--synth", action="store_true",
                     help="use the config's synthetic dataset spec")
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--seed", type=int, help="override train.seed")
    p_train.add_argument("--log", help="per-epoch CSV log (default <out>.log.csv)")
    p_train.add_argument("--metrics",
                         help="final metrics JSON (default <out>.metrics.json)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True, help="dataset root directory")
    p_eval.add_argument("--metrics", help="also write the metrics JSON here")

    p_prep = sub.add_parser("preprocess", help="run the preprocessing chain")
    p_prep.add_argument("--in", dest="in_dir", required=True)
    p_prep.add_argument("--out", dest="out_dir", required=True)
    p_prep.add_argument("--size", type=int, nargs=2, metavar=("H", "W"),
                        default=(512, 512), help="output resolution")

    p_synth = sub.add_parser("synth", help="write a synthetic corpus")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--per-class", type=int, default=8)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--size", type=int, nargs=2, metavar=("H", "W"),
                         default=(64, 64))

    p_attn = sub.add_parser("attn-dump", help="export one attention matrix")
    p_attn.add_argument("--ckpt", required=True)
    p_attn.add_argument("--image", required=True)
    p_attn.add_argument("--layer", type=int, required=True,
                        help="0..enc_depth-1 encoder, then decoder layers")
    p_attn.add_argument("--head", type=int, required=True)
    p_attn.add_argument("--out", required=True, help="prefix for .csv and .pgm")

    sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    return parser


def cmd_train(args) -> int:
    from mltr.config import load_config
    from mltr.train import train_run

    run = load_config(args.config)
    if args.seed is not None:
        run.train.seed = args.seed
    if args.synth and run.data.synth is None:
        raise ConfigError("--synth given but the config has no data.synth spec")
    data_root = args.data
    if not args.synth and data_root is None and run.data.root is None \
            and run.data.synth is None:
        raise ConfigError("no dataset: pass --data DIR or --synth")
    if args.synth:
        data_root = None
        run.data.root = None
    log_path = args.log or f"{args.out}.log.csv"
    metrics_path = args.metrics or f"{args.out}.metrics.json"
    metrics = train_run(run, args.out, log_path=log_path,
                        metrics_path=metrics_path, data_root=data_root)
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_eval(args) -> int:
    from mltr.config import parse_config
    from mltr.checkpoint import load_into_model, read_checkpoint
    from mltr.data import Dataset, load_manifest
    from mltr.model import Model
    from mltr.train import evaluate_model, eval_samples

    config_doc, _ = read_checkpoint(args.ckpt)
    run = parse_config(config_doc)
    model = Model(run.model, seed=run.train.seed)
    load_into_model(args.ckpt, model)
    manifest = load_manifest(args.data, split_ratio=run.data.split_ratio,
                             seed=run.data.split_seed)
    dataset = Dataset(manifest, model_hw=(run.model.height, run.model.width),
                      root=args.data, seed=run.data.split_seed,
                      gamma=run.data.gamma, clahe_clip=run.data.clahe_clip,
                      clahe_tiles=run.data.clahe_tiles)
    metrics = evaluate_model(model, eval_samples(dataset))
    text = json.dumps(metrics, indent=2)
    print(text)
    if args.metrics:
        with open(args.metrics, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_preprocess(args) -> int:
    from mltr.dataio import read_image, write_image
    from mltr.preprocess import preprocess

    in_dir, out_dir = args.in_dir, args.out_dir
    if not os.path.isdir(in_dir):
        raise DatasetError(f"input directory {in_dir} does not exist")
    count = 0
    for sub in sorted(os.listdir(in_dir)):
        sub_in = os.path.join(in_dir, sub)
        if not os.path.isdir(sub_in):
            continue
        sub_out = os.path.join(out_dir, sub)
        os.makedirs(sub_out, exist_ok=True)
        for name in sorted(os.listdir(sub_in)):
            if not name.lower().endswith((".pgm", ".ppm")):
                continue
            img = read_image(os.path.join(sub_in, name))
            out = preprocess(img, out_hw=tuple(args.size))
            stem = os.path.splitext(name)[0]
            write_image(os.path.join(sub_out, stem + ".pgm"), out)
            count += 1
    if count == 0:
        raise DatasetError(f"no .pgm/.ppm files under {in_dir}")
    print(f"preprocessed {count} images into {out_dir}")
    return 0


def cmd_synth(args) -> int:
    from mltr.data import write_synth_corpus

    manifest = write_synth_corpus(args.out, args.per_class, args.seed,
                                  args.size[0], args.size[1])
    print(f"wrote {len(manifest.entries)} images and manifest.json to {args.out}")
    return 0


def cmd_attn_dump(args) -> int:
    from mltr.checkpoint import load_into_model, read_checkpoint
    from mltr.config import parse_config
    from mltr.dataio import ImageBuffer, read_image, write_image
    from mltr.model import Model
    from mltr.preprocess import preprocess, to_unit_float

    config_doc, _ = read_checkpoint(args.ckpt)
    run = parse_config(config_doc)
    model = Model(run.model, seed=run.train.seed)
    load_into_model(args.ckpt, model)
    n_layers = run.model.enc_depth + run.model.dec_depth
    if not (0 <= args.layer < n_layers):
        raise ConfigError(f"layer {args.layer} outside [0, {n_layers})")
    if not (0 <= args.head < run.model.heads):
        raise ConfigError(f"head {args.head} outside [0, {run.model.heads})")

    img = read_image(args.image)
    arr = to_unit_float(preprocess(img, out_hw=(run.model.height, run.model.width),
                                   gamma=run.data.gamma,
                                   clahe_clip=run.data.clahe_clip,
                                   clahe_tiles=run.data.clahe_tiles))
    maps = []
    model.forward_infer(arr, collect_attention=maps)
    attn = maps[args.layer][args.head]  # (L, L) post-softmax
    with open(args.out + ".csv", "w") as fh:
        for row in attn:
            fh.write(",".join(f"{v:.8e}" for v in row) + "\n")
    lo, hi = float(attn.min()), float(attn.max())
    scaled = np.zeros_like(attn) if hi == lo else (attn - lo) * (255.0 / (hi - lo))
    heat = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    write_image(args.out + ".pgm", ImageBuffer.from_array(heat))
    print(f"wrote {args.out}.csv and {args.out}.pgm ({attn.shape[0]}x{attn.shape[1]})")
    return 0


def cmd_gradcheck(_args) -> int:
    from mltr.gradcheck_suite import run_gradcheck_suite

    ok = run_gradcheck_suite(verbose=True)
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "preprocess": cmd_preprocess,
        "synth": cmd_synth,
        "attn-dump": cmd_attn_dump,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except MltrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
