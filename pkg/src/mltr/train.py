"""Training and evaluation loops.

One masking ratio is drawn per optimizer step and shared by the whole
batch; each sample still gets its own permutation. All per-step randomness
derives from SeedSequence([seed, epoch, step_in_epoch]), so a run is fully
replayable from its config.
"""
from __future__ import annotations

import math
import os

import numpy as np

from mltr import autodiff as ad
from mltr import masking as mk
from mltr.checkpoint import load_into_model, save_model
from mltr.config import RunConfig, config_to_doc
from mltr.data import Dataset, batch_iter, load_manifest, synth_generate
from mltr.errors import DatasetError
from mltr.metrics import ConfusionMatrix, metrics_report
from mltr.model import Model
from mltr.optim import AdamState, adam_step, cosine_lr

LOG_COLUMNS = ("epoch", "step", "lr", "loss_total", "loss_ce", "loss_aux", "train_acc")


def build_dataset(run: RunConfig, data_root=None) -> Dataset:
    """Dataset from --data root or the config's in-memory synth spec."""
    data = run.data
    root = data_root if data_root is not None else data.root
    common = dict(model_hw=(run.model.height, run.model.width),
                  augment_multiplier=data.augment_multiplier,
                  seed=data.split_seed, gamma=data.gamma,
                  clahe_clip=data.clahe_clip, clahe_tiles=data.clahe_tiles)
    if root is not None:
        manifest = load_manifest(root, split_ratio=data.split_ratio,
                                 seed=data.split_seed)
        return Dataset(manifest, root=root, **common)
    if data.synth is None:
        raise DatasetError("no data root given and no synth spec in config")
    manifest, images = synth_generate(data.synth.n_per_class, data.synth.seed,
                                      run.model.height, run.model.width)
    if data.split_ratio != manifest.split_ratio:
        manifest = _resplit(manifest, data.split_ratio, data.split_seed)
    return Dataset(manifest, images=images, **common)


def _resplit(manifest, ratio: float, seed: int):
    from mltr.data import _manifest_for_paths

    out = _manifest_for_paths([e.path for e in manifest.entries], seed,
                              split_ratio=ratio)
    return out


def evaluate_model(model: Model, samples) -> dict:
    """Inference over (image, label) pairs -> metrics document."""
    cm = ConfusionMatrix(model.config.n_classes)
    for arr, label in samples:
        logits = model.forward_infer(arr)
        cm.record(int(label), int(np.argmax(logits)))
    return metrics_report(cm)


def eval_samples(dataset: Dataset):
    """Test split when present, else the unaugmented training images."""
    if dataset.n_test:
        return dataset.test_samples()
    return (dataset.train_sample((i, 0))
            for i in range(len(dataset.manifest.train_entries())))


def format_float(x: float) -> str:
    return f"{x:.10g}"


def train_run(run: RunConfig, out_ckpt, log_path=None, metrics_path=None,
              data_root=None) -> dict:
    """Full training: per-epoch CSV log, best-eval checkpointing, final metrics.

    Returns the final metrics document (computed from the saved checkpoint,
    so `mltr eval` on the same data reproduces it exactly).
    """
    run.validate()
    dataset = build_dataset(run, data_root=data_root)
    if dataset.n_train == 0:
        raise DatasetError("training split is empty")
    tcfg = run.train
    model = Model(run.model, seed=tcfg.seed)
    params = model.trainable_params()
    state = AdamState(lookahead=tcfg.lookahead, lookahead_k=tcfg.lookahead_k,
                      lookahead_alpha=tcfg.lookahead_alpha)
    config_doc = config_to_doc(run)
    steps_per_epoch = math.ceil(dataset.n_train / tcfg.batch)
    total_steps = tcfg.epochs * steps_per_epoch

    log_rows = []
    best_score = -1.0
    global_step = 0
    saved = False
    for epoch in range(tcfg.epochs):
        ep_total = ep_ce = ep_aux = 0.0
        ep_correct = 0
        ep_count = 0
        for step_in_epoch, (xb, yb) in enumerate(
                batch_iter(dataset, tcfg.batch, tcfg.seed, epoch)):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([tcfg.seed, epoch, step_in_epoch])))
            lr = cosine_lr(global_step, total_steps, tcfg.lr_max, tcfg.lr_min)
            ad.reset_tape()
            rho = None
            if run.model.masking:
                rho = mk.sample_ratio(rng, run.model.ratio_lo, run.model.ratio_hi)
            b = xb.shape[0]
            ce_sum = None
            aux_sum = None
            for i in range(b):
                x = ad.Tensor(xb[i])
                logits, recon, _plan = model.forward_train(x, rng, rho=rho)
                ce = ad.cross_entropy(logits, int(yb[i]))
                ce_sum = ce if ce_sum is None else ad.add(ce_sum, ce)
                if run.model.aux_loss:
                    aux = ad.mse_reduce(recon, x)
                    aux_sum = aux if aux_sum is None else ad.add(aux_sum, aux)
                ep_correct += int(np.argmax(logits.data) == yb[i])
            ce_mean = ad.scale(ce_sum, 1.0 / b)
            if aux_sum is not None:
                aux_mean = ad.scale(aux_sum, 1.0 / b)
                loss = ad.add(ce_mean, aux_mean)
                aux_val = aux_mean.item()
            else:
                loss = ce_mean
                aux_val = 0.0
            ad.backward(loss)
            adam_step(params, state, lr=lr, weight_decay=tcfg.weight_decay)
            ep_total += loss.item() * b
            ep_ce += ce_mean.item() * b
            ep_aux += aux_val * b
            ep_count += b
            global_step += 1
        ad.reset_tape()
        train_acc = ep_correct / ep_count
        log_rows.append((epoch, global_step, cosine_lr(global_step - 1, total_steps,
                                                       tcfg.lr_max, tcfg.lr_min),
                         ep_total / ep_count, ep_ce / ep_count,
                         ep_aux / ep_count, train_acc))
        # the stop rule uses inference-mode accuracy on the (unaugmented)
        # training images: the masked-forward accuracy above is a noisy proxy
        train_eval_acc = None
        if tcfg.stop_at_train_acc is not None or dataset.n_test == 0:
            train_eval_acc = evaluate_model(
                model, (dataset.train_sample((i, 0))
                        for i in range(len(dataset.manifest.train_entries()))),
            )["accuracy"]
        if dataset.n_test:
            score = evaluate_model(model, dataset.test_samples())["accuracy"]
        else:
            score = train_eval_acc
        if score > best_score:
            best_score = score
            save_model(out_ckpt, model, config_doc)
            saved = True
        if tcfg.stop_at_train_acc is not None \
                and train_eval_acc >= tcfg.stop_at_train_acc:
            break
    if not saved:
        save_model(out_ckpt, model, config_doc)

    if log_path:
        _write_log(log_path, log_rows)

    # report from the checkpoint actually on disk, same path `mltr eval` takes
    load_into_model(out_ckpt, model)
    metrics = evaluate_model(model, eval_samples(dataset))
    if metrics_path:
        _write_metrics(metrics_path, metrics)
    return metrics


def _write_log(path, rows) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for epoch, step, lr, total, ce, aux, acc in rows:
            fh.write(",".join([str(epoch), str(step), format_float(lr),
                               format_float(total), format_float(ce),
                               format_float(aux), format_float(acc)]) + "\n")


def _write_metrics(path, metrics: dict) -> None:
    import json

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(metrics, indent=2) + "\n")
