"""Composite training loss and ordinal evaluation metrics.

All evaluation metrics derive from one K x K confusion matrix with rows =
true class and columns = predicted class.
"""
from __future__ import annotations

import numpy as np

from mltr import autodiff as ad
from mltr.errors import ContractError, ShapeError


def combined_loss(logits: ad.Tensor, target: int, recon: ad.Tensor | None,
                  image: ad.Tensor | None, aux: bool = True) -> ad.Tensor:
    """Cross-entropy plus (optionally) per-pixel mean squared error.

    The auxiliary term is mse over all H*W*C pixels of the reconstruction
    against the preprocessed input image.
    """
    loss = ad.cross_entropy(logits, target)
    if aux:
        if recon is None or image is None:
            raise ContractError("aux loss requested without reconstruction/image")
        loss = ad.add(loss, ad.mse_reduce(recon, image))
    return loss


class ConfusionMatrix:
    """Integer counts; counts[i][j] = samples of true class i predicted j."""

    def __init__(self, n_classes: int):
        if n_classes < 2:
            raise ShapeError("confusion matrix needs at least 2 classes")
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    @classmethod
    def from_counts(cls, counts) -> "ConfusionMatrix":
        arr = np.asarray(counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {arr.shape}")
        if (arr < 0).any():
            raise ShapeError("confusion matrix entries must be non-negative")
        out = cls(arr.shape[0])
        out.counts = arr
        return out

    def record(self, true_class: int, predicted: int) -> None:
        self.counts[true_class, predicted] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ContractError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean over classes of 2PR/(P+R); P+R == 0 contributes 0."""
    if cm.total == 0:
        raise ContractError("macro F1 of an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    scores = []
    for k in range(cm.n_classes):
        tp = c[k, k]
        denom = c[:, k].sum() + c[k, :].sum()  # (tp+fp) + (tp+fn)
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores))


def qw_kappa(cm: ConfusionMatrix) -> float:
    """Quadratic weighted kappa: 1 - sum(W*O)/sum(W*E).

    W[i,j] = (i-j)^2/(K-1)^2; E is the outer product of the marginals
    normalized by the total. A matrix with all mass on one class on both
    axes has sum(W*E) == 0: defined as 1.0 when sum(W*O) == 0 too,
    otherwise a contract error.
    """
    if cm.n_classes < 2:
        raise ContractError("qw kappa needs K >= 2")
    if cm.total == 0:
        raise ContractError("qw kappa of an empty confusion matrix")
    o = cm.counts.astype(np.float64)
    k = cm.n_classes
    idx = np.arange(k, dtype=np.float64)
    w = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / o.sum()
    num = float((w * o).sum())
    den = float((w * e).sum())
    if den == 0.0:
        if num == 0.0:
            return 1.0
        raise ContractError("qw kappa undefined: degenerate marginals")
    return 1.0 - num / den


def metrics_report(cm: ConfusionMatrix) -> dict:
    """The serialized metrics document (fixed key order)."""
    return {
        "accuracy": accuracy(cm),
        "f1_macro": macro_f1(cm),
        "qw_kappa": qw_kappa(cm),
        "confusion_matrix": cm.counts.tolist(),
    }
