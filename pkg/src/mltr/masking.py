"""Patch bookkeeping: patchify/unpatchify, ratio sampling, shuffle/restore.

The shuffle-truncate-restore trick works on indices only: a seeded
permutation selects which rows survive, and the inverse permutation puts
every token back at its original position after mask tokens are appended.
Patch rows are flattened channel-major, then kernel-row-major; the order is
fixed so checkpoints stay portable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mltr import autodiff as ad
from mltr.errors import ConfigError, ShapeError

# Incremented every time a MaskPlan is built; lets tests assert that the
# inference path never constructs one.
_PLANS_CREATED = 0


def plans_created() -> int:
    return _PLANS_CREATED


@dataclass(frozen=True)
class MaskPlan:
    """One masking event: ratio, permutation, and the binary keep mask."""

    rho: float
    n: int
    n_kept: int
    perm: np.ndarray       # shuffled order of the N token indices
    inv_perm: np.ndarray   # inverse permutation
    mask: np.ndarray       # length N; 1 = kept (unmasked), 0 = masked

    def validate(self) -> None:
        assert self.n_kept == int(np.floor(self.n * (1.0 - self.rho)))
        assert sorted(self.perm.tolist()) == list(range(self.n))
        assert np.array_equal(self.inv_perm[self.perm], np.arange(self.n))
        assert int(self.mask.sum()) == self.n_kept
        kept = set(self.perm[:self.n_kept].tolist())
        assert all((i in kept) == bool(self.mask[i]) for i in range(self.n))


def patchify(x: ad.Tensor, patch: int) -> ad.Tensor:
    """(C,H,W) -> (N, patch*patch*C) rows in row-major grid order."""
    if x.data.ndim != 3:
        raise ShapeError(f"patchify: need (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: {patch} does not divide image {h}x{w}")
    gh, gw = h // patch, w // patch
    t = ad.reshape(x, (c, gh, patch, gw, patch))
    t = ad.transpose(t, (1, 3, 0, 2, 4))
    return ad.reshape(t, (gh * gw, c * patch * patch))


def unpatchify(rows: ad.Tensor, c: int, h: int, w: int, patch: int) -> ad.Tensor:
    """Exact inverse of patchify."""
    n, d = rows.shape
    if h % patch or w % patch or n * d != c * h * w:
        raise ShapeError(
            f"unpatchify: {n}x{d} rows cannot form ({c},{h},{w}) with patch {patch}")
    gh, gw = h // patch, w // patch
    t = ad.reshape(rows, (gh, gw, c, patch, patch))
    t = ad.transpose(t, (2, 0, 3, 1, 4))
    return ad.reshape(t, (c, h, w))


def sample_ratio(rng: np.random.Generator, lo: float = 0.3, hi: float = 0.8) -> float:
    """Uniform masking ratio in [lo, hi]."""
    if not (0.0 <= lo <= hi < 1.0):
        raise ConfigError(f"ratio range [{lo}, {hi}] invalid")
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


def make_mask_plan(n: int, rho: float, rng: np.random.Generator) -> MaskPlan:
    """Sample a permutation and derive the keep mask for ratio rho."""
    if n < 1:
        raise ConfigError(f"mask plan needs at least one token, got {n}")
    if not (0.0 <= rho < 1.0):
        raise ConfigError(f"masking ratio {rho} outside [0, 1)")
    n_kept = int(np.floor(n * (1.0 - rho)))
    if n_kept == 0:
        raise ConfigError(f"ratio {rho} leaves no tokens out of {n}")
    perm = rng.permutation(n).astype(np.int64)
    inv_perm = np.argsort(perm).astype(np.int64)
    mask = np.zeros(n, dtype=np.int64)
    mask[perm[:n_kept]] = 1
    global _PLANS_CREATED
    _PLANS_CREATED += 1
    return MaskPlan(rho=float(rho), n=n, n_kept=n_kept,
                    perm=perm, inv_perm=inv_perm, mask=mask)


def gather_kept(tokens: ad.Tensor, plan: MaskPlan) -> ad.Tensor:
    """Keep the first n_kept rows of the shuffled sequence."""
    if tokens.shape[0] != plan.n:
        raise ShapeError(
            f"gather_kept: {tokens.shape[0]} tokens for a plan over {plan.n}")
    return ad.index_select(tokens, plan.perm[:plan.n_kept])


def restore_order(full: ad.Tensor, plan: MaskPlan) -> ad.Tensor:
    """Unshuffle kept-then-mask rows so row i is the token for position i."""
    if full.shape[0] != plan.n:
        raise ShapeError(
            f"restore_order: {full.shape[0]} rows for a plan over {plan.n}")
    return ad.index_select(full, plan.inv_perm)
