"""Adam with decoupled weight decay, optional Lookahead, cosine schedule."""
from __future__ import annotations

import math

import numpy as np

from mltr.errors import ContractError


class AdamState:
    """Per-parameter moments plus step count and optional slow weights."""

    def __init__(self, lookahead: bool = False, lookahead_k: int = 5,
                 lookahead_alpha: float = 0.5):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.lookahead = lookahead
        self.lookahead_k = lookahead_k
        self.lookahead_alpha = lookahead_alpha
        self.slow: dict[str, np.ndarray] = {}


def adam_step(params: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every trainable parameter.

    Weight decay is decoupled: p -= lr * (mhat/(sqrt(vhat)+eps) + wd * p),
    with p the pre-update value. Parameters with grad None are skipped
    (e.g. unreachable this step); frozen parameters never enter the state.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            if state.lookahead:
                state.slow[name] = p.data.copy()
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - p.data.dtype.type(lr) * update.astype(p.data.dtype, copy=False)
    if state.lookahead:
        lookahead_sync(state, params)


def lookahead_sync(state: AdamState, params: dict,
                   k: int | None = None, alpha: float | None = None) -> None:
    """Every k steps: slow += alpha * (fast - slow); fast := slow."""
    k = state.lookahead_k if k is None else k
    alpha = state.lookahead_alpha if alpha is None else alpha
    if state.step % k != 0:
        return
    for name, p in params.items():
        if not p.requires_grad or name not in state.slow:
            continue
        slow = state.slow[name]
        slow += np.asarray(alpha, dtype=slow.dtype) * (p.data - slow)
        p.data = slow.copy()


def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-4,
              lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at total_steps.

    Steps beyond total_steps clamp to lr_min.
    """
    if total_steps <= 0:
        raise ContractError("cosine_lr needs total_steps >= 1")
    if step < 0:
        raise ContractError("cosine_lr needs step >= 0")
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
