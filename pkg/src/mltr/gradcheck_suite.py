"""Finite-difference gradient checks for every op and the full micro model.

Per-op tolerance is 1e-4 at float64 with central differences (h = 1e-5);
the end-to-end micro model (D=8, one encoder + one decoder block, N=4)
is checked at 1e-3. Relative error is |a - n| / max(1, |a|, |n|).
"""
from __future__ import annotations

import numpy as np

from mltr import autodiff as ad
from mltr.latent import BackboneSpec
from mltr.metrics import combined_loss
from mltr.model import Model, ModelConfig

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _t(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True,
                     dtype=np.float64)


def _weighted(out: ad.Tensor, rng) -> ad.Tensor:
    r = ad.Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return ad.sum_all(ad.mul(out, r))


def op_checks(seed: int = 0):
    """Yield (name, loss_fn, params) triples covering every op."""
    rng = np.random.default_rng(seed)

    a, b = _t(rng, 3, 4), _t(rng, 4, 5)
    yield "matmul 2d", (lambda: _weighted(ad.matmul(a, b), np.random.default_rng(1))), [a, b]

    a3, b3 = _t(rng, 2, 3, 4), _t(rng, 2, 4, 5)
    yield "matmul 3d", (lambda: _weighted(ad.matmul(a3, b3), np.random.default_rng(2))), [a3, b3]

    a32, b32 = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    yield "matmul 3d-2d", (lambda: _weighted(ad.matmul(a32, b32), np.random.default_rng(3))), [a32, b32]

    x1, y1 = _t(rng, 4, 6), _t(rng, 4, 6)
    yield "add equal", (lambda: _weighted(ad.add(x1, y1), np.random.default_rng(4))), [x1, y1]

    x2, v2 = _t(rng, 4, 6), _t(rng, 6)
    yield "add suffix-broadcast", (lambda: _weighted(ad.add(x2, v2), np.random.default_rng(5))), [x2, v2]

    x3, y3 = _t(rng, 4, 6), _t(rng, 4, 6)
    yield "mul equal", (lambda: _weighted(ad.mul(x3, y3), np.random.default_rng(6))), [x3, y3]

    x4, v4 = _t(rng, 4, 6), _t(rng, 6)
    yield "mul suffix-broadcast", (lambda: _weighted(ad.mul(x4, v4), np.random.default_rng(7))), [x4, v4]

    x5 = _t(rng, 5)
    yield "scale", (lambda: _weighted(ad.scale(x5, -1.7), np.random.default_rng(8))), [x5]

    x6 = _t(rng, 3, 7)
    yield "softmax", (lambda: _weighted(ad.softmax(x6, axis=-1), np.random.default_rng(9))), [x6]

    x7 = _t(rng, 4, 6)
    yield "layer_norm", (lambda: _weighted(ad.layer_norm(x7, 1e-6), np.random.default_rng(10))), [x7]

    x8 = _t(rng, 4, 5)
    yield "gelu", (lambda: _weighted(ad.gelu(x8), np.random.default_rng(11))), [x8]

    xc, wc = _t(rng, 2, 6, 7), _t(rng, 3, 2, 3, 3)
    yield "conv2d s1 p0", (lambda: _weighted(ad.conv2d(xc, wc, 1, 0), np.random.default_rng(12))), [xc, wc]
    yield "conv2d s2 p1", (lambda: _weighted(ad.conv2d(xc, wc, 2, 1), np.random.default_rng(13))), [xc, wc]

    xb, bb = _t(rng, 3, 4, 5), _t(rng, 3)
    yield "add_channel_bias", (lambda: _weighted(ad.add_channel_bias(xb, bb), np.random.default_rng(14))), [xb, bb]

    xp = _t(rng, 3, 4, 5)
    yield "adaptive_avg_pool", (lambda: _weighted(ad.adaptive_avg_pool(xp), np.random.default_rng(15))), [xp]

    xi = _t(rng, 5, 3)
    idx = np.array([4, 0, 0, 2, 4, 1], dtype=np.int64)
    yield "index_select dup", (lambda: _weighted(ad.index_select(xi, idx), np.random.default_rng(16))), [xi]

    c1, c2 = _t(rng, 2, 4), _t(rng, 3, 4)
    yield "concat", (lambda: _weighted(ad.concat([c1, c2], axis=0), np.random.default_rng(17))), [c1, c2]

    xn = _t(rng, 6, 4)
    yield "narrow", (lambda: _weighted(ad.narrow(xn, 0, 1, 3), np.random.default_rng(18))), [xn]

    xt = _t(rng, 2, 3, 4)
    yield "transpose", (lambda: _weighted(ad.transpose(xt, (2, 0, 1)), np.random.default_rng(19))), [xt]

    xr = _t(rng, 3, 8)
    yield "reshape", (lambda: _weighted(ad.reshape(xr, (4, 6)), np.random.default_rng(20))), [xr]

    ra, rb = _t(rng, 5, 3), _t(rng, 5, 3)
    sel = np.array([1, 0, 1, 1, 0])
    yield "row_select", (lambda: _weighted(ad.row_select(sel, ra, rb), np.random.default_rng(21))), [ra, rb]

    xs = _t(rng, 3, 4)
    yield "sum_all", (lambda: ad.sum_all(xs)), [xs]

    xm = _t(rng, 3, 4)
    yield "mean_all", (lambda: ad.mean_all(xm)), [xm]

    ma, mb = _t(rng, 3, 4), _t(rng, 3, 4)
    yield "mse_reduce", (lambda: ad.mse_reduce(ma, mb)), [ma, mb]

    lg = _t(rng, 4)
    yield "cross_entropy 1d", (lambda: ad.cross_entropy(lg, 2)), [lg]

    lg2 = _t(rng, 3, 4)
    tg2 = np.array([1, 0, 3])
    yield "cross_entropy 2d", (lambda: ad.cross_entropy(lg2, tg2)), [lg2]


def micro_model_f64(seed: int = 0) -> tuple[Model, np.ndarray]:
    """2-block (1 enc + 1 dec), D=8, N=4 model with randomized modulation."""
    cfg = ModelConfig(height=8, width=8, channels=1, patch=4, dim=8, heads=2,
                      enc_depth=1, dec_depth=1, mlp_ratio=2.0,
                      backbone=BackboneSpec(stages=[(4, 3, 2)], input_channels=1))
    model = Model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params().items():
        if "mod." in name or name.endswith(".bias") or name.startswith("recon.mod"):
            p.data = rng.normal(0.0, 0.05, p.data.shape)
    x = rng.uniform(0.0, 1.0, (1, 8, 8))
    return model, x


def end_to_end_check(seed: int = 0, max_coords: int = 6) -> float:
    """Max relative error of d(loss)/d(param) across every parameter."""
    model, x = micro_model_f64(seed)

    def loss_fn():
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(99)))
        xt = ad.Tensor(x, dtype=np.float64)
        logits, recon, _plan = model.forward_train(xt, rng, rho=0.5)
        return combined_loss(logits, 2, recon, xt, aux=True)

    params = list(model.params().values())
    return ad.check_gradients(loss_fn, params, h=1e-5, max_coords=max_coords,
                              rng=np.random.default_rng(7))


def run_gradcheck_suite(verbose: bool = False) -> bool:
    ok = True
    for name, loss_fn, params in op_checks():
        ad.reset_tape()
        err = ad.check_gradients(loss_fn, params, h=1e-5)
        good = err < OP_TOL
        ok = ok and good
        if verbose:
            print(f"{'PASS' if good else 'FAIL'} gradcheck {name}: "
                  f"max rel err {err:.3e} (tol {OP_TOL:.0e})")
    ad.reset_tape()
    err = end_to_end_check()
    good = err < END_TO_END_TOL
    ok = ok and good
    if verbose:
        print(f"{'PASS' if good else 'FAIL'} gradcheck end-to-end micro model: "
              f"max rel err {err:.3e} (tol {END_TO_END_TOL:.0e})")
    ad.reset_tape()
    return ok
