"""Architecture identities, shape ledger, and full-pass contracts."""
import math

import numpy as np
import pytest

from mltr import autodiff as ad
from mltr import masking as mk
from mltr.errors import CapacityError, ContractError, ShapeError
from mltr.latent import BackboneSpec
from mltr.model import (LTBlock, Model, ModelConfig, SequenceState,
                        masked_shortcut, micro_config, small_config)


def tiny_config(**kw):
    base = dict(height=16, width=16, channels=1, patch=4, dim=16, heads=2,
                enc_depth=2, dec_depth=1, mlp_ratio=2.0,
                backbone=BackboneSpec(stages=[(4, 3, 2)], input_channels=1))
    base.update(kw)
    return ModelConfig(**base)


def rand_image(rng, cfg, dtype=np.float32):
    return rng.uniform(0, 1, (cfg.channels, cfg.height, cfg.width)).astype(dtype)


def randomize_modulation(model, seed=0):
    """Break the adaLN-zero identity so gradients flow everywhere."""
    gen = np.random.default_rng(seed)
    for name, p in model.params().items():
        if "mod." in name:
            p.data = gen.normal(0.0, 0.05, p.data.shape).astype(p.data.dtype)


# ------------------------------------------------------------- LT block

def make_block(rng_seed=0, dim=16, heads=2, max_len=10, use_relpos=True):
    rng = np.random.default_rng(rng_seed)
    return LTBlock(dim, heads, 2.0, max_len, 1e-5, use_relpos, rng)


def test_adaln_zero_block_is_exact_identity(rng):
    blk = make_block()
    z = ad.Tensor(rng.standard_normal((7, 16)).astype(np.float32))
    cond = ad.Tensor(rng.standard_normal((1, 16)).astype(np.float32))
    out = blk.forward(z, cond)
    assert np.array_equal(out.data, z.data)


def test_forced_unit_modulation_equals_plain_block(rng):
    # alpha=1, gamma=beta=0 forced through the modulation bias reduces the
    # conditioned block to the plain pre-norm path
    blk = make_block()
    d = 16
    bias = np.zeros(6 * d, np.float32)
    bias[2 * d:3 * d] = 1.0   # alpha1
    bias[5 * d:6 * d] = 1.0   # alpha2
    blk.mod_b.data = bias
    z = ad.Tensor(rng.standard_normal((5, d)).astype(np.float32))
    cond = ad.Tensor(rng.standard_normal((1, d)).astype(np.float32))
    out_cond = blk.forward(z, cond)
    out_plain = blk.forward(z, None)
    assert np.allclose(out_cond.data, out_plain.data, atol=1e-6)


def test_block_output_reacts_to_conditioning(rng):
    blk = make_block()
    blk.mod_w.data = rng.normal(0, 0.05, blk.mod_w.data.shape).astype(np.float32)
    z = ad.Tensor(rng.standard_normal((5, 16)).astype(np.float32))
    out_a = blk.forward(z, ad.Tensor(rng.standard_normal((1, 16)).astype(np.float32)))
    out_b = blk.forward(z, ad.Tensor(rng.standard_normal((1, 16)).astype(np.float32)))
    assert not np.allclose(out_a.data, out_b.data)


# ------------------------------------------------------------- attention

def naive_biased_attention(z, blk):
    """Per-head loop oracle at float64."""
    length, d = z.shape
    h, dh = blk.heads, blk.head_dim
    q = z @ blk.wq.data + blk.bq.data
    k = z @ blk.wk.data + blk.bk.data
    v = z @ blk.wv.data + blk.bv.data
    out = np.zeros((length, d))
    table = blk.relpos_table.data
    cls_bias = blk.relpos_cls.data[:, 0]
    for head in range(h):
        qs = q[:, head * dh:(head + 1) * dh]
        ks = k[:, head * dh:(head + 1) * dh]
        vs = v[:, head * dh:(head + 1) * dh]
        scores = qs @ ks.T / math.sqrt(dh)
        if blk.use_relpos:
            for i in range(length):
                for j in range(length):
                    if i == 0 or j == 0:
                        scores[i, j] += cls_bias[head]
                    else:
                        scores[i, j] += table[head, i - j + blk.max_len - 1]
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        out[:, head * dh:(head + 1) * dh] = attn @ vs
    return out @ blk.wo.data + blk.bo.data


def test_attention_matches_per_head_oracle(rng):
    gen = np.random.default_rng(8)
    blk = LTBlock(8, 2, 2.0, 6, 1e-5, True, gen, dtype=np.float64)
    blk.relpos_table.data = gen.normal(0, 0.5, blk.relpos_table.data.shape)
    blk.relpos_cls.data = gen.normal(0, 0.5, blk.relpos_cls.data.shape)
    z = rng.standard_normal((3, 8))
    got = blk.attention(ad.Tensor(z, dtype=np.float64)).data
    want = naive_biased_attention(z, blk)
    denom = np.maximum(np.abs(want), 1.0)
    assert (np.abs(got - want) / denom).max() < 1e-6


def test_zero_bias_table_equals_plain_msa(rng):
    gen = np.random.default_rng(9)
    blk = LTBlock(16, 4, 2.0, 12, 1e-5, True, gen)
    blk.relpos_table.data = np.zeros_like(blk.relpos_table.data)
    blk.relpos_cls.data = np.zeros_like(blk.relpos_cls.data)
    z = ad.Tensor(rng.standard_normal((9, 16)).astype(np.float32))
    with_bias = blk.attention(z).data
    blk.use_relpos = False
    without = blk.attention(z).data
    assert np.abs(with_bias - without).max() < 1e-6


def test_single_token_attention_is_value_through_output(rng):
    gen = np.random.default_rng(10)
    blk = LTBlock(8, 2, 2.0, 6, 1e-5, True, gen, dtype=np.float64)
    z = ad.Tensor(rng.standard_normal((1, 8)), dtype=np.float64)
    got = blk.attention(z).data
    v = z.data @ blk.wv.data + blk.bv.data
    want = v @ blk.wo.data + blk.bo.data
    assert np.allclose(got, want, rtol=1e-10)


def test_attention_capacity_error(rng):
    blk = make_block(max_len=4)
    z = ad.Tensor(rng.standard_normal((6, 16)).astype(np.float32))
    with pytest.raises(CapacityError):
        blk.attention(z)


# ------------------------------------------------------------- masked shortcut

def test_masked_shortcut_all_ones_and_zeros(rng):
    dec_in = ad.Tensor(rng.standard_normal((5, 3)).astype(np.float32))
    dec_out = ad.Tensor(rng.standard_normal((5, 3)).astype(np.float32))
    ones = masked_shortcut(dec_in, dec_out, np.ones(4, np.int64)).data
    assert np.array_equal(ones[0], dec_out.data[0])
    assert np.array_equal(ones[1:], dec_in.data[1:])
    zeros = masked_shortcut(dec_in, dec_out, np.zeros(4, np.int64)).data
    assert np.array_equal(zeros, dec_out.data)


def test_masked_shortcut_random_masks_per_row_oracle(rng):
    for _ in range(20):
        dec_in = rng.standard_normal((7, 4)).astype(np.float32)
        dec_out = rng.standard_normal((7, 4)).astype(np.float32)
        mask = rng.integers(0, 2, 6)
        got = masked_shortcut(ad.Tensor(dec_in), ad.Tensor(dec_out), mask).data
        assert np.array_equal(got[0], dec_out[0])
        for i in range(6):
            want = dec_in[i + 1] if mask[i] else dec_out[i + 1]
            assert np.array_equal(got[i + 1], want)


def test_masked_shortcut_shape_errors(rng):
    a = ad.Tensor(np.zeros((4, 2), np.float32))
    with pytest.raises(ShapeError):
        masked_shortcut(a, ad.Tensor(np.zeros((5, 2), np.float32)), np.ones(3))
    with pytest.raises(ShapeError):
        masked_shortcut(a, a, np.ones(5))


# ------------------------------------------------------------- encode/decode

@pytest.mark.parametrize("make_cfg", [micro_config, small_config, tiny_config])
def test_shape_ledger(make_cfg, rng):
    cfg = make_cfg()
    model = Model(cfg, seed=0)
    n = cfg.n_patches
    x = rand_image(rng, cfg)
    gen = np.random.default_rng(0)
    logits, recon, plan = model.forward_train(x, gen, rho=0.5)
    assert logits.shape == (cfg.n_classes,)
    assert recon.shape == (cfg.channels, cfg.height, cfg.width)
    assert plan.n == n and plan.n_kept == n // 2
    # encoder output in training mode is (n_kept + 1, D)
    cond = model.latent_tokens(ad.Tensor(x))
    tokens = model.embed_patches(ad.Tensor(x))
    enc = model.encode(mk.gather_kept(tokens, plan), cond, plan, training=True)
    assert enc.tokens.shape == (plan.n_kept + 1, cfg.dim)
    dec, dec_in = model.decode(enc, cond)
    assert dec.tokens.shape == (n + 1, cfg.dim)
    assert dec_in.shape == (n + 1, cfg.dim)


def test_encode_train_and_infer_shapes(rng):
    cfg = tiny_config()
    model = Model(cfg, seed=1)
    x = ad.Tensor(rand_image(rng, cfg))
    tokens = model.embed_patches(x)
    cond = model.latent_tokens(x)
    plan = mk.make_mask_plan(cfg.n_patches, 0.5, np.random.default_rng(0))
    enc = model.encode(mk.gather_kept(tokens, plan), cond, plan, training=True)
    assert enc.tokens.shape == (cfg.n_patches // 2 + 1, cfg.dim)
    enc_full = model.encode(tokens, cond, None, training=False)
    assert enc_full.tokens.shape == (cfg.n_patches + 1, cfg.dim)


def test_encode_mode_contracts(rng):
    cfg = tiny_config()
    model = Model(cfg, seed=1)
    x = ad.Tensor(rand_image(rng, cfg))
    tokens = model.embed_patches(x)
    cond = model.latent_tokens(x)
    with pytest.raises(ContractError):
        model.encode(tokens, cond, None, training=True)
    plan = mk.make_mask_plan(cfg.n_patches, 0.5, np.random.default_rng(0))
    with pytest.raises(ContractError):
        model.encode(tokens, cond, plan, training=False)


def test_decode_appends_identical_mask_rows(rng):
    cfg = tiny_config()
    model = Model(cfg, seed=2)
    randomize_modulation(model)
    x = ad.Tensor(rand_image(rng, cfg))
    tokens = model.embed_patches(x)
    cond = model.latent_tokens(x)
    plan = mk.make_mask_plan(cfg.n_patches, 0.5, np.random.default_rng(1))
    enc = model.encode(mk.gather_kept(tokens, plan), cond, plan, training=True)
    _dec, dec_in = model.decode(enc, cond)
    # masked rows of the decoder input all equal the shared learned token
    for i in range(cfg.n_patches):
        if not plan.mask[i]:
            assert np.array_equal(dec_in.data[i + 1], model.mask_token.data[0])


def test_decode_inference_appends_nothing(rng):
    cfg = tiny_config()
    model = Model(cfg, seed=2)
    x = ad.Tensor(rand_image(rng, cfg))
    tokens = model.embed_patches(x)
    cond = model.latent_tokens(x)
    enc = model.encode(tokens, cond, None, training=False)
    _dec, dec_in = model.decode(enc, cond)
    assert np.array_equal(dec_in.data, enc.tokens.data)


# ------------------------------------------------------------- heads

def test_class_head_zero_inputs_zero_logits():
    cfg = tiny_config()
    model = Model(cfg, seed=3)
    model.head_b.data[:] = 0.0
    state = SequenceState(ad.Tensor(np.zeros((cfg.max_len, cfg.dim), np.float32)),
                          has_cls=True, plan=None)
    assert np.array_equal(model.class_head(state).data, np.zeros(4, np.float32))


def test_class_head_outputs_four_classes(rng):
    cfg = micro_config()
    model = Model(cfg, seed=3)
    logits = model.forward_infer(rand_image(rng, cfg))
    assert logits.shape == (4,)


def test_class_head_argmax_shift_invariant(rng):
    cfg = tiny_config()
    model = Model(cfg, seed=3)
    state = SequenceState(ad.Tensor(rng.standard_normal(
        (cfg.max_len, cfg.dim)).astype(np.float32)), has_cls=True, plan=None)
    logits = model.class_head(state).data
    shifted = logits + 7.25
    assert np.argmax(logits) == np.argmax(shifted)


def test_class_head_requires_cls():
    cfg = tiny_config()
    model = Model(cfg, seed=3)
    state = SequenceState(ad.Tensor(np.zeros((cfg.max_len, cfg.dim), np.float32)),
                          has_cls=False, plan=None)
    with pytest.raises(ContractError):
        model.class_head(state)


def test_reconstruction_zero_weights_zero_image(rng):
    cfg = tiny_config(adaln_final_linear=False)
    model = Model(cfg, seed=4)
    model.recon_w.data[:] = 0.0
    model.recon_b.data[:] = 0.0
    state = SequenceState(ad.Tensor(rng.standard_normal(
        (cfg.max_len, cfg.dim)).astype(np.float32)), has_cls=True, plan=None)
    out = model.reconstruction_head(state, None)
    assert out.shape == (1, 16, 16)
    assert np.array_equal(out.data, np.zeros((1, 16, 16), np.float32))


def test_reconstruction_placement_index_oracle(rng):
    # patch row k of the linear output lands at grid cell (k//gw, k%gw)
    cfg = tiny_config(adaln_final_linear=False)
    model = Model(cfg, seed=4)
    p2 = cfg.patch_dim
    state_rows = np.zeros((cfg.max_len, cfg.dim), np.float32)
    model.recon_w.data[:] = 0.0
    model.recon_b.data[:] = 0.0
    state_rows[3] = 1.0  # patch index 2 (row 0 is cls)
    model.recon_w.data[0, :] = np.arange(p2, dtype=np.float32)
    state = SequenceState(ad.Tensor(state_rows), has_cls=True, plan=None)
    out = model.reconstruction_head(state, None).data
    gw = cfg.width // cfg.patch
    gy, gx = divmod(2, gw)
    block = out[0, gy * cfg.patch:(gy + 1) * cfg.patch,
                gx * cfg.patch:(gx + 1) * cfg.patch]
    # row 3 has a single 1 at dim 0 -> block equals recon_w[0] reshaped
    assert np.array_equal(block.reshape(-1), np.arange(p2, dtype=np.float32))
    outside = out.copy()
    outside[0, gy * cfg.patch:(gy + 1) * cfg.patch,
            gx * cfg.patch:(gx + 1) * cfg.patch] = 0.0
    assert np.array_equal(outside, np.zeros_like(outside))


@pytest.mark.parametrize("make_cfg", [micro_config, small_config])
def test_recon_shape_matches_input_all_toggle_combos(make_cfg, rng):
    for adaln_final in (True, False):
        for latent in (True, False):
            cfg = make_cfg(adaln_final_linear=adaln_final, latent_embedder=latent)
            model = Model(cfg, seed=5)
            gen = np.random.default_rng(2)
            _logits, recon, _plan = model.forward_train(rand_image(rng, cfg), gen)
            assert recon.shape == (cfg.channels, cfg.height, cfg.width)


# ------------------------------------------------------------- full passes

def test_forward_train_deterministic(rng):
    cfg = tiny_config()
    x = rand_image(rng, cfg)
    outs = []
    for _ in range(2):
        model = Model(cfg, seed=11)
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(21)))
        logits, recon, plan = model.forward_train(x, gen)
        outs.append((logits.data.copy(), recon.data.copy(), plan.rho))
        ad.reset_tape()
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][1], outs[1][1])
    assert outs[0][2] == outs[1][2]


def test_all_toggles_off_is_plain_vit_and_differs(rng):
    cfg_off = tiny_config(latent_embedder=False, aux_loss=False,
                          adaln_final_linear=False, relpos_bias=False,
                          masked_shortcut=False, masking=False)
    model_off = Model(cfg_off, seed=12)
    x = rand_image(rng, cfg_off)
    gen = np.random.default_rng(3)
    logits_off, recon_off, plan_off = model_off.forward_train(x, gen)
    assert plan_off is None
    assert logits_off.shape == (4,)
    assert recon_off.shape == (1, 16, 16)

    cfg_on = tiny_config()
    model_on = Model(cfg_on, seed=12)
    randomize_modulation(model_on)
    gen = np.random.default_rng(3)
    logits_on, _, _ = model_on.forward_train(x, gen)
    assert not np.allclose(logits_off.data, logits_on.data)


def test_gradients_reach_every_trainable_parameter(rng):
    cfg = tiny_config()
    model = Model(cfg, seed=13)
    randomize_modulation(model, seed=14)
    x = rand_image(rng, cfg)
    gen = np.random.default_rng(4)
    xt = ad.Tensor(x)
    logits, recon, _plan = model.forward_train(xt, gen, rho=0.5)
    from mltr.metrics import combined_loss
    loss = combined_loss(logits, 1, recon, xt, aux=True)
    ad.backward(loss)
    for name, p in model.trainable_params().items():
        assert p.grad is not None, name
        assert np.linalg.norm(p.grad) > 0, f"zero gradient into {name}"


def test_forward_infer_deterministic_and_no_plan(rng):
    cfg = tiny_config()
    model = Model(cfg, seed=15)
    x = rand_image(rng, cfg)
    before = mk.plans_created()
    a = model.forward_infer(x)
    b = model.forward_infer(x)
    assert np.array_equal(a, b)
    assert mk.plans_created() == before  # inference builds no mask plan


def test_forward_infer_batch_shape(rng):
    cfg = tiny_config()
    model = Model(cfg, seed=16)
    xs = rng.uniform(0, 1, (3, 1, 16, 16)).astype(np.float32)
    out = model.forward_infer_batch(xs)
    assert out.shape == (3, 4)


def test_masked_shortcut_preservation_through_forward(rng):
    # unmasked rows of the final sequence are bit-identical to the decoder
    # input rows, even after randomizing every weight
    cfg = tiny_config()
    model = Model(cfg, seed=17)
    randomize_modulation(model, seed=18)
    x = ad.Tensor(rand_image(rng, cfg))
    cond = model.latent_tokens(x)
    tokens = model.embed_patches(x)
    plan = mk.make_mask_plan(cfg.n_patches, 0.55, np.random.default_rng(5))
    enc = model.encode(mk.gather_kept(tokens, plan), cond, plan, training=True)
    dec, dec_in = model.decode(enc, cond)
    final = masked_shortcut(dec_in, dec.tokens, plan.mask)
    for i in range(cfg.n_patches):
        if plan.mask[i]:
            assert np.array_equal(final.data[i + 1], dec_in.data[i + 1])


def test_blocks_leave_identity_after_one_training_step(rng):
    from mltr.metrics import combined_loss
    from mltr.optim import AdamState, adam_step

    cfg = tiny_config()
    model = Model(cfg, seed=20)
    x = rand_image(rng, cfg)
    xt = ad.Tensor(x)
    gen = np.random.default_rng(6)
    logits, recon, _ = model.forward_train(xt, gen, rho=0.5)
    ad.backward(combined_loss(logits, 0, recon, xt, aux=True))
    adam_step(model.trainable_params(), AdamState(), lr=1e-2)
    ad.reset_tape()
    cond = model.latent_tokens(ad.Tensor(x))
    z = ad.Tensor(rng.standard_normal((5, cfg.dim)).astype(np.float32))
    out = model.enc_blocks[0].forward(z, cond)
    assert not np.array_equal(out.data, z.data)


def test_adaln_zero_model_blocks_identity_end_to_end(rng):
    # freshly built model: every block passes its input through unchanged
    for make_cfg in (micro_config, small_config):
        cfg = make_cfg()
        model = Model(cfg, seed=19)
        x = ad.Tensor(rand_image(rng, cfg))
        cond = model.latent_tokens(x)
        z = ad.Tensor(rng.standard_normal((5, cfg.dim)).astype(np.float32))
        for blk in model.enc_blocks + model.dec_blocks:
            assert np.array_equal(blk.forward(z, cond).data, z.data)
