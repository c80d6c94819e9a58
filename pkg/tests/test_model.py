"""Model tests: token assembly, attention against a naive reference,
masked loss locality, action path, checkpoint round trip."""

import math

import numpy as np
import pytest

from smpt.errors import ConfigError, MaskingError, NumericsError, ShapeError
from smpt.gradcheck import finite_difference_check
from smpt.masking import MODALITIES, TOKENS_PER_STEP
from smpt.model import (
    ModelConfig,
    _attention,
    action_forward,
    action_loss,
    config_from_params,
    count_params,
    encode_sequence,
    init_params,
    load_model,
    masked_mse,
    predict_actions,
    reconstruct,
    save_model,
    transfer_mask,
    transformer_forward,
)
from smpt.tensor import Tape, Tensor

SMALL = ModelConfig(hidden=32, blocks=2, heads=4, context=3, horizon=4)


def small_inputs(cfg, seed=0, batch=2):
    rng = np.random.default_rng(seed)
    views = rng.standard_normal((batch, cfg.context, 3, cfg.d_v)).astype(np.float32)
    proprio = rng.standard_normal((batch, cfg.context, cfg.d_p)).astype(np.float32)
    actions = rng.standard_normal((batch, cfg.context, cfg.d_a)).astype(np.float32)
    return views, proprio, actions


def f64_params(params):
    return {k: Tensor(v.data.astype(np.float64), requires_grad=False)
            for k, v in params.items()}


# ------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(context=0)
    with pytest.raises(ConfigError):
        ModelConfig(loss_weights=(1.0, 1.0))


def test_default_param_count():
    params = init_params(ModelConfig())
    assert count_params(params) == 1_282_824


def test_init_deterministic():
    a = init_params(SMALL, seed=7)
    b = init_params(SMALL, seed=7)
    c = init_params(SMALL, seed=8)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)
    assert np.all(a["blocks.0.ln1.weight"].data == 1.0)
    assert np.all(a["enc.proprio.bias"].data == 0.0)


# ------------------------------------------------------- token assembly

def test_encode_shape():
    params = init_params(SMALL)
    v, p, a = small_inputs(SMALL)
    mask = np.zeros(SMALL.layout().length, dtype=bool)
    mask[0] = True
    tokens = encode_sequence(v, p, a, mask, params, SMALL)
    assert tokens.shape == (2, TOKENS_PER_STEP * SMALL.context, SMALL.hidden)


def test_masked_tokens_independent_of_inputs():
    # with everything masked the token matrix must not depend on the
    # observations at all
    params = init_params(SMALL)
    mask = np.ones(SMALL.layout().length, dtype=bool)
    t1 = encode_sequence(*small_inputs(SMALL, seed=1), mask, params, SMALL)
    t2 = encode_sequence(*small_inputs(SMALL, seed=2), mask, params, SMALL)
    assert np.array_equal(t1.data, t2.data)


def test_unmasked_tokens_track_inputs():
    params = init_params(SMALL)
    mask = np.zeros(SMALL.layout().length, dtype=bool)
    mask[-1] = True
    t1 = encode_sequence(*small_inputs(SMALL, seed=1), mask, params, SMALL)
    t2 = encode_sequence(*small_inputs(SMALL, seed=2), mask, params, SMALL)
    assert not np.allclose(t1.data, t2.data)


def test_mask_token_positional_sharing():
    # two masked tokens of the same modality differ exactly by the
    # difference of their timestep position embeddings
    cfg = SMALL
    params = init_params(cfg)
    layout = cfg.layout()
    mask = np.ones(layout.length, dtype=bool)
    tokens = encode_sequence(*small_inputs(cfg), mask, params, cfg).data[0]
    pos = params["pos.table"].data
    for m in ("view2", "action"):
        i0 = layout.token_index(0, m)
        i2 = layout.token_index(2, m)
        np.testing.assert_allclose(tokens[i2] - tokens[i0], pos[2] - pos[0],
                                   rtol=0, atol=1e-6)
    # same timestep, different modality: difference is the mask-token
    # difference, independent of which timestep
    d01 = tokens[layout.token_index(1, "proprio")] - tokens[layout.token_index(1, "view1")]
    d02 = tokens[layout.token_index(2, "proprio")] - tokens[layout.token_index(2, "view1")]
    np.testing.assert_allclose(d01, d02, rtol=0, atol=1e-6)
    np.testing.assert_allclose(
        d01, params["mask.proprio"].data - params["mask.view1"].data,
        rtol=0, atol=1e-6)


def test_encode_rejects_bad_shapes():
    params = init_params(SMALL)
    v, p, a = small_inputs(SMALL)
    mask = np.zeros(SMALL.layout().length, dtype=bool)
    with pytest.raises(ShapeError):
        encode_sequence(v[:, :-1], p, a, mask, params, SMALL)
    with pytest.raises(ShapeError):
        encode_sequence(v, p[..., :-1], a, mask, params, SMALL)
    with pytest.raises(ShapeError):
        encode_sequence(v, p, a, mask[:-1], params, SMALL)


# ----------------------------------------------------------- attention

def naive_attention(x, p, prefix, cfg):
    """Per-query reference in plain loops, float64."""
    W = p[f"{prefix}.qkv.weight"].data
    b = p[f"{prefix}.qkv.bias"].data
    qkv = x @ W + b
    B, L, d = x.shape
    h, dh = cfg.heads, cfg.hidden // cfg.heads
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    out = np.zeros_like(x)
    for bi in range(B):
        for hi in range(h):
            sl = slice(hi * dh, (hi + 1) * dh)
            qs, ks, vs = q[bi, :, sl], k[bi, :, sl], v[bi, :, sl]
            for i in range(L):
                s = qs[i] @ ks.T / math.sqrt(dh)
                e = np.exp(s - s.max())
                out[bi, i, sl] = (e / e.sum()) @ vs
    return out @ p[f"{prefix}.proj.weight"].data + p[f"{prefix}.proj.bias"].data


def test_attention_matches_naive_reference():
    cfg = SMALL
    p64 = f64_params(init_params(cfg, seed=3))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 15, cfg.hidden))
    fast = _attention(Tensor(x), p64, "blocks.0.attn", cfg).data
    ref = naive_attention(x, p64, "blocks.0.attn", cfg)
    np.testing.assert_allclose(fast, ref, rtol=0, atol=1e-5)


def test_attention_single_token_ignores_scores():
    # with one token the softmax is exactly 1 regardless of q/k, so the
    # output only depends on the value and output projections
    cfg = SMALL
    params = init_params(cfg, seed=4)
    p64 = f64_params(params)
    alt = f64_params(params)
    rng = np.random.default_rng(1)
    W = alt["blocks.0.attn.qkv.weight"].data.copy()
    W[:, :2 * cfg.hidden] = rng.standard_normal(W[:, :2 * cfg.hidden].shape)
    alt["blocks.0.attn.qkv.weight"] = Tensor(W)
    x = rng.standard_normal((3, 1, cfg.hidden))
    a = _attention(Tensor(x), p64, "blocks.0.attn", cfg).data
    b = _attention(Tensor(x), alt, "blocks.0.attn", cfg).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_attention_permutation_equivariance():
    cfg = SMALL
    p64 = f64_params(init_params(cfg, seed=5))
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 10, cfg.hidden))
    perm = rng.permutation(10)
    out = _attention(Tensor(x), p64, "blocks.1.attn", cfg).data
    out_p = _attention(Tensor(x[:, perm]), p64, "blocks.1.attn", cfg).data
    np.testing.assert_allclose(out_p, out[:, perm], rtol=0, atol=1e-10)


def test_forward_shape_and_finiteness():
    params = init_params(SMALL)
    mask = transfer_mask(SMALL)
    tokens = encode_sequence(*small_inputs(SMALL), mask, params, SMALL)
    hidden = transformer_forward(tokens, params, SMALL)
    assert hidden.shape == tokens.shape
    assert np.isfinite(hidden.data).all()


def test_nonfinite_input_rejected():
    params = init_params(SMALL)
    bad = Tensor(np.full((1, 15, SMALL.hidden), np.nan, dtype=np.float32))
    with pytest.raises(NumericsError):
        transformer_forward(bad, params, SMALL)


def test_nonfinite_activation_names_block():
    params = init_params(SMALL)
    params["blocks.0.attn.proj.bias"].data[:] = np.inf
    tokens = encode_sequence(*small_inputs(SMALL),
                             np.zeros(15, dtype=bool) | transfer_mask(SMALL),
                             params, SMALL)
    with np.errstate(invalid="ignore"), pytest.raises(NumericsError, match="block 0"):
        transformer_forward(tokens, params, SMALL)


# -------------------------------------------------------------- losses

def test_reconstruct_shapes():
    cfg = SMALL
    params = init_params(cfg)
    hidden = Tensor(np.random.default_rng(0).standard_normal(
        (2, cfg.layout().length, cfg.hidden)).astype(np.float32))
    preds = reconstruct(hidden, params, cfg)
    assert set(preds) == set(MODALITIES)
    for m in MODALITIES:
        assert preds[m].shape == (2, cfg.context, cfg.modality_dims[m])


def test_reconstruct_zero_hidden_gives_bias():
    cfg = SMALL
    params = init_params(cfg)
    params["recon.proprio.bias"].data[:] = np.arange(cfg.d_p, dtype=np.float32)
    hidden = Tensor(np.zeros((1, cfg.layout().length, cfg.hidden), dtype=np.float32))
    preds = reconstruct(hidden, params, cfg)
    assert np.array_equal(preds["proprio"].data[0, 0], np.arange(cfg.d_p))


def test_masked_mse_hand_oracle():
    # one masked proprio token, prediction off by (1,0,0,0): the loss is
    # the proprio weight times 1/D_p = 0.25
    cfg = SMALL
    layout = cfg.layout()
    T = cfg.context
    targets = {"view1": np.zeros((1, T, cfg.d_v), dtype=np.float32),
               "view2": np.zeros((1, T, cfg.d_v), dtype=np.float32),
               "view3": np.zeros((1, T, cfg.d_v), dtype=np.float32),
               "proprio": np.zeros((1, T, cfg.d_p), dtype=np.float32),
               "action": np.zeros((1, T, cfg.d_a), dtype=np.float32)}
    preds = {m: Tensor(t.copy()) for m, t in targets.items()}
    preds["proprio"].data[0, 1, 0] = 1.0
    mask = np.zeros(layout.length, dtype=bool)
    mask[layout.token_index(1, "proprio")] = True
    params = init_params(cfg)
    loss, comps = masked_mse(preds, targets, mask, cfg, params)
    assert loss.item() == 0.25
    assert comps["proprio"] == 0.25
    assert comps["view1"] == 0.0


def test_masked_mse_locality_exact():
    # unmasked entries of the prediction must drop out of the loss
    # bit-for-bit, not approximately
    cfg = SMALL
    layout = cfg.layout()
    rng = np.random.default_rng(3)
    T = cfg.context
    targets = {m: rng.standard_normal((2, T, cfg.modality_dims[m])).astype(np.float32)
               for m in MODALITIES}
    base = {m: rng.standard_normal((2, T, cfg.modality_dims[m])).astype(np.float32)
            for m in MODALITIES}
    mask = np.zeros((2, layout.length), dtype=bool)
    mask[0, layout.token_index(0, "view2")] = True
    mask[1, layout.token_index(2, "action")] = True
    params = init_params(cfg)
    preds = {m: Tensor(base[m].copy()) for m in MODALITIES}
    l1, _ = masked_mse(preds, targets, mask, cfg, params)
    perturbed = {m: base[m] + rng.standard_normal(base[m].shape).astype(np.float32)
                 for m in MODALITIES}
    perturbed["view2"][0, 0] = base["view2"][0, 0]
    perturbed["action"][1, 2] = base["action"][1, 2]
    preds2 = {m: Tensor(perturbed[m]) for m in MODALITIES}
    l2, _ = masked_mse(preds2, targets, mask, cfg, params)
    assert l1.item() == l2.item()


def test_masked_mse_empty_mask_rejected():
    cfg = SMALL
    params = init_params(cfg)
    targets = {m: np.zeros((1, cfg.context, cfg.modality_dims[m]), dtype=np.float32)
               for m in MODALITIES}
    preds = {m: Tensor(t) for m, t in targets.items()}
    with pytest.raises(MaskingError):
        masked_mse(preds, targets, np.zeros(cfg.layout().length, dtype=bool),
                   cfg, params)


def test_masked_mse_weighted_sum_of_components():
    cfg = ModelConfig(hidden=32, blocks=1, heads=4, context=2, horizon=2,
                      loss_weights=(0.5, 1.0, 0.0, 2.0, 1.0))
    layout = cfg.layout()
    rng = np.random.default_rng(4)
    targets = {m: rng.standard_normal((1, 2, cfg.modality_dims[m])).astype(np.float32)
               for m in MODALITIES}
    preds = {m: Tensor(rng.standard_normal(t.shape).astype(np.float32))
             for m, t in targets.items()}
    mask = np.ones(layout.length, dtype=bool)
    params = init_params(cfg)
    loss, comps = masked_mse(preds, targets, mask, cfg, params)
    expect = (0.5 * comps["view1"] + 1.0 * comps["view2"] + 2.0 * comps["proprio"]
              + 1.0 * comps["action"])
    assert comps["view3"] == 0.0
    assert abs(loss.item() - expect) < 1e-6


# -------------------------------------------------------------- actions

def test_action_forward_shape():
    cfg = SMALL
    params = init_params(cfg)
    pred = action_forward(*small_inputs(cfg), transfer_mask(cfg), params, cfg)
    assert pred.shape == (2, cfg.horizon, cfg.d_a)


def test_action_forward_requires_masked_last_action():
    cfg = SMALL
    params = init_params(cfg)
    with pytest.raises(MaskingError):
        action_forward(*small_inputs(cfg),
                       np.zeros(cfg.layout().length, dtype=bool), params, cfg)


def test_action_forward_ignores_masked_last_action_content():
    cfg = SMALL
    params = init_params(cfg)
    v, p, a = small_inputs(cfg)
    a2 = a.copy()
    a2[:, -1] = 99.0
    mask = transfer_mask(cfg)
    out1 = action_forward(v, p, a, mask, params, cfg).data
    out2 = action_forward(v, p, a2, mask, params, cfg).data
    assert np.array_equal(out1, out2)


def test_horizon_one_degenerate():
    cfg = ModelConfig(hidden=32, blocks=1, heads=4, context=2, horizon=1)
    params = init_params(cfg)
    v, p, a = small_inputs(cfg)
    pred = action_forward(v, p, a, transfer_mask(cfg), params, cfg)
    assert pred.shape == (2, 1, cfg.d_a)


def test_action_loss_hand_case():
    params = init_params(SMALL)
    pred = Tensor(np.zeros((1, 2, 2), dtype=np.float32))
    target = np.ones((1, 2, 2), dtype=np.float32)
    validity = np.array([[1.0, 0.0]], dtype=np.float32)
    loss = action_loss(pred, target, validity, params)
    assert loss.item() == 1.0
    with pytest.raises(ShapeError):
        action_loss(pred, target, np.zeros((1, 2), dtype=np.float32), params)


def test_action_loss_ignores_invalid_slots():
    params = init_params(SMALL)
    rng = np.random.default_rng(5)
    pred = Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32))
    target = rng.standard_normal((2, 3, 4)).astype(np.float32)
    validity = np.array([[1, 1, 0], [1, 0, 0]], dtype=np.float32)
    l1 = action_loss(pred, target, validity, params).item()
    target2 = target.copy()
    target2[0, 2] = 77.0
    target2[1, 1:] = -55.0
    l2 = action_loss(pred, target2, validity, params).item()
    assert l1 == l2


def test_transfer_mask_layout():
    cfg = SMALL
    layout = cfg.layout()
    mb = transfer_mask(cfg)
    assert mb.sum() == 1 and mb[layout.action_token(cfg.context - 1)]
    mb2 = transfer_mask(cfg, cold_pad=2)
    want = {layout.action_token(0), layout.action_token(1),
            layout.action_token(cfg.context - 1)}
    assert set(np.flatnonzero(mb2)) == want


def test_predict_actions_matches_batched():
    from smpt.data import ContextWindow
    cfg = SMALL
    params = init_params(cfg)
    v, p, a = small_inputs(cfg, batch=1)
    w = ContextWindow(views=v[0], proprio=p[0], actions=a[0], offset=0,
                      task="pick", seed=0)
    single = predict_actions(w, params, cfg)
    batched = action_forward(v, p, a, transfer_mask(cfg), params, cfg).data[0]
    assert single.shape == (cfg.horizon, cfg.d_a)
    np.testing.assert_array_equal(single, batched)


def test_transfer_grads_skip_recon_heads():
    cfg = SMALL
    params = init_params(cfg)
    v, p, a = small_inputs(cfg)
    target = np.zeros((2, cfg.horizon, cfg.d_a), dtype=np.float32)
    validity = np.ones((2, cfg.horizon), dtype=np.float32)
    with Tape() as tape:
        pred = action_forward(v, p, a, transfer_mask(cfg), params, cfg)
        loss = action_loss(pred, target, validity, params)
        tape.backward(loss)
    for k, t in params.items():
        if k.startswith("recon.") or k.startswith("meta."):
            assert t.grad is None, k
        else:
            assert t.grad is not None, k
    assert np.abs(params["head.action.weight"].grad).max() > 0


# ---------------------------------------------------------- checkpoints

def test_model_checkpoint_round_trip(tmp_path):
    cfg = SMALL
    params = init_params(cfg, seed=11)
    path = tmp_path / "model.rptc"
    save_model(path, params)
    loaded, cfg2 = load_model(path)
    assert cfg2 == cfg
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k].data, params[k].data), k


def test_config_from_params_matches():
    cfg = ModelConfig(hidden=64, blocks=3, heads=2, context=5, horizon=8)
    assert config_from_params(init_params(cfg)) == cfg


# ------------------------------------------------------ gradient check

def test_small_model_passes_fd_check():
    cfg = ModelConfig(hidden=16, blocks=1, heads=2, context=2, horizon=2)
    params = init_params(cfg, seed=9)
    rng = np.random.default_rng(6)
    v = rng.standard_normal((1, 2, 3, cfg.d_v)).astype(np.float32)
    p = rng.standard_normal((1, 2, cfg.d_p)).astype(np.float32)
    a = rng.standard_normal((1, 2, cfg.d_a)).astype(np.float32)
    mask = np.zeros(cfg.layout().length, dtype=bool)
    mask[[0, 3, 8]] = True
    targets = {"view1": v[:, :, 0], "view2": v[:, :, 1], "view3": v[:, :, 2],
               "proprio": p, "action": a}

    def model_fn(ps):
        tokens = encode_sequence(v, p, a, mask, ps, cfg)
        hidden = transformer_forward(tokens, ps, cfg)
        preds = reconstruct(hidden, ps, cfg)
        loss, _ = masked_mse(preds, targets, mask, cfg, ps)
        return loss

    fd_params = {k: t for k, t in params.items()
                 if t.requires_grad and not k.startswith("head.")}
    report = finite_difference_check(model_fn, fd_params, tolerance=1e-4,
                                     h=1e-4, samples_per_param=4,
                                     rng=np.random.default_rng(7))
    assert report.passed, report.summary()
