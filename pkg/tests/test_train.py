"""Training-loop tests: schedule, determinism, frozen-set discipline,
target construction, divergence handling, tiny-batch overfit."""

import numpy as np
import pytest

from smpt.data import generate_trajectory, sample_window
from smpt.errors import ConfigError, TrainingDiverged
from smpt.masking import sample_mask_from_range
from smpt.model import ModelConfig, init_params, load_model
from smpt.train import (
    MetricsWriter,
    TrainConfig,
    bc_targets,
    finetune,
    lr_at,
    overfit,
    parse_mode,
    pretrain,
    pretrain_trainable,
    trainable_names,
    train_from_scratch,
)
from smpt.utils import make_rng

MC = ModelConfig(hidden=32, blocks=2, heads=2, context=4, horizon=4)


@pytest.fixture(scope="module")
def demos():
    return [generate_trajectory("pick", s) for s in range(6)]


# ------------------------------------------------------------- schedule

def test_schedule_endpoints():
    assert lr_at(0, 1000, 100, 4e-4) == 0.0
    assert lr_at(100, 1000, 100, 4e-4) == pytest.approx(4e-4)
    assert lr_at(1000, 1000, 100, 4e-4) == pytest.approx(0.0, abs=1e-12)


def test_schedule_warms_up_then_decays():
    vals = [lr_at(s, 200, 40, 1e-3) for s in range(201)]
    for a, b in zip(vals[:40], vals[1:41]):
        assert b > a
    for a, b in zip(vals[40:-1], vals[41:]):
        assert b <= a
    assert max(vals) == pytest.approx(1e-3)


def test_schedule_no_warmup():
    assert lr_at(0, 10, 0, 1e-3) == pytest.approx(1e-3)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10, warmup_epochs=11)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)


# -------------------------------------------------------------- targets

def test_bc_targets_mid_trajectory(demos):
    traj = demos[0]
    T, H = 4, 4
    offset = 2
    tgt, val = bc_targets(traj, offset, T, H)
    assert np.all(val == 1.0)
    np.testing.assert_array_equal(tgt, traj.actions[offset + T - 1:offset + T - 1 + H])


def test_bc_targets_truncated_at_end(demos):
    traj = demos[0]
    T, H = 4, 6
    offset = len(traj) - T - 2  # leaves 3 actions from the window's last step
    tgt, val = bc_targets(traj, offset, T, H)
    assert val.tolist() == [1, 1, 1, 0, 0, 0]
    np.testing.assert_array_equal(tgt[:3], traj.actions[offset + T - 1:])
    assert np.all(tgt[3:] == 0)


def test_bc_targets_last_window_still_valid(demos):
    traj = demos[0]
    tgt, val = bc_targets(traj, len(traj) - 4, 4, 4)
    assert val[0] == 1.0
    np.testing.assert_array_equal(tgt[0], traj.actions[-1])


# ------------------------------------------------------- transfer modes

def test_parse_mode():
    assert parse_mode("full") == ("full", -1)
    assert parse_mode("probe") == ("probe", 0)
    assert parse_mode("partial:3") == ("partial", 3)
    for bad in ("partial:x", "partial:-1", "frozen", ""):
        with pytest.raises(ConfigError):
            parse_mode(bad)


def test_trainable_sets():
    params = init_params(MC)
    full = set(trainable_names(params, "full", MC))
    assert all(not n.startswith(("recon.", "meta.")) for n in full)
    assert "enc.view1.weight" in full and "pos.table" in full
    assert "head.action.weight" in full

    probe = set(trainable_names(params, "probe", MC))
    assert probe == {"head.action.weight", "head.action.bias"}
    assert set(trainable_names(params, "partial:0", MC)) == probe

    p1 = set(trainable_names(params, "partial:1", MC))
    assert "blocks.1.attn.qkv.weight" in p1 and "ln_f.weight" in p1
    assert "blocks.0.attn.qkv.weight" not in p1
    assert "enc.view1.weight" not in p1 and "pos.table" not in p1

    with pytest.raises(ConfigError):
        trainable_names(params, f"partial:{MC.blocks + 1}", MC)


def test_pretrain_trainable_excludes_action_head():
    params = init_params(MC)
    names = set(pretrain_trainable(params))
    assert "head.action.weight" not in names
    assert not any(n.startswith("meta.") for n in names)
    assert "recon.view2.weight" in names


# ------------------------------------------------------------- pretrain

def test_pretrain_deterministic(tmp_path, demos):
    tc = TrainConfig(epochs=2, batch_size=4, warmup_epochs=1, seed=3)
    p1, l1 = pretrain(demos, MC, tc, metrics_path=tmp_path / "a.csv")
    p2, l2 = pretrain(demos, MC, tc, metrics_path=tmp_path / "b.csv")
    assert l1 == l2
    assert all(np.array_equal(p1[k].data, p2[k].data) for k in p1)
    # metric columns identical apart from wall-time
    rows_a = [r.rsplit(",", 1)[0] for r in open(tmp_path / "a.csv")]
    rows_b = [r.rsplit(",", 1)[0] for r in open(tmp_path / "b.csv")]
    assert rows_a == rows_b


def test_pretrain_seed_changes_result(demos):
    tc1 = TrainConfig(epochs=1, batch_size=4, warmup_epochs=0, seed=3)
    tc2 = TrainConfig(epochs=1, batch_size=4, warmup_epochs=0, seed=4)
    p1, _ = pretrain(demos, MC, tc1)
    p2, _ = pretrain(demos, MC, tc2)
    assert any(not np.array_equal(p1[k].data, p2[k].data) for k in p1)


def test_pretrain_metrics_format(tmp_path, demos):
    tc = TrainConfig(epochs=2, batch_size=4, warmup_epochs=1, seed=0)
    pretrain(demos, MC, tc, metrics_path=tmp_path / "m.csv")
    lines = open(tmp_path / "m.csv").read().splitlines()
    assert lines[0] == MetricsWriter.HEADER
    steps = [int(r.split(",")[0]) for r in lines[1:]]
    assert steps == list(range(1, len(steps) + 1))
    # 6 demos at batch 4 -> 2 steps per epoch; wall time only on the
    # second step of each epoch
    tails = [r.split(",")[-1] for r in lines[1:]]
    assert tails[0] == "" and tails[1] != ""
    # first-step lr is zero under warmup
    assert float(lines[1].split(",")[3]) == 0.0


def test_pretrain_checkpoint_cadence(tmp_path, demos):
    tc = TrainConfig(epochs=4, batch_size=8, warmup_epochs=0, seed=0,
                     checkpoint_every=2)
    params, _ = pretrain(demos, MC, tc, out_checkpoint=tmp_path / "final.rptc",
                         checkpoints_dir=tmp_path / "ckpt")
    assert (tmp_path / "ckpt" / "epoch_0002.rptc").exists()
    assert (tmp_path / "ckpt" / "epoch_0004.rptc").exists()
    loaded, cfg = load_model(tmp_path / "final.rptc")
    assert cfg == MC
    assert np.array_equal(loaded["pos.table"].data, params["pos.table"].data)


def test_pretrain_divergence_aborts_with_checkpoint(tmp_path, demos):
    tc = TrainConfig(epochs=30, batch_size=8, warmup_epochs=0, seed=0, lr=1e6)
    with pytest.raises(TrainingDiverged), np.errstate(all="ignore"):
        pretrain(demos, MC, tc, checkpoints_dir=tmp_path / "ckpt")
    saved, cfg = load_model(tmp_path / "ckpt" / "last_good.rptc")
    assert cfg == MC
    assert all(np.isfinite(t.data).all() for t in saved.values())


def test_pretrain_rejects_short_trajectories(demos):
    wide = ModelConfig(hidden=32, blocks=1, heads=2, context=500, horizon=4)
    with pytest.raises(ConfigError):
        pretrain(demos, wide, TrainConfig(epochs=1, warmup_epochs=0))


# ------------------------------------------------------------- finetune

def test_finetune_frozen_set_discipline(demos):
    base = init_params(MC, seed=1)
    tc = TrainConfig(epochs=2, batch_size=4, warmup_epochs=0, seed=5)
    for mode in ("probe", "partial:1", "full"):
        tuned, _ = finetune(base, demos, mode, MC, tc)
        allowed = set(trainable_names(base, mode, MC))
        changed = {k for k in base
                   if not np.array_equal(base[k].data, tuned[k].data)}
        assert changed == allowed, mode


def test_finetune_leaves_input_params_untouched(demos):
    base = init_params(MC, seed=1)
    snapshot = {k: t.data.copy() for k, t in base.items()}
    finetune(base, demos, "full", MC,
             TrainConfig(epochs=1, batch_size=4, warmup_epochs=0))
    assert all(np.array_equal(base[k].data, snapshot[k]) for k in base)


def test_finetune_deterministic(demos):
    base = init_params(MC, seed=2)
    tc = TrainConfig(epochs=2, batch_size=4, warmup_epochs=1, seed=7)
    t1, l1 = finetune(base, demos, "full", MC, tc)
    t2, l2 = finetune(base, demos, "full", MC, tc)
    assert l1 == l2
    assert all(np.array_equal(t1[k].data, t2[k].data) for k in t1)


def test_finetune_loss_decreases(demos):
    base = init_params(MC, seed=3)
    tc = TrainConfig(epochs=40, batch_size=8, warmup_epochs=4, seed=8)
    _, final_loss = finetune(base, demos, "full", MC, tc)
    _, first_loss = finetune(base, demos, "full", MC,
                             TrainConfig(epochs=1, batch_size=8,
                                         warmup_epochs=0, seed=8))
    assert final_loss < first_loss


def test_finetune_rejects_bad_demos(demos):
    base = init_params(MC)
    tc = TrainConfig(epochs=1, warmup_epochs=0)
    with pytest.raises(ConfigError):
        finetune(base, [], "full", MC, tc)
    failed = generate_trajectory("pick", 0)
    object.__setattr__(failed, "success", False)
    with pytest.raises(ConfigError, match="successful"):
        finetune(base, [failed], "full", MC, tc)


def test_finetune_masked_context_variant(demos):
    base = init_params(MC, seed=4)
    tc = TrainConfig(epochs=2, batch_size=4, warmup_epochs=0, seed=9,
                     masked_context=True)
    tuned, loss = finetune(base, demos, "probe", MC, tc)
    assert np.isfinite(loss)
    tuned2, loss2 = finetune(base, demos, "probe", MC, tc)
    assert loss == loss2


def test_train_from_scratch(demos):
    tc = TrainConfig(epochs=1, batch_size=4, warmup_epochs=0, seed=10)
    params, loss = train_from_scratch(demos, MC, tc)
    assert set(params) == set(init_params(MC))
    assert np.isfinite(loss)
    with pytest.raises(ConfigError):
        train_from_scratch([], MC, tc)


# -------------------------------------------------------------- overfit

def test_overfit_tiny_batch(demos):
    layout = MC.layout()
    windows = [sample_window(t, MC.context, make_rng("ov", i))
               for i, t in enumerate(demos[:4])]
    masks = np.stack([
        sample_mask_from_range(layout, "token", (0.7, 0.9),
                               make_rng("ovm", i)).mask_bool(layout.length)
        for i in range(4)])
    curve = overfit(windows, masks, MC, steps=1500, lr=2e-3, seed=0)
    assert min(curve) < 1e-3
    assert curve[-1] < curve[0]
