"""Trajectory generation, dataset round-trips, window sampling."""

import numpy as np
import pytest
from scipy import stats

from smpt.data import (
    ContextWindow,
    Trajectory,
    generate_dataset,
    generate_trajectory,
    read_dataset,
    sample_window,
    window_at,
    write_dataset,
)
from smpt.errors import FormatError
from smpt.utils import make_rng


def test_generation_is_deterministic():
    a = generate_trajectory("pick", 7)
    b = generate_trajectory("pick", 7)
    assert a.success == b.success and len(a) == len(b)
    assert np.array_equal(a.views, b.views)
    assert np.array_equal(a.proprio, b.proprio)
    assert np.array_equal(a.actions, b.actions)


def test_dimensions_and_dtypes():
    tr = generate_trajectory("stack", 3)
    assert tr.views.ndim == 3 and tr.views.shape[1:] == (3, 64)
    assert tr.proprio.shape[1] == 4 and tr.actions.shape[1] == 4
    for arr in (tr.views, tr.proprio, tr.actions):
        assert arr.dtype == np.float32
    rec = tr.step(0)
    assert rec.views.shape == (3, 64)


def test_pick_success_rate_and_stack_longer():
    picks = [generate_trajectory("pick", s) for s in range(40)]
    stacks = [generate_trajectory("stack", s) for s in range(10)]
    assert np.mean([t.success for t in picks]) >= 0.95
    assert np.mean([len(t) for t in stacks]) > np.mean([len(t) for t in picks])


def test_generate_dataset_count_and_mixture():
    trajs = generate_dataset("bin_pick", 20, base_seed=0)
    assert len(trajs) == 20
    flags = {t.success for t in trajs}
    assert flags == {True, False}  # failed grasps retained


# ------------------------------------------------------------ file io

def test_round_trip_field_exact(tmp_path):
    trajs = [generate_trajectory(t, s) for t in ("pick", "stack") for s in range(5)]
    path = tmp_path / "data.rptd"
    write_dataset(trajs, path)
    back = read_dataset(path)
    assert len(back) == len(trajs)
    for a, b in zip(trajs, back):
        assert a.task == b.task and a.seed == b.seed and a.success == b.success
        assert np.array_equal(a.views, b.views)
        assert np.array_equal(a.proprio, b.proprio)
        assert np.array_equal(a.actions, b.actions)


def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "empty.rptd"
    write_dataset([], path)
    assert read_dataset(path) == []


def test_header_bytes_are_little_endian(tmp_path):
    path = tmp_path / "hdr.rptd"
    write_dataset([generate_trajectory("pick", 0)], path)
    raw = path.read_bytes()
    assert raw[:4] == b"RPTD"
    import struct
    version, j, d_v, d_p, d_a, count = struct.unpack_from("<6I", raw, 4)
    assert (version, j, d_v, d_p, d_a, count) == (1, 3, 64, 4, 4, 1)


def test_corrupt_magic_rejected(tmp_path):
    path = tmp_path / "bad.rptd"
    write_dataset([generate_trajectory("pick", 0)], path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_dataset(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "trunc.rptd"
    write_dataset([generate_trajectory("pick", 0)], path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError, match="truncated"):
        read_dataset(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "trail.rptd"
    write_dataset([generate_trajectory("pick", 0)], path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(FormatError, match="trailing"):
        read_dataset(path)


def test_dimension_mismatch_across_trajectories_rejected(tmp_path):
    a = generate_trajectory("pick", 0)
    b = Trajectory(task="pick", seed=1, success=True,
                   views=np.zeros((4, 3, 32), dtype=np.float32),
                   proprio=np.zeros((4, 4), dtype=np.float32),
                   actions=np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(FormatError, match="dimension"):
        write_dataset([a, b], tmp_path / "mix.rptd")


def test_empty_trajectory_rejected_at_construction():
    with pytest.raises(FormatError, match="empty"):
        Trajectory(task="pick", seed=0, success=False,
                   views=np.zeros((0, 3, 64), dtype=np.float32),
                   proprio=np.zeros((0, 4), dtype=np.float32),
                   actions=np.zeros((0, 4), dtype=np.float32))


# ------------------------------------------------------------ windows

def test_full_length_window_is_whole_trajectory():
    tr = generate_trajectory("pick", 1)
    w = sample_window(tr, len(tr), make_rng("w", 0))
    assert w.offset == 0 and len(w) == len(tr)
    assert np.array_equal(w.views, tr.views)


def test_single_step_window():
    tr = generate_trajectory("pick", 1)
    w = sample_window(tr, 1, make_rng("w", 1))
    assert len(w) == 1
    assert np.array_equal(w.proprio[0], tr.proprio[w.offset])


def test_window_longer_than_trajectory_rejected():
    tr = generate_trajectory("pick", 1)
    with pytest.raises(FormatError):
        sample_window(tr, len(tr) + 1, make_rng("w", 2))


def test_window_at_bounds():
    tr = generate_trajectory("pick", 1)
    w = window_at(tr, 2, 4)
    assert w.offset == 2 and len(w) == 4
    with pytest.raises(FormatError):
        window_at(tr, len(tr) - 1, 2)


def test_offsets_uniform_chi_squared():
    tr = generate_trajectory("pick", 5)
    T = len(tr) - 9  # 10 possible offsets
    m = len(tr) - T + 1
    rng = make_rng("w", "chi2")
    counts = np.zeros(m)
    n = 10_000
    for _ in range(n):
        counts[sample_window(tr, T, rng).offset] += 1
    expected = n / m
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    crit = stats.chi2.ppf(0.999, df=m - 1)
    assert chi2 < crit, (chi2, crit)


def test_windows_are_contiguous_slices():
    tr = generate_trajectory("stack", 2)
    rng = make_rng("w", "contig")
    for _ in range(20):
        w = sample_window(tr, 8, rng)
        assert isinstance(w, ContextWindow)
        assert np.array_equal(w.actions, tr.actions[w.offset:w.offset + 8])
