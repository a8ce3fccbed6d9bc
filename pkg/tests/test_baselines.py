from datetime import datetime

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from urbanfill import baselines
from urbanfill.data import GridSeries
from urbanfill.errors import ImputerError, ParameterError


def brute_force_nearest(block, mask, dims):
    """Exhaustive search in raster order; first minimum wins."""
    out = block.astype(np.float32).copy()
    T, H, W = block.shape
    for t, r, c in np.argwhere(mask == 0):
        best, best_d = None, None
        frames = [t] if dims == 2 else range(T)
        for tt in frames:
            for rr in range(H):
                for cc in range(W):
                    if mask[tt, rr, cc]:
                        d = (r - rr) ** 2 + (c - cc) ** 2 + (t - tt) ** 2
                        if best_d is None or d < best_d:
                            best, best_d = block[tt, rr, cc], d
        out[t, r, c] = best
    return out


def _series(frames, start=datetime(2016, 1, 1)):
    return GridSeries(np.asarray(frames, np.float32), start, 1)


def test_global_mean_hand_example():
    frames = np.zeros((48, 2, 2), np.float32)
    frames[8, 0, 1] = 2
    frames[32, 0, 1] = 4
    table = baselines.fit_global_mean(_series(frames))
    assert table.means[8, 0, 1] == 3
    img = np.full((2, 2), 9, np.float32)
    mask = np.array([[1, 0], [1, 1]])
    out = baselines.predict_global_mean(table, img, mask, 8)
    assert out.tolist() == [[9, 3], [9, 9]]


def test_global_mean_silent_pixel_is_zero():
    frames = np.zeros((48, 2, 2), np.float32)
    frames[:, 0, 0] = 5
    table = baselines.fit_global_mean(_series(frames))
    assert np.all(table.means[:, 1, 1] == 0)
    assert table.counts.tolist() == [2] * 24


def test_global_mean_counts_partial_days():
    s = GridSeries(np.ones((26, 2, 2), np.float32), datetime(2016, 1, 1, 5), 1)
    table = baselines.fit_global_mean(s)
    assert table.counts[5] == 2 and table.counts[6] == 2 and table.counts[7] == 1


def test_global_mean_constant_series():
    table = baselines.fit_global_mean(_series(np.full((72, 3, 3), 4.25)))
    out = baselines.predict_global_mean(table, np.zeros((24, 3, 3)), np.zeros((24, 3, 3)), np.arange(24))
    assert np.all(out == 4.25)


def test_global_mean_two_pass_exact():
    rng = np.random.default_rng(0)
    frames = rng.poisson(3.3, (24 * 5 + 7, 4, 4)).astype(np.float32)
    s = _series(frames, datetime(2016, 1, 1, 13))
    table = baselines.fit_global_mean(s)
    hours = s.hours_of_day()
    for h in range(24):
        total = np.zeros((4, 4))
        count = 0
        for k in range(len(frames)):
            if hours[k] == h:
                total += frames[k]
                count += 1
        assert np.array_equal(table.means[h], total / count)


def test_global_mean_errors():
    table = baselines.fit_global_mean(_series(np.ones((24, 2, 2))))
    with pytest.raises(ParameterError):
        baselines.predict_global_mean(table, np.ones((2, 2)), np.ones((2, 2)), 24)
    with pytest.raises(ParameterError):
        baselines.fit_global_mean(_series(np.ones((23, 2, 2))))


def test_mean_table_persistence(tmp_path):
    table = baselines.fit_global_mean(_series(np.arange(24 * 4, dtype=np.float32).reshape(24, 2, 2)))
    table.save(tmp_path / "t.ugb")
    back = baselines.MeanTable.load(tmp_path / "t.ugb")
    assert np.array_equal(back.means, table.means.astype(np.float32))


def test_nn_examples():
    block = np.zeros((1, 3, 3), np.float32)
    mask = np.zeros((1, 3, 3), np.uint8)
    block[0, 1, 2], mask[0, 1, 2] = 7, 1
    assert baselines.nn_impute(block, mask, 2)[0, 1, 1] == 7
    block = np.zeros((1, 3, 3), np.float32)
    mask = np.zeros((1, 3, 3), np.uint8)
    block[0, 0, 1], mask[0, 0, 1] = 3, 1
    block[0, 2, 1], mask[0, 2, 1] = 9, 1
    assert baselines.nn_impute(block, mask, 2)[0, 1, 1] == 3


def test_nn_2d_vs_3d_temporal_neighbour():
    block = np.zeros((2, 5, 5), np.float32)
    mask = np.ones((2, 5, 5), np.uint8)
    mask[0, 1:4, 1:4] = 0
    block[1, 2, 2] = 42
    block[0, 0, :] = 1
    block[0, 4, :] = 2
    two = baselines.nn_impute(block, mask, 2)
    three = baselines.nn_impute(block, mask, 3)
    assert three[0, 2, 2] == 42 and two[0, 2, 2] in (0, 1, 2)


@given(st.integers(0, 2 ** 31))
def test_nn_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    block = rng.integers(0, 50, (3, 8, 8)).astype(np.float32)
    mask = (rng.random((3, 8, 8)) > rng.random()).astype(np.uint8)
    for t in range(3):
        if not mask[t].any():
            mask[t, rng.integers(8), rng.integers(8)] = 1
    for dims in (2, 3):
        assert np.array_equal(baselines.nn_impute(block, mask, dims), brute_force_nearest(block, mask, dims))


def test_nn_errors():
    with pytest.raises(ImputerError):
        baselines.nn_impute(np.ones((1, 2, 2)), np.zeros((1, 2, 2)), 2)
    with pytest.raises(ParameterError):
        baselines.nn_impute(np.ones((1, 2, 2)), np.ones((1, 2, 2)), 4)


@given(st.integers(0, 2 ** 31), st.sampled_from([2, 3]))
def test_baselines_leave_valid_voxels(seed, dims):
    rng = np.random.default_rng(seed)
    block = rng.random((2, 10, 10)).astype(np.float32) * 10
    mask = (rng.random((2, 10, 10)) > 0.3).astype(np.uint8)
    mask[:, 0, 0] = 1
    v = mask.astype(bool)
    for out in (baselines.nn_impute(block, mask, dims),
                baselines.rbf_impute(block, mask, dims, baselines.RbfConfig(sample_count=40, seed=seed))):
        assert out[v].tobytes() == block[v].tobytes()


def test_rbf_constant_field():
    block = np.full((2, 16, 16), 3.25, np.float32)
    mask = np.ones((2, 16, 16), np.uint8)
    mask[:, 4:12, 5:9] = 0
    for dims in (2, 3):
        out = baselines.rbf_impute(block, mask, dims, baselines.RbfConfig(sample_count=60))
        assert np.max(np.abs(out - 3.25)) < 1e-5


def test_rbf_linear_field():
    t, r, c = np.mgrid[0:3, 0:20, 0:20].astype(np.float64)
    field = 0.5 * r - 0.25 * c + 0.75 * t + 4.0
    mask = np.ones((3, 20, 20), np.uint8)
    mask[:, 5:15, 6:13] = 0
    for dims in (2, 3):
        out = baselines.rbf_impute(field.astype(np.float32), mask, dims, baselines.RbfConfig(sample_count=80, seed=1))
        hole = mask == 0
        assert np.max(np.abs(out[hole] - field[hole].astype(np.float32))) < 1e-5


def test_tps_interpolates_samples():
    rng = np.random.default_rng(5)
    pts = rng.random((50, 2)) * 10
    vals = np.sin(pts[:, 0]) + pts[:, 1] ** 2
    spline = baselines.ThinPlateSpline(pts, vals, 1e-8)
    assert np.max(np.abs(spline(pts) - vals)) < 1e-6


def test_rbf_needs_enough_samples():
    block = np.ones((1, 3, 3), np.float32)
    mask = np.zeros((1, 3, 3), np.uint8)
    mask[0, 0, 0] = mask[0, 0, 1] = 1
    with pytest.raises(ImputerError):
        baselines.rbf_impute(block, mask, 2)


def test_rbf_seeded():
    rng = np.random.default_rng(2)
    block = rng.random((1, 30, 30)).astype(np.float32)
    mask = (rng.random((1, 30, 30)) > 0.2).astype(np.uint8)
    cfg = baselines.RbfConfig(sample_count=100, seed=4)
    assert baselines.rbf_impute(block, mask, 2, cfg).tobytes() == baselines.rbf_impute(block, mask, 2, cfg).tobytes()
