import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chainimpute.baselines import (barycenter_impute, dba_barycenter, dtw, knn_impute, mean_impute,
                                   mice_fit, mice_impute)
from chainimpute.data import MaskedRecording, Recording, compute_distance_matrix, grid_coords
from chainimpute.errors import ValidationError

from oracles import brute_dtw


def masked(values, missing, coords=None):
    values = np.asarray(values, dtype=float)
    if coords is None:
        coords = grid_coords(4, len(values))
    return MaskedRecording.from_recording(Recording(values, coords), np.asarray(missing, dtype=bool))


# ---------------------------------------------------------------- kNN

def test_knn_k1_copies_nearest():
    coords = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]], dtype=float)
    m = masked([[1.0, 2.0], [0.0, 0.0], [5.0, 6.0]], [0, 1, 0], coords)
    out = knn_impute(m, compute_distance_matrix(coords), k=1)
    assert out[1].tolist() == [1.0, 2.0]


def test_knn_hand_geometry():
    coords = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3], [5, 5, 5]], dtype=float)
    vals = [[0, 0], [1, 10], [2, 20], [3, 30], [4, 40]]
    m = masked(vals, [1, 0, 0, 0, 0], coords)
    out = knn_impute(m, compute_distance_matrix(coords))
    assert out[0].tolist() == [2.0, 20.0]   # voxels 1, 2, 3


def test_knn_ties_go_to_lower_index():
    coords = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]], dtype=float)
    m = masked([[0, 0], [1, 1], [2, 2], [4, 4]], [1, 0, 0, 0], coords)
    out = knn_impute(m, compute_distance_matrix(coords), k=2)
    assert out[0].tolist() == [1.5, 1.5]


def test_knn_matches_sorting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        V = 12
        coords = grid_coords(3)[rng.permutation(27)[:V]]
        d = compute_distance_matrix(coords)
        missing = rng.random(V) < 0.4
        missing[0] = False
        m = masked(rng.standard_normal((V, 4)), missing, coords)
        out = knn_impute(m, d)
        obs = [u for u in range(V) if not missing[u]]
        for v in np.flatnonzero(missing):
            nearest = sorted(obs, key=lambda u: (d.entries[v, u], u))[:3]
            assert np.allclose(out[v], m.values[nearest].mean(axis=0), atol=1e-14)
        assert out[~missing].tobytes() == m.values[~missing].tobytes()


def test_knn_uses_all_when_fewer_than_k():
    coords = grid_coords(2, 3)
    m = masked([[0.0], [2.0], [4.0]], [1, 0, 1], coords)
    out = knn_impute(m, compute_distance_matrix(coords), k=3)
    assert out[0, 0] == 2.0 and out[2, 0] == 2.0


# ---------------------------------------------------------------- DTW

def test_dtw_identical_sequences():
    r = dtw([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.cost == 0.0
    assert r.path == [(0, 0), (1, 1), (2, 2)]


def test_dtw_worked_alignment():
    r = dtw([0, 0, 1], [0, 1])
    assert r.cost == 0.0
    assert r.path == [(0, 0), (1, 0), (2, 1)]


def test_dtw_rejects_empty():
    with pytest.raises(ValidationError):
        dtw([], [1.0])


def test_dtw_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(40):
        a = rng.standard_normal(rng.integers(1, 6))
        b = rng.standard_normal(rng.integers(1, 6))
        assert dtw(a, b).cost == pytest.approx(brute_dtw(a, b), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6),
       st.lists(st.floats(-10, 10), min_size=1, max_size=6))
def test_dtw_path_invariants(a, b):
    r = dtw(a, b)
    path = r.path
    assert path[0] == (0, 0) and path[-1] == (len(a) - 1, len(b) - 1)
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}
    assert r.cost == pytest.approx(sum(abs(a[i] - b[j]) for i, j in path), abs=1e-9)
    assert r.cost == pytest.approx(dtw(b, a).cost, abs=1e-9)


def test_dtw_zero_iff_equal_for_generic_sequences():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = rng.standard_normal(4)
        b = rng.standard_normal(4)
        assert dtw(a, b).cost > 0
        assert dtw(a, a).cost == 0


def test_dtw_zero_cost_with_repeated_values():
    # warping absorbs repeats, so zero cost does not imply equality in general
    assert dtw([0, 0, 1], [0, 1, 1]).cost == 0


# ---------------------------------------------------------------- DBA

def test_dba_fixed_points():
    s = np.array([1.0, 3.0, 2.0, 5.0])
    assert np.allclose(dba_barycenter([s]), s)
    assert np.allclose(dba_barycenter([s, s]), s)


def test_dba_cost_non_increasing():
    rng = np.random.default_rng(4)
    for _ in range(20):
        series = rng.standard_normal((5, 8)).cumsum(axis=1)
        center, trace = dba_barycenter(series, iters=10, return_trace=True)
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert sum(dtw(center, s).cost for s in series) == pytest.approx(trace[-1], abs=1e-9)
        assert trace[-1] <= sum(dtw(series.mean(axis=0), s).cost for s in series) + 1e-12


def test_barycenter_impute_cases():
    s = [1.0, 2.0, 0.5]
    out = barycenter_impute(masked([s, s, [0, 0, 0], s], [0, 0, 1, 0]))
    assert np.allclose(out[2], s)
    rng = np.random.default_rng(5)
    vals = rng.standard_normal((6, 5))
    missing = [1, 0, 1, 0, 1, 0]
    m = masked(vals, missing)
    out = barycenter_impute(m)
    assert np.array_equal(out[0], out[2]) and np.array_equal(out[2], out[4])
    assert np.allclose(out[0], dba_barycenter(vals[[1, 3, 5]]))
    assert out[[1, 3, 5]].tobytes() == m.values[[1, 3, 5]].tobytes()


# ---------------------------------------------------------------- MICE

def linear_train(rng, n=6, T=20):
    base = rng.standard_normal((n, 2, T))
    vals = [np.vstack([b, 2 * b[0] - 3 * b[1] + 1, rng.standard_normal(T)]) for b in base]
    coords = grid_coords(2, 4)
    return [Recording(v, coords) for v in vals]


def test_mice_recovers_exact_linear_voxel():
    rng = np.random.default_rng(6)
    train = linear_train(rng)
    model = mice_fit(train)
    test = linear_train(rng, n=1)[0]
    m = MaskedRecording.from_recording(test, np.array([False, False, True, False]))
    out = mice_impute(model, m)
    assert np.allclose(out[2], test.values[2], atol=1e-8)


def test_mice_identity_on_complete_input():
    rng = np.random.default_rng(7)
    train = linear_train(rng)
    model = mice_fit(train)
    m = MaskedRecording.from_recording(train[0], np.zeros(4, dtype=bool))
    assert np.array_equal(mice_impute(model, m), train[0].values)


def test_mice_two_voxel_regression_line():
    rng = np.random.default_rng(8)
    x = rng.standard_normal(200)
    y = 0.7 * x + 0.3 * rng.standard_normal(200) + 2.0
    model = mice_fit([Recording(np.vstack([x, y]), grid_coords(2, 2))])
    slope, intercept = np.polyfit(x, y, 1)
    m = masked([[0.5, -1.0], [0.0, 0.0]], [0, 1], grid_coords(2, 2))
    out = mice_impute(model, m)
    assert np.allclose(out[1], slope * np.array([0.5, -1.0]) + intercept, atol=1e-8)


def test_mice_warns_when_underdetermined(caplog):
    rng = np.random.default_rng(9)
    rec = Recording(rng.standard_normal((6, 3)), grid_coords(2, 6))
    with caplog.at_level(logging.WARNING):
        model = mice_fit([rec])
    assert "ridge" in caplog.text
    assert np.all(np.isfinite(model.coef))


# ---------------------------------------------------------------- mean

def test_mean_impute_cases():
    coords = grid_coords(2, 3)
    d = compute_distance_matrix(coords)
    m = masked([[1.0, 2.0], [0.0, 0.0], [3.0, 4.0]], [0, 1, 0], coords)
    assert mean_impute(np.zeros(3), m, d)[1].tolist() == [0.0, 0.0]
    assert mean_impute(np.array([0.0, 7.0, 0.0]), m, d)[1].tolist() == [7.0, 7.0]
    fallback = mean_impute(np.array([0.0, np.nan, 0.0]), m, d)
    assert np.array_equal(fallback, knn_impute(m, d))


def test_mean_impute_shape_check():
    m = masked([[1.0], [0.0]], [0, 1], grid_coords(2, 2))
    with pytest.raises(ValidationError):
        mean_impute(np.zeros(3), m, compute_distance_matrix(m.coords))


def test_all_baselines_pass_observed_through():
    rng = np.random.default_rng(10)
    V = 8
    coords = grid_coords(2)
    d = compute_distance_matrix(coords)
    train = [Recording(rng.standard_normal((V, 10)), coords) for _ in range(3)]
    m = masked(rng.standard_normal((V, 10)), [1, 0, 0, 1, 0, 1, 0, 0], coords)
    outs = [knn_impute(m, d), barycenter_impute(m), mice_impute(mice_fit(train), m),
            mean_impute(np.zeros(V), m, d)]
    obs = ~m.missing_voxels
    for out in outs:
        assert not np.isnan(out).any()
        assert out[obs].tobytes() == m.values[obs].tobytes()
