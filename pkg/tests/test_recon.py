import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostcs import double_slit_metrics
from ghostcs.forward import MeasurementSet, RealizationRecord
from ghostcs.optics import IntensityGrid
from ghostcs.recon import (
    ROI,
    DegenerateInputWarning,
    SensingSystem,
    SolverParams,
    assemble_sensing_system,
    bp_oracle_enumerate,
    centered_roi,
    cs_reconstruct,
    gi_covariance,
    gi_reconstruct,
    kkt_residual,
    lasso_fista,
    normalize_system,
)

from conftest import SLIT


def synthetic_set(frames, buckets, pitch=1e-6):
    recs = [RealizationRecord(IntensityGrid(f, pitch), float(b), i)
            for i, (f, b) in enumerate(zip(frames, buckets))]
    return MeasurementSet(None, recs)


def system_of(A, y):
    return SensingSystem(A, y, ROI(0, 0, 1, A.shape[1], 1.0))


def sparse_instance(seed, m, n, k, scale=1.0):
    r = np.random.default_rng(seed)
    A = r.standard_normal((m, n)) * scale
    x0 = np.zeros(n)
    x0[r.choice(n, k, replace=False)] = r.uniform(0.5, 2.0, k)
    return A, x0, A @ x0


# --- GI --------------------------------------------------------------------


def test_gi_constant_buckets_is_degenerate(rng):
    ms = synthetic_set(rng.exponential(size=(20, 4, 4)), np.full(20, 0.1))
    with pytest.warns(DegenerateInputWarning):
        res = gi_reconstruct(ms)
    assert res.solver_status == "degenerate"
    assert not res.estimate.any()
    assert not gi_covariance(ms.frames(), np.full(20, 3.0)).any()


def test_gi_needs_two_records(rng):
    with pytest.raises(ValueError):
        gi_reconstruct(synthetic_set(rng.random((1, 3, 3)), [1.0]))


def test_gi_exponential_oracle():
    # cov(I(x), B) = t^2(p) var(I) delta(x - p) with unit-mean exponential pixels
    r = np.random.default_rng(2024)
    m, p = 10_000, (3, 5)
    frames = r.exponential(1.0, size=(m, 8, 8))
    ms = synthetic_set(frames, frames[:, p[0], p[1]])
    res = gi_reconstruct(ms)
    assert np.unravel_index(np.argmax(res.estimate), res.estimate.shape) == p
    assert res.info["covariance_peak"] == pytest.approx(1.0, rel=0.1)
    off = np.delete(res.estimate.ravel(), p[0] * 8 + p[1])
    assert np.abs(off).max() < 0.1


def test_gi_streaming_matches_covariance(rng):
    frames = rng.exponential(size=(600, 5, 6))
    b = rng.random(600)
    res = gi_reconstruct(synthetic_set(frames, b))
    cov = gi_covariance(frames, b)
    np.testing.assert_allclose(res.estimate, cov / cov.max(), rtol=1e-12, atol=1e-14)


def test_gi_invariances(rng):
    frames = rng.exponential(size=(300, 6, 6))
    b = frames[:, 2, 2] + 0.5 * frames[:, 4, 1]
    base = gi_reconstruct(synthetic_set(frames, b)).estimate
    scaled = gi_reconstruct(synthetic_set(frames, 7.5 * b)).estimate
    np.testing.assert_allclose(scaled, base, rtol=1e-12, atol=1e-14)
    assert np.argmax(scaled) == np.argmax(base)
    perm = rng.permutation(300)
    permuted = gi_reconstruct(synthetic_set(frames[perm], b[perm])).estimate
    np.testing.assert_allclose(permuted, base, rtol=1e-12, atol=1e-14)


def test_gi_keeps_signed_values(rng):
    frames = rng.exponential(size=(400, 4, 4))
    b = frames[:, 0, 0] - 0.5 * frames[:, 3, 3] + 2.0
    res = gi_reconstruct(synthetic_set(frames, b))
    assert res.estimate.min() < 0
    assert res.to_grid().data.min() == 0


def test_gi_paper_layout_unresolved(paper_campaign):
    res = gi_reconstruct(paper_campaign)
    m = double_slit_metrics(res.to_grid(), SLIT["a"], SLIT["d"], SLIT["h"])
    assert m.midpoint_ratio > 0.8
    assert not m.resolved


# --- sensing system ---------------------------------------------------------


def test_assemble_paper_shape(paper_campaign):
    ms = paper_campaign.subset(m=32)
    roi = centered_roi(ms.frames().shape[1:], ms.frame_pitch, 64)
    sys_ = assemble_sensing_system(ms, roi)
    assert sys_.A.shape == (32, 4096)
    np.testing.assert_array_equal(sys_.y, ms.buckets())
    rs, cs = roi.slices()
    np.testing.assert_array_equal(sys_.A[7], ms.records[7].reference_frame.data[rs, cs].ravel())


def test_assemble_single_pixel(rng):
    ms = synthetic_set(rng.random((1, 5, 5)), [2.0])
    sys_ = assemble_sensing_system(ms, ROI(2, 3, 1, 1, 1e-6))
    assert sys_.A.shape == (1, 1)
    assert sys_.A[0, 0] == ms.records[0].reference_frame.data[2, 3]


def test_assemble_permutation(rng):
    frames, b = rng.random((6, 4, 4)), rng.random(6)
    roi = ROI(1, 0, 2, 3, 1e-6)
    a = assemble_sensing_system(synthetic_set(frames, b), roi)
    perm = rng.permutation(6)
    p = assemble_sensing_system(synthetic_set(frames[perm], b[perm]), roi)
    np.testing.assert_array_equal(p.A, a.A[perm])
    np.testing.assert_array_equal(p.y, a.y[perm])


def test_assemble_rejects_bad_roi(rng):
    ms = synthetic_set(rng.random((3, 4, 4)), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        assemble_sensing_system(ms, ROI(0, 0, 0, 2, 1e-6))
    with pytest.raises(ValueError):
        assemble_sensing_system(ms, ROI(2, 2, 3, 3, 1e-6))
    with pytest.raises(ValueError):
        assemble_sensing_system(ms, ROI(0, 0, 2, 2, 2e-6))


def test_centered_roi():
    roi = centered_roi((96, 96), 3e-6, 64)
    assert (roi.row0, roi.col0, roi.nrows, roi.ncols) == (16, 16, 64, 64)
    odd = centered_roi((48, 48), 18e-6, 11)
    assert odd.nrows % 2 == 0 and odd.row0 * 2 + odd.nrows == 48


def test_normalize_modes(rng):
    A = rng.random((10, 20)) + 0.1
    y = rng.random(10)
    s = system_of(A, y)
    none = normalize_system(s, "none")
    np.testing.assert_array_equal(none.A, A)
    col = normalize_system(s, "column_unit")
    np.testing.assert_allclose(np.linalg.norm(col.A, axis=0), 1.0, rtol=1e-12)
    row = normalize_system(s, "row_mean")
    np.testing.assert_allclose(row.A.mean(axis=1), 1.0, rtol=1e-12)
    for scaled in (col, row):
        orig = scaled.original()
        np.testing.assert_allclose(orig.A, A, rtol=1e-12)
        np.testing.assert_allclose(orig.y, y, rtol=1e-12)
    with pytest.raises(ValueError):
        normalize_system(s, "bogus")
    zero_col = A.copy()
    zero_col[:, 3] = 0
    with pytest.raises(ValueError):
        normalize_system(system_of(zero_col, y), "column_unit")
    zero_row = A.copy()
    zero_row[2] = 0
    with pytest.raises(ValueError):
        normalize_system(system_of(zero_row, y), "row_mean")


@pytest.mark.parametrize("mode", ["row_mean", "column_unit"])
def test_normalized_solution_matches_original(mode):
    r = np.random.default_rng(10)
    A = r.random((10, 20)) + 0.05
    x0 = np.zeros(20)
    x0[[3, 11]] = [1.0, 0.7]
    s = system_of(A, A @ x0)
    params = SolverParams(epsilon=0.0)
    plain = cs_reconstruct(s, params).estimate.ravel()
    scaled = cs_reconstruct(s, SolverParams(epsilon=0.0, normalize=mode)).estimate.ravel()
    np.testing.assert_allclose(scaled, plain, atol=1e-4)


# --- CS --------------------------------------------------------------------


def test_cs_identity_system():
    x0 = np.abs(np.random.default_rng(1).standard_normal(12))
    res = cs_reconstruct(system_of(np.eye(12), x0), SolverParams(epsilon=0.0))
    np.testing.assert_allclose(res.estimate.ravel(), x0, atol=1e-8)
    assert res.solver_status == "converged"


def test_cs_matches_enumeration_on_3_sparse():
    r = np.random.default_rng(77)
    A = r.choice([-1.0, 1.0], size=(20, 50)) / np.sqrt(20)
    x0 = np.zeros(50)
    support = [4, 17, 38]
    x0[support] = [1.0, 0.6, 1.4]
    y = A @ x0
    oracle = bp_oracle_enumerate(A, y, 3, nonneg=True)
    np.testing.assert_allclose(oracle, x0, atol=1e-10)
    res = cs_reconstruct(system_of(A, y), SolverParams(epsilon=0.0))
    est = res.estimate.ravel()
    assert set(np.flatnonzero(est > 1e-4)) == set(support)
    np.testing.assert_allclose(est, oracle, atol=1e-4)


def test_cs_homogeneity():
    A, x0, y = sparse_instance(3, 15, 40, 2)
    A = np.abs(A)
    y = A @ x0
    base = cs_reconstruct(system_of(A, y), SolverParams(epsilon=0.0)).estimate
    scaled = cs_reconstruct(system_of(3.7 * A, 3.7 * y), SolverParams(epsilon=0.0)).estimate
    np.testing.assert_allclose(scaled, base, atol=1e-6)


def test_cs_default_epsilon_meets_residual():
    A, x0, y = sparse_instance(8, 25, 60, 3)
    res = cs_reconstruct(system_of(A, y))
    assert res.final_residual <= 0.02 * np.linalg.norm(y) * (1 + 1e-6)
    assert res.info["epsilon"] == pytest.approx(0.02 * np.linalg.norm(y), rel=1e-12)


def test_cs_reports_infeasible():
    # nonnegative x cannot reach negative observations
    A = np.abs(np.random.default_rng(4).standard_normal((6, 10)))
    y = -np.ones(6)
    res = cs_reconstruct(system_of(A, y), SolverParams(epsilon=0.01))
    assert res.solver_status == "infeasible"


def test_cs_reports_max_iters():
    A, x0, y = sparse_instance(5, 15, 40, 3)
    res = cs_reconstruct(system_of(A, y), SolverParams(epsilon=0.0, max_iter=1, n_stages=1,
                                                       obj_rtol=0.0))
    assert res.solver_status == "max_iters"


def test_cs_rejects_nonfinite():
    A = np.ones((3, 4))
    A[1, 2] = np.nan
    with pytest.raises(ValueError):
        cs_reconstruct(system_of(A, np.ones(3)))


def test_solver_params_validation():
    with pytest.raises(ValueError):
        SolverParams(epsilon=-1.0)
    with pytest.raises(ValueError):
        SolverParams(max_iter=0)
    with pytest.raises(ValueError):
        SolverParams(lambda_ratio=2.0)


# --- LASSO engine ----------------------------------------------------------


def test_lasso_kill_condition(rng):
    A = rng.standard_normal((10, 30))
    y = rng.standard_normal(10)
    lam = np.abs(A.T @ y).max()
    res = lasso_fista(A, y, lam)
    assert not res.x.any()


def test_lasso_zero_penalty_orthonormal_rows(rng):
    q, _ = np.linalg.qr(rng.standard_normal((40, 12)))
    A = q.T  # orthonormal rows
    y = rng.standard_normal(12)
    res = lasso_fista(A, y, 0.0, tol=1e-14, max_iter=20000)
    np.testing.assert_allclose(res.x, A.T @ y, atol=1e-10)


@pytest.mark.parametrize("nonneg", [False, True])
def test_lasso_kkt(nonneg):
    r = np.random.default_rng(30)
    A = r.standard_normal((30, 60))
    y = r.standard_normal(30)
    res = lasso_fista(A, y, 0.1, nonneg=nonneg, max_iter=100000)
    assert res.status == "converged"
    assert kkt_residual(A, y, res.x, 0.1, nonneg) < 1e-6
    if nonneg:
        assert res.x.min() >= 0


def test_lasso_restart_objectives_non_increasing():
    r = np.random.default_rng(31)
    A = r.standard_normal((40, 80))
    y = r.standard_normal(40)
    res = lasso_fista(A, y, 0.05, max_iter=3000)
    assert np.all(np.diff(res.restart_objectives) <= 1e-12 * abs(res.restart_objectives[0]))
    assert np.all(np.diff(res.objective_trace) <= 1e-12 * abs(res.objective_trace[0]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0.02, 1.0))
def test_lasso_kkt_property(seed, lam):
    r = np.random.default_rng(seed)
    A = r.standard_normal((12, 25))
    y = r.standard_normal(12)
    res = lasso_fista(A, y, lam, max_iter=20000)
    if res.status == "converged":
        assert kkt_residual(A, y, res.x, lam) < 1e-6


def test_lasso_rejects_negative_lambda(rng):
    with pytest.raises(ValueError):
        lasso_fista(np.eye(3), np.ones(3), -1.0)


# --- enumeration oracle ----------------------------------------------------


def test_oracle_zero_observations():
    assert not bp_oracle_enumerate(np.ones((3, 5)), np.zeros(3), 2).any()


def test_oracle_invertible_square(rng):
    A = rng.standard_normal((4, 4)) + 4 * np.eye(4)
    y = rng.standard_normal(4)
    np.testing.assert_allclose(bp_oracle_enumerate(A, y, 4), np.linalg.solve(A, y), atol=1e-10)


def test_oracle_guard():
    with pytest.raises(ValueError, match="guard"):
        bp_oracle_enumerate(np.ones((2, 61)), np.ones(2), 2)
    with pytest.raises(ValueError, match="guard"):
        bp_oracle_enumerate(np.ones((2, 10)), np.ones(2), 5)
