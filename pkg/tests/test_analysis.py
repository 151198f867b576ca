import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from podiff.analysis import (NonConvergenceError, PairCache, SingularJacobianError,
                             build_local_dataset, cor1_shift, deviation, epsilon_percentile,
                             numerical_rank, pairwise_jacobian_distances, predict_shift,
                             rank_deviation_study, relative_error, rerun_shift, spearman,
                             surrogate_residual, unique_pairs)
from podiff.denoiser import ModelDenoiser, init_model
from podiff.env import InconsistentHistoryError, OracleDenoiser
from podiff.flow import FlowConfig, run_flow

from conftest import cond_of

E = np.eye(4)


# -- oracles -----------------------------------------------------------------


def elimination_rank(M) -> int:
    """Exact rank of a rational matrix by fraction-arithmetic row reduction."""
    A = [[Fraction(x) for x in row] for row in np.asarray(M).tolist()]
    rank, cols = 0, len(A[0]) if A else 0
    for c in range(cols):
        piv = next((r for r in range(rank, len(A)) if A[r][c] != 0), None)
        if piv is None:
            continue
        A[rank], A[piv] = A[piv], A[rank]
        for r in range(len(A)):
            if r != rank and A[r][c] != 0:
                f = A[r][c] / A[rank][c]
                A[r] = [a - f * b for a, b in zip(A[r], A[rank])]
        rank += 1
    return rank


def lstsq_residual(T, S):
    """Population residual of the best affine fit S ~ T via the normal equations."""
    X = np.hstack([np.ones((len(T), 1)), T])
    B = np.linalg.solve(X.T @ X, X.T @ S)
    return float(np.sum((S - X @ B) ** 2) / len(T))


def brute_spearman(x, y):
    def ranks(v):
        # average rank over ties, 1-based
        return np.array([np.sum(v < a) + (np.sum(v == a) + 1) / 2 for a in v])
    rx, ry = ranks(np.asarray(x, float)), ranks(np.asarray(y, float))
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)))


class SmoothDenoiser:
    """f(tau, y) = c + 0.5 tanh(A y + B tau), a smooth contraction with exact Jacobians."""

    def __init__(self, d, k, seed=0):
        rng = np.random.default_rng(seed)
        self.A = rng.standard_normal((d, d)) / np.sqrt(d)
        self.B = rng.standard_normal((d, k))
        self.c = rng.standard_normal(d)

    def __call__(self, tau, y):
        y = np.asarray(y, float)
        return self.c + 0.5 * np.tanh(y @ self.A.T + self.B @ tau)

    def jacobians(self, tau, y):
        g = 0.5 / np.cosh(self.A @ y + self.B @ tau) ** 2
        return type("R", (), {"jac_y": g[:, None] * self.A, "jac_tau": g[:, None] * self.B})()


def affine_model(W_y, W_tau, b):
    m = init_model(W_tau.shape[1], W_y.shape[1], 8, 0, rng=0, dtype=np.float64)
    m.W_y, m.W_tau, m.b0 = np.array(W_y, float), np.array(W_tau, float), np.array(b, float)
    return m


# -- numerical_rank ----------------------------------------------------------


def test_rank_examples():
    assert numerical_rank(np.zeros((3, 5))) == 0
    assert numerical_rank(np.eye(6)) == 6
    assert numerical_rank(np.zeros((0, 3))) == 0
    assert numerical_rank(np.diag([1.0, 1e-2, 1e-4])) == 2
    with pytest.raises(ValueError):
        numerical_rank(np.array([[np.nan]]))


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_rank_matches_elimination(seed, k):
    rng = np.random.default_rng(seed)
    M = sum(np.outer(rng.integers(-5, 6, 5), rng.integers(-5, 6, 6)) for _ in range(k))
    assert numerical_rank(M) == elimination_rank(M)


def test_two_rank_one_terms():
    rng = np.random.default_rng(3)
    M = np.outer(rng.integers(1, 9, 4), rng.integers(1, 9, 5)) \
        + np.outer(rng.integers(-9, 0, 4), rng.integers(1, 9, 5))
    assert numerical_rank(M) == elimination_rank(M) == 2


@given(st.integers(0, 10_000), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_rank_orthogonal_invariance(seed, k):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((5, k)) @ rng.standard_normal((k, 5))
    Q1, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    Q2, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    assert numerical_rank(Q1 @ M @ Q2.T) == numerical_rank(M) <= k


# -- deviation ---------------------------------------------------------------


def test_oracle_support_states_have_zero_deviation(co22):
    o = OracleDenoiser(co22)
    for agent in range(4):
        for obs in itertools.product([0.0, 1.0], repeat=2):
            c = cond_of(co22, agent, obs)
            try:
                post = o.posterior(c)
            except InconsistentHistoryError:
                continue
            for s in post.support:
                rec = deviation(o, c, s)
                assert rec.deviation <= 1e-6 and rec.lambda_max_abs < 1


def test_deviation_matches_rerun(trained22):
    spec, fn = trained22.spec, trained22.fn
    c = cond_of(spec, 2, [0, 0])
    for s in E[[0, 3]]:
        rec = deviation(fn, c, s)
        tr = run_flow(fn, c, s, FlowConfig())
        assert rec.deviation == np.linalg.norm(s - tr.attractor) >= 0
        assert np.array_equal(rec.attractor, tr.attractor)


def test_trained_deviations_are_small(trained22):
    ds = trained22.dataset
    _, _, S = ds.arrays()
    taus, states = unique_pairs(ds.conditions(), S)
    devs = [deviation(trained22.fn, t, s).deviation for t, s in zip(taus, states)]
    assert max(devs) < 0.05 and max(devs) < np.sqrt(2) / 6


def test_nonconvergence_carries_trace():
    def rotate(tau, y):
        return np.array([-y[1], y[0]])
    with pytest.raises(NonConvergenceError) as err:
        deviation(rotate, np.zeros(1), np.array([1.0, 0.0]), FlowConfig(max_iters=4))
    assert err.value.trace is not None and err.value.trace.iterations == 4


# -- shift prediction --------------------------------------------------------


def test_zero_shift_cases(co22, trained22):
    c = cond_of(co22, 2, [0, 0])
    assert np.all(predict_shift(trained22.fn, c, E[0], np.zeros(6)) == 0)
    # the oracle is piecewise constant in the history
    assert np.all(predict_shift(OracleDenoiser(co22), c, E[0], np.ones(6)) == 0)


def test_singular_shift_raises():
    m = affine_model(np.eye(2), np.ones((2, 1)), np.zeros(2))
    with pytest.raises(SingularJacobianError):
        predict_shift(ModelDenoiser(m), np.zeros(1), np.zeros(2), np.ones(1))


def test_affine_model_shift_is_exact():
    rng = np.random.default_rng(0)
    W_y = 0.4 * np.linalg.qr(rng.standard_normal((3, 3)))[0]
    m = ModelDenoiser(affine_model(W_y, rng.standard_normal((3, 2)), rng.standard_normal(3)))
    tau = rng.standard_normal(2)
    y = run_flow(m, tau, np.zeros(3), FlowConfig(max_iters=5000, convergence_tol=1e-14)).attractor
    dt = np.array([0.3, -0.7])
    np.testing.assert_allclose(predict_shift(m, tau, y, dt), rerun_shift(m, tau, y, dt),
                               atol=1e-10)


def test_smooth_shift_error_shrinks():
    f = SmoothDenoiser(4, 3, seed=1)
    tau = np.array([0.2, -0.1, 0.4])
    y = run_flow(f, tau, np.zeros(4), FlowConfig(max_iters=5000, convergence_tol=1e-14)).attractor
    d = np.array([1.0, 2.0, -1.0]) / np.sqrt(6)
    hs = [1e-1 / 2 ** i for i in range(7)] + [1e-3]
    cfg = FlowConfig(max_iters=5000, convergence_tol=1e-14)
    errs = [relative_error(predict_shift(f, tau, y, h * d), rerun_shift(f, tau, y, h * d, cfg))
            for h in hs]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-2


def test_relative_error_edge_cases():
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
    assert relative_error(np.ones(2), np.zeros(2)) == np.inf


# -- cor1 --------------------------------------------------------------------


def test_cor1_matches_predict_shift_for_symmetric_psd():
    rng = np.random.default_rng(2)
    Q = np.linalg.qr(rng.standard_normal((4, 4)))[0]
    W_y = Q @ np.diag([0.1, 0.3, 0.5, 0.8]) @ Q.T
    m = affine_model(W_y, rng.standard_normal((4, 3)), rng.standard_normal(4))
    tau, y, dt = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(3)
    rep = cor1_shift(m, tau, y, dt)
    np.testing.assert_allclose(rep.prediction, predict_shift(ModelDenoiser(m), tau, y, dt),
                               atol=1e-4)
    assert rep.discrepancy <= 1e-4


def test_cor1_square_pinv_is_inverse():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((5, 5))
    assert np.abs(np.linalg.pinv(W) - np.linalg.inv(W)).max() <= 1e-8


def test_cor1_zero_shift_and_defective():
    m = affine_model(np.array([[0.5, 1.0], [0.0, 0.5]]), np.ones((2, 1)), np.zeros(2))
    zero = cor1_shift(m, np.zeros(1), np.zeros(2), np.zeros(1))
    assert np.all(zero.prediction == 0)
    rep = cor1_shift(m, np.zeros(1), np.zeros(2), np.ones(1))
    assert rep.prediction is None and "defective" in rep.note
    assert rep.reference is not None


def test_cor1_reports_discrepancy_for_nonsymmetric(trained22):
    c = cond_of(trained22.spec, 2, [0, 0])
    y = deviation(trained22.fn, c, E[0]).attractor
    dt = np.array([0, 0, 0, 0, 1e-2, 0])
    rep = cor1_shift(trained22.fn, c, y, dt)
    if rep.prediction is not None:
        assert rep.discrepancy is not None and rep.discrepancy >= 0


# -- local datasets ----------------------------------------------------------


@pytest.fixture(scope="module")
def pairs22(trained22):
    _, _, S = trained22.dataset.arrays()
    taus, states = unique_pairs(trained22.dataset.conditions(), S)
    return list(zip(taus, states))


def test_local_dataset_extremes(trained22, pairs22):
    cache = PairCache(trained22.fn)
    anchor = pairs22[0]
    d0 = build_local_dataset(pairs22, trained22.fn, anchor, 0.0, cache=cache)
    assert len(d0.members) >= 1 and np.all(d0.distances == 0)
    assert np.array_equal(d0.anchor[1], anchor[1])
    if len({m[1].tobytes() for m in d0.members}) == 1:
        assert d0.r == 1
    dinf = build_local_dataset(pairs22, trained22.fn, anchor, np.inf, cache=cache)
    assert len(dinf.members) == len(pairs22)
    assert dinf.r == elimination_rank(np.stack([m[1] for m in dinf.members]))


def test_local_dataset_rank_oracle(trained22, pairs22):
    cache = PairCache(trained22.fn)
    recs = [cache.get(t, s) for t, s in pairs22]
    eps = epsilon_percentile(pairwise_jacobian_distances(recs), 30)
    for anchor in pairs22[:8]:
        ld = build_local_dataset(pairs22, trained22.fn, anchor, eps, cache=cache)
        assert np.all(ld.distances <= eps)
        assert ld.r == elimination_rank(np.stack([m[1] for m in ld.members]))
        assert ld.r <= min(len(ld.members), 4)


def test_local_dataset_needs_anchor(trained22, pairs22):
    with pytest.raises(ValueError):
        build_local_dataset(pairs22[1:], trained22.fn, pairs22[0], np.inf)


# -- surrogate residual ------------------------------------------------------


def test_linear_data_has_no_residual():
    rng = np.random.default_rng(0)
    T = rng.standard_normal((50, 6))
    W = rng.standard_normal((4, 6))
    # the ridge biases the fit by about ridge * |W|_F^2, so use a unit-norm map
    W /= np.linalg.norm(W)
    rep = surrogate_residual(list(zip(T, T @ W.T + 1.5)))
    assert abs(rep.residual) <= 1e-8
    assert rep.sigma_s_tau.shape == (4, 6)


def test_independent_data_residual_is_total_variance():
    T = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    S = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    rep = surrogate_residual(list(zip(T, S)))
    assert np.allclose(rep.sigma_s_tau, 0)
    assert rep.residual == pytest.approx(np.trace(rep.sigma_s), abs=1e-12)


@given(st.integers(0, 10_000), st.integers(8, 60), st.integers(1, 5), st.integers(1, 4))
@settings(max_examples=60, deadline=None)
def test_residual_matches_normal_equations(seed, n, k, d):
    rng = np.random.default_rng(seed)
    T = rng.standard_normal((n, k))
    S = T @ rng.standard_normal((k, d)) + rng.standard_normal((n, d))
    rep = surrogate_residual(list(zip(T, S)))
    assert abs(rep.residual - lstsq_residual(T, S)) <= 1e-6
    assert rep.residual >= -1e-9 and rep.n == n


def test_residual_needs_two_samples():
    with pytest.raises(ValueError):
        surrogate_residual([(np.zeros(2), np.zeros(2))])


# -- study -------------------------------------------------------------------


def test_empty_study(trained22):
    res = rank_deviation_study(trained22.fn, np.zeros((0, 6)), np.zeros((0, 4)), epsilons=[0.1])
    assert res.rows == [] and res.spearman_rho is None
    assert res.summary()["spearman_rho"] is None


@given(st.lists(st.tuples(st.integers(0, 5), st.floats(0, 1)), min_size=2, max_size=30))
@settings(max_examples=60, deadline=None)
def test_spearman_matches_brute_force(pairs):
    x, y = zip(*pairs)
    rho = spearman(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        assert rho is None
    else:
        assert rho == pytest.approx(brute_spearman(x, y), abs=1e-9)


def test_study_on_trained_model(trained22):
    _, _, S = trained22.dataset.arrays()
    C = trained22.dataset.conditions()
    res = rank_deviation_study(trained22.fn, C, S, epsilons=[0.5, np.inf])
    n = len(unique_pairs(C, S)[0])
    assert len(res.rows) == n
    assert res.spearman_rho == spearman([r.rank for r in res.rows],
                                        [r.deviation for r in res.rows])
    # with an infinite radius no member pair exceeds epsilon, so nothing is checked
    assert res.checks[np.inf] == [] and res.residuals[np.inf] is None
    for c in res.checks[0.5]:
        assert c.holds == (c.deviation < c.residual)
    lines = res.to_csv().splitlines()
    assert lines[0] == "tau_id,state_id,rank,deviation,lambda_max" and len(lines) == n + 1


def test_study_percentile_epsilons(trained22):
    _, _, S = trained22.dataset.arrays()
    C = trained22.dataset.conditions()
    res = rank_deviation_study(trained22.fn, C, S, epsilons=[0.3], epsilon_percentiles=[10, 50])
    eps = list(res.checks)
    assert eps[0] == 0.3
    assert eps[1:] == [epsilon_percentile(res.jac_distances, q) for q in (10, 50)]


def test_residual_bound_on_trained22(trained22):
    """Every checked anchor at the 10th-percentile radius has deviation < R."""
    _, _, S = trained22.dataset.arrays()
    res = rank_deviation_study(trained22.fn, trained22.dataset.conditions(), S,
                               epsilon_percentiles=[10])
    (eps, checks), = res.checks.items()
    failing = [(c.index, round(c.deviation, 4), round(c.residual, 4)) for c in checks
               if not c.holds]
    assert checks and not failing, f"eps {eps:.4f}: {len(failing)}/{len(checks)} fail {failing}"
