import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from podiff.env import InconsistentHistoryError, OracleDenoiser, sensor_net_2x2
from podiff.flow import (DivergenceError, FlowConfig, InitDist, cluster_points, denoise,
                         estimate_posterior, find_fixed_points, intersect_fixed_points,
                         rows_to_csv, run_flow, vector_field)

from conftest import cond_of, joint_conditions

E = np.eye(4)


def match(points, states, tol):
    """Index of the state each point lies within ``tol`` of (or -1)."""
    out = []
    for p in points:
        d = np.linalg.norm(states - p, axis=1)
        out.append(int(np.argmin(d)) if d.min() <= tol else -1)
    return out


# -- configuration -----------------------------------------------------------


def test_init_dist_parsing():
    assert InitDist.parse("standard-normal").kind == "standard-normal"
    u = InitDist.parse("uniform-box(-2, 3)")
    assert (u.kind, u.lo, u.hi) == ("uniform-box", -2.0, 3.0)
    assert InitDist.parse("data-marginal(0.3)").sigma == 0.3
    assert InitDist.parse(str(u)) == u
    with pytest.raises(ValueError):
        InitDist.parse("laplace")


def test_flow_config_validation():
    for bad in (dict(convergence_tol=0), dict(merge_radius=-1), dict(max_iters=0)):
        with pytest.raises(ValueError):
            FlowConfig(**bad)


# -- run_flow ----------------------------------------------------------------


def test_singleton_start_is_fixed(co22):
    c = cond_of(co22, 0, [1, 0])
    tr = run_flow(OracleDenoiser.fixed(co22, 0.2), c, E[0])
    assert tr.converged and tr.iterations <= 1
    assert np.array_equal(tr.attractor, E[0])
    tr = run_flow(OracleDenoiser(co22), c, E[0])
    assert tr.converged and np.all(tr.points == E[0])


def test_oracle_flow_picks_heavier_side(co22):
    tr = run_flow(OracleDenoiser(co22), cond_of(co22, 2, [0, 0]), np.array([0.9, 0, 0, 0.1]))
    assert tr.converged and np.abs(tr.attractor - E[0]).max() <= 1e-6


def test_scheduled_oracle_does_not_stop_before_settling(co22):
    o = OracleDenoiser(co22)
    tr = run_flow(o, cond_of(co22, 2, [0, 0]), np.array([0.62, 0, 0, 0.38]))
    assert tr.iterations > o.settle_step
    assert np.abs(tr.attractor - E[0]).max() <= 1e-6


def test_divergence_carries_trace():
    def blowup(cond, y):
        return np.asarray(y) * 1e308 * 10
    with pytest.raises(DivergenceError) as err:
        run_flow(blowup, None, np.ones(2))
    assert err.value.trace is not None and len(err.value.trace.points) == 2


def test_trained_flow_lands_on_support(trained22):
    spec, fn = trained22.spec, trained22.fn
    rng = np.random.default_rng(5)
    for _ in range(10):
        tr = run_flow(fn, cond_of(spec, 2, [0, 0]), rng.standard_normal(4))
        assert tr.converged
        assert min(np.linalg.norm(tr.attractor - E[0]), np.linalg.norm(tr.attractor - E[3])) < 0.05


def test_converged_trace_is_near_fixed(trained22):
    spec, fn = trained22.spec, trained22.fn
    cfg = FlowConfig()
    rng = np.random.default_rng(6)
    for agent in range(4):
        c = cond_of(spec, agent, [0, 0])
        for _ in range(5):
            tr = run_flow(fn, c, rng.standard_normal(4), cfg)
            if tr.converged:
                assert np.linalg.norm(fn(c, tr.attractor) - tr.attractor) <= 2 * cfg.convergence_tol


# -- fixed points ------------------------------------------------------------


def test_co_agent3_has_two_stable_attractors(co22):
    fps = find_fixed_points(OracleDenoiser(co22), cond_of(co22, 2, [0, 0]),
                            FlowConfig(num_samples=1000), np.random.default_rng(0))
    att = fps.attractors
    assert len(att) == 2
    assert sorted(match(att, E, 1e-6)) == [0, 3]
    assert np.all(fps.lambda_max[fps.stability] < 1)


def test_singleton_posterior_single_attractor(co22):
    fps = find_fixed_points(OracleDenoiser(co22), cond_of(co22, 0, [1, 0]),
                            FlowConfig(num_samples=300), np.random.default_rng(0))
    assert len(fps.attractors) == 1 and match(fps.attractors, E, 1e-6) == [0]


def test_nonco_agent3_has_three_attractors(nonco22):
    fps = find_fixed_points(OracleDenoiser(nonco22), cond_of(nonco22, 2, [0, 0]),
                            FlowConfig(num_samples=2000), np.random.default_rng(0))
    assert sorted(match(fps.attractors, E, 1e-6)) == [0, 1, 3]


@pytest.mark.parametrize("co", [True, False])
def test_oracle_attractors_equal_bayes_support(co):
    spec = sensor_net_2x2(co)
    o = OracleDenoiser(spec)
    rng = np.random.default_rng(1)
    for agent in range(4):
        for obs in itertools.product([0.0, 1.0], repeat=2):
            c = cond_of(spec, agent, obs)
            try:
                post = o.posterior(c)
            except InconsistentHistoryError:
                continue
            fps = find_fixed_points(o, c, FlowConfig(num_samples=400), rng)
            assert sorted(match(fps.attractors, E, 1e-6)) == sorted(np.argmax(post.support, 1))
            assert np.all(fps.basin_mass[~fps.stability] == 0)


def test_positive_mass_attractors_are_stable(trained22):
    spec, fn = trained22.spec, trained22.fn
    for agent in range(4):
        for obs in ([0, 0], [1, 0], [0, 1]):
            fps = find_fixed_points(fn, cond_of(spec, agent, obs), FlowConfig(num_samples=200),
                                    np.random.default_rng(agent))
            assert np.all(fps.lambda_max[fps.basin_mass > 0] < 1)
            assert fps.basin_mass.sum() <= 1 + 1e-12
            P = fps.points
            for i, j in itertools.combinations(range(len(P)), 2):
                assert np.linalg.norm(P[i] - P[j]) > 0.05


def test_fixed_points_are_seed_deterministic(trained22):
    spec, fn = trained22.spec, trained22.fn
    c = cond_of(spec, 2, [0, 0])
    a = find_fixed_points(fn, c, FlowConfig(num_samples=200, seed=4))
    b = find_fixed_points(fn, c, FlowConfig(num_samples=200, seed=4))
    assert a.to_json(c) == b.to_json(c)


def test_no_convergence_gives_empty_set():
    def rotate(cond, y):
        y = np.atleast_2d(y)
        return np.column_stack([-y[:, 1], y[:, 0]])
    rotate.model = type("M", (), {"state_dim": 2})()
    fps = find_fixed_points(rotate, None, FlowConfig(num_samples=10, max_iters=5))
    assert len(fps) == 0 and fps.diagnostic


# -- posterior estimation ----------------------------------------------------


def test_co_agent3_equal_masses(co22):
    fps = estimate_posterior(OracleDenoiser(co22), cond_of(co22, 2, [0, 0]),
                             FlowConfig(num_samples=2000, init_dist="data-marginal(1)"),
                             np.random.default_rng(2))
    assert len(fps.attractors) == 2
    assert np.all(np.abs(fps.basin_mass[fps.stability] - 0.5) <= 0.05)


def test_singleton_mass_is_one(co22):
    fps = estimate_posterior(OracleDenoiser(co22), cond_of(co22, 0, [1, 0]),
                             FlowConfig(num_samples=200), np.random.default_rng(2))
    assert fps.basin_mass.tolist() == [1.0]


def test_nonco_agent3_masses_match_bayes(nonco22):
    sigma = 0.3
    fps = estimate_posterior(OracleDenoiser(nonco22, sigma0=sigma), cond_of(nonco22, 2, [0, 0]),
                             FlowConfig(num_samples=5000, init_dist=f"data-marginal({sigma})"),
                             np.random.default_rng(3))
    idx = match(fps.points, E, 1e-6)
    mass = dict(zip(idx, fps.basin_mass))
    for k, p in zip((0, 1, 3), (0.4, 0.2, 0.4)):
        assert abs(mass.get(k, 0.0) - p) <= 0.06


# -- intersections -----------------------------------------------------------


def test_co_intersection_is_true_state(co22):
    o = OracleDenoiser(co22)
    rng = np.random.default_rng(0)
    sets = [find_fixed_points(o, c, FlowConfig(num_samples=300), rng)
            for c in joint_conditions(co22, (0,))]
    inter = intersect_fixed_points(sets)
    assert len(inter) == 1 and np.abs(inter[0] - E[0]).max() <= 1e-6


def test_nonco_all_zero_intersection(nonco22):
    o = OracleDenoiser(nonco22)
    rng = np.random.default_rng(0)
    sets = [find_fixed_points(o, cond_of(nonco22, i, [0, 0]), FlowConfig(num_samples=1000), rng)
            for i in range(4)]
    inter = intersect_fixed_points(sets)
    assert sorted(match(inter, E, 1e-6)) == [0, 1]


@given(st.lists(st.integers(0, 3), min_size=1, max_size=4, unique=True))
def test_intersection_is_idempotent(ks):
    pts = E[ks]
    out = intersect_fixed_points([pts, pts, pts])
    assert sorted(match(out, E, 0)) == sorted(ks)


def test_disjoint_sets_intersect_to_empty():
    assert intersect_fixed_points([E[[0]], E[[1]]]).shape == (0, 4)


# -- clustering --------------------------------------------------------------


@given(st.integers(1, 5), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_clusters_recover_separated_blobs(k, seed):
    rng = np.random.default_rng(seed)
    centres = np.arange(k)[:, None] * np.array([[1.0, 0.5, 0.0]])
    pts = np.repeat(centres, 20, axis=0) + rng.uniform(-0.005, 0.005, size=(20 * k, 3))
    labels = cluster_points(pts, 0.05)
    assert labels.max() + 1 == k
    for j in range(k):
        assert len(set(labels[20 * j:20 * (j + 1)])) == 1


# -- brute-force basin check -------------------------------------------------


@pytest.mark.parametrize("co,agent,sigma", [(True, 2, 0.3), (True, 2, 0.2), (False, 2, 0.3),
                                            (False, 0, 0.25)])
def test_flow_reaches_weighted_nearest_state(co, agent, sigma):
    """Fixed-sigma oracle flows end at argmax_s p(s) exp(-|y0 - s|^2 / 2 sigma^2).

    Grid points whose two best scores differ by less than one nat sit on a
    basin boundary, where the iterated map and the one-step score can
    legitimately disagree; they are skipped.
    """
    spec = sensor_net_2x2(co)
    o = OracleDenoiser.fixed(spec, sigma)
    c = cond_of(spec, agent, [0, 0])
    post = o.posterior(c)
    axis = np.linspace(-0.25, 1.25, 13)
    checked = 0
    for a, b, d in itertools.product(axis, axis, (0.0, 0.2)):
        y0 = np.array([a, b, d, 1.0 - a])
        score = np.log(post.probs) - ((y0 - post.support) ** 2).sum(1) / (2 * sigma ** 2)
        top = np.sort(score)[::-1]
        if len(top) > 1 and top[0] - top[1] < 1.0:
            continue
        tr = run_flow(o, c, y0, FlowConfig(max_iters=500, convergence_tol=1e-10))
        assert tr.converged
        assert np.linalg.norm(tr.attractor - post.support[np.argmax(score)]) < 1e-3
        checked += 1
    assert checked > 100


# -- vector field ------------------------------------------------------------


def test_empty_grid_is_header_only(co22):
    header, rows = vector_field(OracleDenoiser(co22), cond_of(co22, 2, [0, 0]), (1, 2), 0, 1, 0,
                                np.zeros(4))
    assert rows.shape == (0, 8)
    assert rows_to_csv(header, rows).strip() == ",".join(header)


def test_field_rows_are_denoiser_outputs(trained22):
    spec, fn = trained22.spec, trained22.fn
    c = cond_of(spec, 2, [0, 0])
    _, rows = vector_field(fn, c, (1, 2), -0.5, 1.5, 7, np.array([0.2, 0, 0, 0.1]))
    assert rows.shape == (49, 8)
    for r in rows:
        np.testing.assert_allclose(r[4:], denoise(fn, c, r[:4]), rtol=0, atol=1e-12)
    assert np.all(rows[:, 0] == 0.2) and np.all(rows[:, 3] == 0.1)


@pytest.mark.parametrize("which", ["oracle", "trained"])
def test_field_arrows_head_to_attractors(which, co22, trained22):
    fn = OracleDenoiser(co22) if which == "oracle" else trained22.fn
    c = cond_of(co22, 2, [0, 0])
    _, rows = vector_field(fn, c, (1, 2), 0.0, 1.0, 20, np.array([0.5, 0, 0, 0.5]) * 0 + 0.0)
    att = E[[0, 3]]

    def dist(Y):
        return np.min(np.linalg.norm(Y[:, None, :] - att[None], axis=2), axis=1)

    assert np.all(dist(rows[:, 4:]) < dist(rows[:, :4]))
