import numpy as np
import pytest

from grouptesting import (
    AssumedParams, BpConfig, DegenerateError, MarginalEstimate, MessageState, PoolingDesign,
    map_estimate, run_bp, threshold_estimate,
)
from grouptesting.bp import log_odds, run_bp_many

from conftest import make_instance
from oracles import brute_force, from_edge_dict, plain_sweep, reference_marginals, reference_sweep, to_edge_dict


def _random_messages(d, seed):
    rng = np.random.default_rng(seed)
    return MessageState(rng.random(d.n_edges), rng.random(d.n_edges))


@pytest.mark.parametrize("damping", [0.1, 0.5, 1.0])
def test_sweeps_match_reference(small_instance, damping):
    d, _, y, params = small_instance
    init = _random_messages(d, 11)
    pools = np.asarray(d.patients_of_test).tolist()
    th, tt = to_edge_dict(pools, init.theta_to_test), to_edge_dict(pools, init.theta_to_patient)
    for k in range(1, 6):
        th, tt = reference_sweep(pools, d.n_patients, y, params.rho, 0.9, 0.05, th, tt, damping)
        cfg = BpConfig(max_iterations=k, damping=damping, init_mode="provided", initial=init, convergence_tol=0.0)
        est = run_bp(y, d, params, cfg)
        assert est.iterations_used == k
        np.testing.assert_allclose(est.messages.theta_to_test, from_edge_dict(pools, th), rtol=0, atol=1e-13)
        np.testing.assert_allclose(est.messages.theta_to_patient, from_edge_dict(pools, tt), rtol=0, atol=1e-13)
        np.testing.assert_allclose(est.theta_hat, reference_marginals(pools, d.n_patients, params.rho, tt), atol=1e-13)


def test_tree_design_gives_exact_marginals():
    # a chain of pools has a tree-shaped factor graph, where BP is exact
    pools = [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5]]
    d = PoolingDesign.from_pools(pools, 6)
    y = np.array([1, 0, 0, 1, 1], dtype=np.int8)
    params = AssumedParams.of(0.2, 0.9, 0.1)
    est = run_bp(y, d, params, BpConfig(damping=0.5, seed=0, convergence_tol=1e-14, max_iterations=5000))
    assert est.converged
    _, exact = brute_force(pools, 6, y, 0.2, 0.9, 0.1)
    np.testing.assert_allclose(est.theta_hat, exact, atol=1e-10)


def test_identity_noiseless_recovers_outcomes():
    d = PoolingDesign.from_pools(np.arange(8)[:, None], 8)
    y = np.array([1, 0, 0, 1, 0, 1, 1, 0], dtype=np.int8)
    for rho in (0.01, 0.3, 0.9):
        # damped messages approach 0 and 1 geometrically; the undamped update lands on them
        damped = run_bp(y, d, AssumedParams.of(rho, 1.0, 0.0), BpConfig(seed=1))
        assert np.array_equal(map_estimate(damped), y)
        assert np.abs(damped.theta_hat - y).max() < 1e-4
        undamped = run_bp(y, d, AssumedParams.of(rho, 1.0, 0.0), BpConfig(seed=1, damping=1.0))
        assert np.array_equal(undamped.theta_hat, y.astype(float))


def test_noiseless_negative_test_clears_members():
    d, x, y = make_instance(60, 30, 6, 0.05, 1.0, 0.0, seed=2)
    est = run_bp(y, d, AssumedParams.of(0.05, 1.0, 0.0), BpConfig(seed=3, damping=1.0, max_iterations=50))
    pools = np.asarray(d.patients_of_test)
    cleared = np.unique(pools[y == 0])
    assert (est.theta_hat[cleared] == 0.0).all()


def test_trivial_fixed_point_on_positive_tests():
    d = PoolingDesign.from_pools([[0, 1, 2], [0, 3, 4], [1, 3, 5]], 6)
    y = np.ones(3, dtype=np.int8)
    init = MessageState(np.zeros(d.n_edges), np.full(d.n_edges, 0.3))
    cfg = BpConfig(max_iterations=1, damping=1.0, init_mode="provided", initial=init, convergence_tol=0.0)
    est = run_bp(y, d, AssumedParams.of(0.1, 0.9, 0.0), cfg)
    assert (est.messages.theta_to_patient == 1.0).all()
    assert (est.theta_hat == 1.0).all()


def test_damping_one_is_plain_update_bitwise(small_instance):
    d, _, y, params = small_instance
    init = _random_messages(d, 5)
    th, tt = init.theta_to_test.copy(), init.theta_to_patient.copy()
    for k in range(1, 5):
        th, tt = plain_sweep(d.patients_of_test, d.n_patients, y, params.rho, 0.9, 0.05, th, tt)
        cfg = BpConfig(max_iterations=k, damping=1.0, init_mode="provided", initial=init, convergence_tol=0.0)
        est = run_bp(y, d, params, cfg)
        assert np.array_equal(est.messages.theta_to_test, th)
        assert np.array_equal(est.messages.theta_to_patient, tt)


def test_deterministic_given_seed():
    d, _, y = make_instance(200, 100, 10, 0.05, 0.95, 0.02, seed=1)
    p = AssumedParams.of(0.05, 0.95, 0.02)
    a = run_bp(y, d, p, BpConfig(seed=42))
    b = run_bp(y, d, p, BpConfig(seed=42))
    assert np.array_equal(a.theta_hat, b.theta_hat) and a.iterations_used == b.iterations_used


def test_batched_runs_equal_single_runs():
    problems = [make_instance(100, 50, 10, 0.05, 0.95, 0.05, seed=s)[::2] for s in range(4)]
    problems = [(y, d) for d, y in problems]
    p = AssumedParams.of(0.05, 0.95, 0.05)
    cfg = BpConfig(max_iterations=300)
    seeds = [np.random.SeedSequence(10 + s) for s in range(4)]
    many = run_bp_many(problems, p, cfg, seeds)
    for (y, d), s, got in zip(problems, seeds, many):
        one = run_bp(y, d, p, cfg.with_seed(s))
        assert np.array_equal(one.theta_hat, got.theta_hat)
        assert one.iterations_used == got.iterations_used and one.converged == got.converged


def test_range_checks_and_trace():
    d, _, y = make_instance(100, 50, 10, 0.1, 0.95, 0.02, seed=4)
    est = run_bp(y, d, AssumedParams.of(0.1, 0.95, 0.02), BpConfig(seed=1, check_ranges=True, record_trace=True))
    assert ((est.theta_hat >= 0) & (est.theta_hat <= 1)).all()
    assert len(est.trace) == est.iterations_used
    if est.converged:
        assert est.trace[-1][1] < 1e-8


def test_contradictory_noiseless_data_names_the_patient():
    d = PoolingDesign.from_pools([[0], [0], [1]], 2)
    y = np.array([1, 0, 0], dtype=np.int8)
    with pytest.raises(DegenerateError, match="patient 1") as info:
        run_bp(y, d, AssumedParams.of(0.1, 1.0, 0.0), BpConfig(seed=0, damping=1.0))
    assert info.value.where == "patient 1"


def test_shape_mismatch_rejected(small_instance):
    d, _, y, params = small_instance
    with pytest.raises(ValueError):
        run_bp(y[:-1], d, params)
    with pytest.raises(ValueError):
        BpConfig(damping=0.0)


def test_map_estimate_is_strict():
    assert map_estimate(np.array([0.6, 0.4, 0.5])).tolist() == [1, 0, 0]
    assert map_estimate(np.full(5, 0.3)).sum() == 0


def test_threshold_estimate():
    theta = np.array([0.0, 0.2, 0.5, 0.7, 1.0])
    m = MarginalEstimate(theta, log_odds(theta))
    assert np.array_equal(threshold_estimate(m, 0.0), map_estimate(m))
    assert threshold_estimate(m, -np.inf).all()
    assert not threshold_estimate(m, np.inf).any()


def test_log_odds_is_finite_at_ends():
    t = log_odds(np.array([0.0, 1.0]))
    assert np.isfinite(t).all()
    assert t[1] == pytest.approx(np.log(1 - 1e-12) - np.log(1e-12))
