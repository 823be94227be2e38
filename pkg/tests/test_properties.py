"""Property suite: message ranges, d=1 equivalence, dominance, quadrature vs
saddle agreement and determinism under parallelism.

Runs on its own with ``pytest tests/test_properties.py`` or
``python tests/test_properties.py``; no figure sweeps are executed.
"""

import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from grouptesting import (
    AssumedParams, BetaHyperprior, BpConfig, HbpConfig, MessageState, NoiseModel, bootstrap_estimate, run_bp,
    run_hbp,
)
from grouptesting import experiments as ex
from grouptesting.bp import run_bp_many
from grouptesting.exact import enumerate_posterior
from grouptesting.hbp import rho_tilde_all_quadrature, rho_tilde_all_saddle

from conftest import make_instance
from oracles import plain_sweep

SETTINGS = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])

# (N, M, N_G) with M * N_G divisible by N, so a regular design exists
SHAPES = [(12, 6, 4), (20, 10, 10), (30, 15, 6), (40, 20, 8), (60, 30, 10), (25, 25, 1)]
prob = st.floats(0.01, 0.99)


@st.composite
def problems(draw):
    n, m, g = draw(st.sampled_from(SHAPES))
    rho = draw(st.floats(0.0, 0.5))
    p_tp = draw(st.floats(0.5, 1.0))
    p_fp = draw(st.floats(0.0, 0.5))
    seed = draw(st.integers(0, 2**32 - 1))
    d, x, y = make_instance(n, m, g, rho, p_tp, p_fp, seed)
    assumed = AssumedParams.of(draw(prob), draw(st.floats(0.5, 0.99)), draw(st.floats(0.01, 0.5)))
    return d, y, assumed, seed


@SETTINGS
@given(problems(), st.floats(0.05, 1.0), st.integers(1, 30))
def test_messages_stay_in_unit_interval(problem, damping, sweeps):
    d, y, params, seed = problem
    cfg = BpConfig(max_iterations=sweeps, damping=damping, seed=seed, check_ranges=True, convergence_tol=0.0)
    est = run_bp(y, d, params, cfg)
    for a in (est.theta_hat, est.messages.theta_to_test, est.messages.theta_to_patient):
        assert ((a >= 0) & (a <= 1)).all()


@SETTINGS
@given(problems(), st.integers(1, 20), st.sampled_from([(0.5, 9.5), (1.0, 5.0), (2.0, 2.0)]))
def test_hbp_families_stay_in_unit_interval(problem, sweeps, ab):
    d, y, params, seed = problem
    cfg = HbpConfig(bp=BpConfig(max_iterations=sweeps, seed=seed, check_ranges=True))
    r = run_hbp(y, d, params.noise, BetaHyperprior(*ab), cfg)
    for a in (r.pi, r.rho_tilde, r.estimate.theta_hat):
        assert ((a >= 0) & (a <= 1)).all()


@SETTINGS
@given(problems(), st.integers(1, 6))
def test_damping_one_equals_undamped_update(problem, sweeps):
    d, y, params, seed = problem
    rng = np.random.default_rng(seed)
    init = MessageState(rng.random(d.n_edges), rng.random(d.n_edges))
    th, tt = init.theta_to_test.copy(), init.theta_to_patient.copy()
    for _ in range(sweeps):
        th, tt = plain_sweep(d.patients_of_test, d.n_patients, y, params.rho,
                             params.noise.p_tp, params.noise.p_fp, th, tt)
    cfg = BpConfig(max_iterations=sweeps, damping=1.0, init_mode="provided", initial=init, convergence_tol=0.0)
    est = run_bp(y, d, params, cfg)
    assert np.array_equal(est.messages.theta_to_test, th)
    assert np.array_equal(est.messages.theta_to_patient, tt)


@settings(max_examples=15, deadline=None)
@given(problems(), st.floats(0.0, 4.0))
def test_bootstrap_call_dominates_map(problem, z):
    d, y, params, seed = problem
    s = bootstrap_estimate(y, d, params, BpConfig(max_iterations=200), n_bootstrap=8, seed=seed, z=z)
    assert (s.decisions >= s.map_decisions).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.3), st.sampled_from([(1.0, 1.0), (1.0, 5.0), (2.0, 2.0)]))
def test_quadrature_and_saddle_agree_as_n_grows(seed, rho, ab):
    prior = BetaHyperprior(*ab)
    gaps = []
    for n in (100, 1000, 10000):
        rng = np.random.default_rng([seed, n])
        x = rng.random(n) < rho
        pi = np.where(x, rng.beta(8, 2, n), rng.beta(1, 20, n))
        gaps.append(np.abs(rho_tilde_all_quadrature(pi, prior) - rho_tilde_all_saddle(pi)[0]).max())
    assert gaps[2] < gaps[0]
    assert gaps[2] < 0.01


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exact_enumeration_is_worker_invariant(seed):
    d, _, y = make_instance(20, 10, 10, 0.1, 0.95, 0.02, seed)
    p = AssumedParams.of(0.1, 0.95, 0.02)
    one = enumerate_posterior(y, d, p, workers=1)
    four = enumerate_posterior(y, d, p, workers=4)
    assert one[0] == four[0] and np.array_equal(one[1], four[1])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_bootstrap_is_batch_invariant(seed, batch):
    d, _, y = make_instance(60, 30, 10, 0.05, 0.95, 0.05, seed)
    p = AssumedParams.of(0.05, 0.95, 0.05)
    a = bootstrap_estimate(y, d, p, BpConfig(max_iterations=200), 12, seed=seed, batch_size=batch, keep_samples=True)
    b = bootstrap_estimate(y, d, p, BpConfig(max_iterations=200), 12, seed=seed, batch_size=12, keep_samples=True)
    assert np.array_equal(a.per_sample_tau, b.per_sample_tau)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=5))
def test_batched_bp_equals_independent_runs(seeds):
    problems_ = [make_instance(60, 30, 10, 0.05, 0.95, 0.05, s) for s in seeds]
    p = AssumedParams.of(0.05, 0.95, 0.05)
    cfg = BpConfig(max_iterations=300)
    many = run_bp_many([(y, d) for d, _, y in problems_], p, cfg, seeds)
    for (d, _, y), s, got in zip(problems_, seeds, many):
        assert np.array_equal(run_bp(y, d, p, cfg.with_seed(s)).theta_hat, got.theta_hat)


def test_sweep_is_worker_invariant(tmp_path):
    s = ex.scenario_from_dict({
        "version": 1, "method": "hbp", "replicates": 3, "base_seed": 8,
        "grid": {"N": 100, "alpha": 0.5, "NG": 10, "rho": [0.02, 0.05], "pTP": 0.95, "pFP": 0.05},
    })
    ex.write_sweep(ex.run_scenario(s, workers=1), tmp_path / "a.csv")
    ex.write_sweep(ex.run_scenario(s, workers=4), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
