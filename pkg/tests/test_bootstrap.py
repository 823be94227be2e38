import io

import numpy as np
import pytest

from grouptesting import tp_fp
from grouptesting import AssumedParams, BpConfig, bootstrap_estimate, map_estimate, percentile_decisions, percentile_interval, run_bp
from grouptesting.bootstrap import resample, sample_seed, write_bootstrap_csv

from conftest import make_instance

PARAMS = AssumedParams.of(0.05, 0.95, 0.1)


@pytest.fixture(scope="module")
def instance():
    d, x, y = make_instance(200, 100, 10, 0.05, 0.95, 0.1, seed=8)
    return d, x, y


def test_resample_keeps_distinct_rows_in_draw_order(instance):
    d, _, y = instance
    yb, db = resample(y, d, seed=3)
    draws = np.random.default_rng(3).integers(d.n_tests, size=d.n_tests)
    firsts = []
    seen = set()
    for mu in draws.tolist():
        key = (int(y[mu]), tuple(d.patients_of_test[mu]))
        if key not in seen:
            seen.add(key)
            firsts.append(mu)
    assert np.array_equal(db.patients_of_test, d.patients_of_test[firsts])
    assert np.array_equal(yb, y[firsts])
    assert db.n_tests == len(set(draws.tolist())) <= d.n_tests
    assert db.n_patients == d.n_patients


def test_sample_seed_depends_only_on_index():
    a = sample_seed(7, 3).generate_state(4)
    assert np.array_equal(a, sample_seed(np.random.SeedSequence(7), 3).generate_state(4))
    assert not np.array_equal(a, sample_seed(7, 4).generate_state(4))
    child = np.random.SeedSequence(7).spawn(1)[0]
    assert not np.array_equal(sample_seed(child, 3).generate_state(4), a)


def test_results_do_not_depend_on_batch_size(instance):
    d, _, y = instance
    a = bootstrap_estimate(y, d, PARAMS, BpConfig(), 30, seed=5, batch_size=7, keep_samples=True)
    b = bootstrap_estimate(y, d, PARAMS, BpConfig(), 30, seed=5, batch_size=30, keep_samples=True)
    assert np.array_equal(a.per_sample_tau, b.per_sample_tau)
    assert np.array_equal(a.sigma_hat, b.sigma_hat) and np.array_equal(a.decisions, b.decisions)


def test_summary_statistics(instance):
    d, _, y = instance
    s = bootstrap_estimate(y, d, PARAMS, BpConfig(), 40, seed=2, keep_samples=True)
    np.testing.assert_allclose(s.sigma_hat, s.per_sample_tau.std(axis=0, ddof=1), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(s.tau_mean, s.per_sample_tau.mean(axis=0), rtol=1e-12, atol=1e-12)
    assert np.array_equal(s.decisions, (s.tau_point + s.z * s.sigma_hat > 0).astype(np.int8))
    point = run_bp(y, d, PARAMS, BpConfig(seed=np.random.SeedSequence(2)))
    assert np.array_equal(s.tau_point, point.tau_hat)
    assert np.array_equal(s.map_decisions, map_estimate(point))
    assert s.sample_sizes.max() <= d.n_tests


def test_dominance(instance):
    d, _, y = instance
    s = bootstrap_estimate(y, d, PARAMS, BpConfig(), 20, seed=9)
    assert (s.decisions[s.map_decisions == 1] == 1).all()
    x = instance[1]
    assert tp_fp(x, s.decisions).positive >= tp_fp(x, s.map_decisions).positive
    assert tp_fp(x, s.decisions).negative >= tp_fp(x, s.map_decisions).negative
    zero = bootstrap_estimate(y, d, PARAMS, BpConfig(), 20, seed=9, z=0.0)
    assert np.array_equal(zero.decisions, zero.map_decisions)


def test_percentile_interval():
    t = np.random.default_rng(0).normal(size=(100, 3))
    lo, hi = percentile_interval(t)
    np.testing.assert_allclose(hi, np.quantile(t, 0.975, axis=0))
    assert np.array_equal(percentile_decisions(t), (hi > 0).astype(np.int8))
    with pytest.raises(ValueError, match="at least 40"):
        percentile_interval(t[:39])


def test_argument_checks(instance):
    d, _, y = instance
    with pytest.raises(ValueError):
        bootstrap_estimate(y, d, PARAMS, n_bootstrap=1)
    with pytest.raises(ValueError):
        bootstrap_estimate(y, d, PARAMS, n_bootstrap=5, z=-1.0)


def test_csv(instance):
    d, _, y = instance
    s = bootstrap_estimate(y, d, PARAMS, BpConfig(), 10, seed=1)
    buf = io.StringIO()
    write_bootstrap_csv(s, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "patient,tau,sigma,ci_lo,ci_hi,map,boot" and len(lines) == d.n_patients + 1
    with pytest.raises(ValueError):
        write_bootstrap_csv(s, io.StringIO(), interval="percentile")
