import csv

import numpy as np
import pytest

from grouptesting import experiments as ex
from grouptesting.metrics import CSV_COLUMNS

BASE = {
    "version": 1, "method": "bp", "replicates": 3, "base_seed": 5,
    "grid": {"N": 100, "M": 50, "NG": 10, "rho": [0.02, 0.1], "pTP": 0.95, "pFP": 0.05},
}


def scenario(**changes):
    raw = {k: v for k, v in {**BASE, **changes}.items() if v is not None}
    return ex.scenario_from_dict(raw)


def test_grid_expansion_and_alpha():
    s = scenario(sweeps=[{"N": [100, 200], "alpha": 0.5, "NG": 10, "rho": 0.05, "pTP": 0.99, "pFP": 0.01}], grid=None)
    assert [(p.n_patients, p.n_tests) for p in s.points] == [(100, 50), (200, 100)]
    assert s.options == ex.METHOD_OPTIONS["bp"]


@pytest.mark.parametrize("change,fragment", [
    ({"version": 2}, "version"),
    ({"method": "magic"}, "method"),
    ({"grid": {"N": 100, "M": 50, "NG": 10, "rho": 0.1, "pTP": 0.9}}, "pFP"),
    ({"grid": {"N": 100, "M": 33, "NG": 10, "rho": 0.1, "pTP": 0.9, "pFP": 0.1}}, "divisible"),
    ({"grid": {"N": 100, "M": 50, "alpha": 0.5, "NG": 10, "rho": 0.1, "pTP": 0.9, "pFP": 0.1}}, "one of M or alpha"),
    ({"options": {"bogus": 1}}, "unknown options"),
    ({"replicates": 0}, "replicates"),
])
def test_invalid_scenarios(change, fragment):
    with pytest.raises(ex.ScenarioError, match=fragment):
        ex.scenario_from_dict({**BASE, **change})


def test_assumed_parameter_binding():
    s = scenario(method="em", assumed={"pTP": 0.9})
    p = ex.assumed_params(s, s.points[0])
    assert (p.rho, p.noise.p_tp, p.noise.p_fp) == (0.25, 0.9, 0.05)
    s = scenario(assumed={"rho": "true"})
    assert ex.assumed_params(s, s.points[1]).rho == 0.1


def test_replicate_seeds_are_stable_and_distinct():
    a = [s.generate_state(2).tolist() for s in ex.replicate_seeds(5, 1, 2)]
    assert a == [s.generate_state(2).tolist() for s in ex.replicate_seeds(5, 1, 2)]
    assert len({tuple(v) for v in a}) == 4
    assert a != [s.generate_state(2).tolist() for s in ex.replicate_seeds(5, 2, 1)]


def test_methods_see_matched_realizations(monkeypatch):
    seen = {}

    def capture(method, y, d, x, params, options, seed, true_rho):
        seen[method] = (y.copy(), np.asarray(d.patients_of_test).copy(), x.copy())
        return {"TP": 0.0}

    monkeypatch.setattr(ex, "decode", capture)
    for method in ("bp", "hbp", "em"):
        ex.run_replicate(scenario(method=method), 1, 2)
    for method in ("hbp", "em"):
        for a, b in zip(seen["bp"], seen[method]):
            assert np.array_equal(a, b)


def test_sweep_output_is_independent_of_workers(tmp_path):
    s = scenario()
    one, three = tmp_path / "a.csv", tmp_path / "b.csv"
    ex.write_sweep(ex.run_scenario(s, workers=1), one)
    ex.write_sweep(ex.run_scenario(s, workers=3), three)
    assert one.read_bytes() == three.read_bytes()
    rows = list(csv.DictReader(one.open()))
    assert tuple(rows[0])[: len(CSV_COLUMNS)] == CSV_COLUMNS
    metrics = {r["metric"] for r in rows}
    assert {"TP", "FP", "m_plus", "m_minus", "converged"} <= metrics
    assert all(r["n_samples"] == "3" for r in rows if r["metric"] == "FP")


def test_failures_go_to_manifest(tmp_path):
    s = scenario(method="exact", replicates=2,
                 grid={"N": [10, 30], "M": 5, "NG": [6], "rho": 0.1, "pTP": 0.9, "pFP": 0.1})
    res = ex.run_scenario(s)
    assert not res.ok and len(res.failures) == 2
    assert all(f["N"] == 30 and "CostGuardError" in f["error"] for f in res.failures)
    out = tmp_path / "sweep.csv"
    ex.write_sweep(res, out)
    manifest = ex.failure_manifest_path(out)
    assert manifest.name == "sweep.failures.csv"
    lines = manifest.read_text().splitlines()
    assert lines[0].split(",") == list(ex.FAILURE_COLUMNS) and len(lines) == 3
    assert {r["N"] for r in csv.DictReader(out.open())} == {"10"}


def test_timing_is_opt_in():
    assert "wall_clock" not in ex.run_replicate(scenario(), 0, 0)
    assert ex.run_replicate(scenario(timing=True), 0, 0)["wall_clock"] > 0


@pytest.mark.parametrize("method,keys", [
    ("bootstrap", {"TP_boot", "FP_boot", "dominance_violations"}),
    ("em", {"rho_hat", "bias", "pTP_hat", "pFP_hat", "stalled_rounds"}),
    ("hbp", {"rho_hat", "bias", "converged"}),
])
def test_method_metrics(method, keys):
    opts = {"n_bootstrap": 5} if method == "bootstrap" else {}
    out = ex.run_replicate(scenario(method=method, options=opts), 0, 0)
    assert keys <= set(out) and {"TP", "FP", "m_plus", "m_minus"} <= set(out)


def test_per_replicate_file(tmp_path):
    res = ex.run_scenario(scenario())
    ex.write_sweep(res, tmp_path / "a.csv", tmp_path / "reps.csv")
    rows = list(csv.DictReader((tmp_path / "reps.csv").open()))
    assert len(rows) == 6 and rows[0]["seed"] == "5:0:0"
