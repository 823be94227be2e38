"""Nonparametric bootstrap over test rows.

Each resample draws ``M`` (outcome, pool membership) pairs with replacement,
drops repeated pairs, and reruns BP on the reduced design.  The spread of the
resampled log-odds gives a per-patient standard error, and a patient is called
infected when the upper end of the normal interval ``tau + z * sigma`` is above
zero.  Since ``sigma >= 0`` this call is never stricter than the MAP call.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .bp import AssumedParams, BpConfig, map_estimate, run_bp, run_bp_many
from .errors import DegenerateError
from .pooling import PoolingDesign

Z_95 = 1.959963984540054
MIN_PERCENTILE_SAMPLES = 40


def _root(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def sample_seed(seed, b: int) -> np.random.SeedSequence:
    """Seed of bootstrap sample ``b``; depends only on ``(seed, b)``."""
    root = _root(seed)
    return np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (b,))


def resample(y, d: PoolingDesign, seed=None) -> tuple[np.ndarray, PoolingDesign]:
    """Draw ``M`` rows with replacement and keep the first copy of each distinct pair.

    Rows keep the order of their first draw.  The result generally has
    irregular column degrees, and a patient may belong to no pool at all.
    """
    y = np.asarray(y)
    m = d.n_tests
    if m < 1:
        raise ValueError("cannot resample a design without tests")
    draws = np.random.default_rng(seed).integers(m, size=m)
    pools = np.asarray(d.patients_of_test)
    seen = set()
    keep = []
    for mu in draws.tolist():
        key = (int(y[mu]), tuple(sorted(pools[mu].tolist())))
        if key not in seen:
            seen.add(key)
            keep.append(mu)
    keep = np.array(keep, dtype=np.int64)
    return y[keep].copy(), PoolingDesign.from_pools(pools[keep], d.n_patients)


@dataclass
class BootstrapSummary:
    tau_point: np.ndarray
    tau_mean: np.ndarray
    sigma_hat: np.ndarray
    decisions: np.ndarray
    map_decisions: np.ndarray
    n_bootstrap: int
    z: float
    sample_sizes: np.ndarray
    n_unconverged: int = 0
    per_sample_tau: np.ndarray | None = None

    def normal_interval(self):
        return self.tau_point - self.z * self.sigma_hat, self.tau_point + self.z * self.sigma_hat


def bootstrap_estimate(
    y,
    d: PoolingDesign,
    params: AssumedParams,
    cfg: BpConfig = BpConfig(),
    n_bootstrap: int = 1000,
    seed=None,
    *,
    z: float = Z_95,
    keep_samples: bool = False,
    batch_size: int = 50,
) -> BootstrapSummary:
    """Per-patient bootstrap standard errors of the BP log-odds and the relaxed call.

    Sample ``b`` resamples with ``sample_seed(seed, b)`` and initializes BP from
    a child of that seed, so results do not depend on ``batch_size``.  The
    original data are decoded with ``cfg.seed`` when set, else with a seed
    derived from ``seed``.
    """
    if n_bootstrap < 2:
        raise ValueError("n_bootstrap must be at least 2")
    if z < 0:
        raise ValueError("z must be nonnegative")
    root = _root(seed)
    base_cfg = cfg if cfg.seed is not None else cfg.with_seed(root)
    point = run_bp(y, d, params, base_cfg)

    taus = np.empty((n_bootstrap, d.n_patients))
    sizes = np.empty(n_bootstrap, dtype=np.int64)
    unconverged = 0
    for start in range(0, n_bootstrap, batch_size):
        idx = range(start, min(start + batch_size, n_bootstrap))
        problems, seeds = [], []
        for b in idx:
            draw_seed, bp_seed = sample_seed(root, b).spawn(2)
            yb, db = resample(y, d, draw_seed)
            problems.append((yb, db))
            seeds.append(bp_seed)
            sizes[b] = db.n_tests
        try:
            results = run_bp_many(problems, params, cfg, seeds)
        except DegenerateError as exc:
            raise DegenerateError(f"bootstrap samples {idx.start}..{idx.stop - 1}: {exc}") from exc
        for b, res in zip(idx, results):
            taus[b] = res.tau_hat
            unconverged += not res.converged

    # sort each column so the reduction does not depend on sample order
    ordered = np.sort(taus, axis=0)
    tau_mean = ordered.mean(axis=0)
    sigma = np.sqrt(((ordered - tau_mean) ** 2).sum(axis=0) / (n_bootstrap - 1))
    decisions = (point.tau_hat + z * sigma > 0).astype(np.int8)
    return BootstrapSummary(
        tau_point=point.tau_hat,
        tau_mean=tau_mean,
        sigma_hat=sigma,
        decisions=decisions,
        map_decisions=map_estimate(point),
        n_bootstrap=n_bootstrap,
        z=z,
        sample_sizes=sizes,
        n_unconverged=unconverged,
        per_sample_tau=taus if keep_samples else None,
    )


def percentile_interval(per_sample_tau, lo: float = 0.025, hi: float = 0.975):
    """Per-patient ``[lo, hi]`` quantiles of the bootstrap log-odds (linear interpolation)."""
    t = np.asarray(per_sample_tau, dtype=float)
    if t.ndim != 2:
        raise ValueError("per_sample_tau must be an (N_B, N) matrix")
    if t.shape[0] < MIN_PERCENTILE_SAMPLES:
        raise ValueError(
            f"percentile interval needs at least {MIN_PERCENTILE_SAMPLES} samples, got {t.shape[0]}"
        )
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError("need 0 <= lo <= hi <= 1")
    q = np.quantile(t, [lo, hi], axis=0, method="linear")
    return q[0], q[1]


def percentile_decisions(per_sample_tau, lo: float = 0.025, hi: float = 0.975) -> np.ndarray:
    """Call a patient infected when the upper percentile of its log-odds is positive."""
    return (percentile_interval(per_sample_tau, lo, hi)[1] > 0).astype(np.int8)


def write_bootstrap_csv(s: BootstrapSummary, path, interval: str = "normal") -> None:
    """Per-patient table; ``path`` may be a filename or an open text file."""
    if interval == "percentile":
        if s.per_sample_tau is None:
            raise ValueError("percentile interval needs retained per-sample log-odds")
        ci_lo, ci_hi = percentile_interval(s.per_sample_tau)
    else:
        ci_lo, ci_hi = s.normal_interval()
    if hasattr(path, "write"):
        _write_rows(s, path, ci_lo, ci_hi)
    else:
        with open(path, "w", newline="") as fh:
            _write_rows(s, fh, ci_lo, ci_hi)


def _write_rows(s, fh, ci_lo, ci_hi) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["patient", "tau", "sigma", "ci_lo", "ci_hi", "map", "boot"])
    for i in range(len(s.tau_point)):
        w.writerow([
            i + 1, repr(float(s.tau_point[i])), repr(float(s.sigma_hat[i])),
            repr(float(ci_lo[i])), repr(float(ci_hi[i])),
            int(s.map_decisions[i]), int(s.decisions[i]),
        ])
