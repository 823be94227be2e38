"""Reconstruction quality and prevalence-estimator measures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = ("rho", "alpha", "NG", "pTP", "pFP", "metric", "value", "stderr", "n_samples")


@dataclass(frozen=True)
class RatePair:
    """Two rates over the infected / non-infected groups.

    A rate whose group is empty is ``nan`` and its ``*_defined`` flag is False.
    """

    positive: float
    negative: float

    @property
    def positive_defined(self) -> bool:
        return not math.isnan(self.positive)

    @property
    def negative_defined(self) -> bool:
        return not math.isnan(self.negative)

    def __iter__(self):
        yield self.positive
        yield self.negative


@dataclass(frozen=True)
class ReconstructionMetrics:
    tp_rate: float
    fp_rate: float
    m_plus: float
    m_minus: float


def _group_means(truth, values) -> RatePair:
    truth = np.asarray(truth) != 0
    values = np.asarray(values, dtype=float)
    if truth.shape != values.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {values.shape}")
    pos = float(values[truth].mean()) if truth.any() else math.nan
    neg = float(values[~truth].mean()) if (~truth).any() else math.nan
    return RatePair(pos, neg)


def tp_fp(truth, estimate) -> RatePair:
    """Fraction of infected called positive (TP) and of non-infected called positive (FP)."""
    return _group_means(truth, np.asarray(estimate) != 0)


def magnetizations(truth, theta_hat) -> RatePair:
    """Mean infection probability over infected (m+) and over non-infected (m-) patients."""
    return _group_means(truth, theta_hat)


def reconstruction_metrics(truth, estimate, theta_hat) -> ReconstructionMetrics:
    tp, fp = tp_fp(truth, estimate)
    mp, mm = magnetizations(truth, theta_hat)
    return ReconstructionMetrics(tp, fp, mp, mm)


def bias(true_rho: float, estimates) -> float:
    """Mean absolute deviation of prevalence estimates from the true prevalence."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("bias needs at least one estimate")
    return float(np.abs(est - true_rho).mean())


@dataclass(frozen=True)
class Summary:
    mean: float
    stderr: float
    n_samples: int
    n_excluded: int


def summarize(values) -> Summary:
    """Mean and standard error of the mean, skipping (and counting) ``nan`` entries."""
    v = np.asarray(values, dtype=float)
    ok = ~np.isnan(v)
    n = int(ok.sum())
    excluded = int(v.size - n)
    if n == 0:
        return Summary(math.nan, math.nan, 0, excluded)
    se = float(v[ok].std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return Summary(float(v[ok].mean()), se, n, excluded)
