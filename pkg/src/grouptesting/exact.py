"""Exact posterior marginals by enumerating every patient configuration.

Configurations are the integers ``0 .. 2**N - 1`` (bit ``i`` = patient ``i``),
processed in fixed chunks of ``2**16``.  Each chunk's log-weights are reduced
with a max shift and chunk results are merged in chunk order, so the answer
does not depend on how many threads evaluate chunks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from functools import partial

import numpy as np

from .bp import AssumedParams, MarginalEstimate, log_odds
from .errors import CostGuardError, DegenerateError
from .pooling import PoolingDesign

DEFAULT_MAX_PATIENTS = 22
CHUNK_BITS = 16


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def _chunk(start, stop, masks, loglik, log_prior, n_patients):
    x = np.arange(start, stop, dtype=np.int64)
    ones = np.bitwise_count(x).astype(float)
    logw = ones * log_prior[1] + (n_patients - ones) * log_prior[0]
    for mask, (l0, l1) in zip(masks, loglik):
        logw += np.where((x & mask) != 0, l1, l0)
    m = logw.max()
    if m == -np.inf:
        return m, 0.0, np.zeros(n_patients)
    w = np.exp(logw - m)
    per_patient = np.array([w[((x >> i) & 1).astype(bool)].sum() for i in range(n_patients)])
    return m, w.sum(), per_patient


def _chunk_job(bounds, **kw):
    return _chunk(bounds[0], bounds[1], **kw)


def enumerate_posterior(y, d: PoolingDesign, params: AssumedParams, max_patients=DEFAULT_MAX_PATIENTS, workers=1):
    """Return ``(log_evidence, theta)`` by brute force over ``2**N`` states."""
    n = d.n_patients
    if n > max_patients:
        raise CostGuardError(
            f"exact enumeration refused: N={n} exceeds the cap of {max_patients} "
            f"(2**{n} configurations)"
        )
    y = np.asarray(y)
    if y.shape != (d.n_tests,):
        raise ValueError(f"outcomes have shape {y.shape}, design has {d.n_tests} tests")
    masks = [int(sum(1 << int(i) for i in row)) for row in d.patients_of_test]
    u, w = params.noise.u_w(y)
    # per test: log P(Y | pool negative), log P(Y | pool positive)
    loglik = list(zip(_log(w), _log(u)))
    log_prior = _log(np.array([1.0 - params.rho, params.rho]))
    total = 1 << n
    size = 1 << CHUNK_BITS
    bounds = [(s, min(s + size, total)) for s in range(0, total, size)]
    job = partial(_chunk_job, masks=masks, loglik=loglik, log_prior=log_prior, n_patients=n)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]
    m = max(p[0] for p in parts)
    if m == -np.inf:
        raise DegenerateError("evidence is zero: outcomes impossible under the assumed parameters")
    z = 0.0
    acc = np.zeros(n)
    for mc, sc, pc in parts:
        if mc == -np.inf:
            continue
        scale = np.exp(mc - m)
        z += sc * scale
        acc += pc * scale
    return m + np.log(z), acc / z


def exact_marginals(y, d: PoolingDesign, params: AssumedParams, max_patients=DEFAULT_MAX_PATIENTS, workers=1) -> MarginalEstimate:
    """Exact infection probabilities; refuses designs with more than ``max_patients`` patients."""
    _, theta = enumerate_posterior(y, d, params, max_patients, workers)
    return MarginalEstimate(theta, log_odds(theta), converged=True, iterations_used=0)


def log_evidence(y, d: PoolingDesign, params: AssumedParams, max_patients=DEFAULT_MAX_PATIENTS) -> float:
    """``log sum_X P(Y | X) P_0(X)``."""
    return enumerate_posterior(y, d, params, max_patients)[0]
