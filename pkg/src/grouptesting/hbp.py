"""Hierarchical-Bayes BP: the prevalence gets a beta hyperprior.

Besides the edge messages, every patient carries ``pi_i`` (its infection
probability from the tests alone) and ``rho_tilde_i`` (the prevalence implied
by all *other* patients, used as that patient's prior).  ``rho_tilde_i`` is the
posterior mean of the prevalence under the density

    phi(r; a, b) * prod_{j != i} (r * pi_j + (1 - r) * (1 - pi_j))

evaluated either by quadrature or, for large N, by its saddle point (which no
longer depends on the hyperprior).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from . import _kernels
from .bp import (
    BpConfig,
    EdgeIndex,
    MarginalEstimate,
    MessageState,
    edge_likelihoods,
    initial_state,
    log_odds,
    posterior,
    run_bp_with_priors,
    Sweeper,
    _check_inputs,
    _check_range,
)
from .errors import DegenerateError
from .pooling import PoolingDesign
from .synth import NoiseModel

DEFAULT_NODES = 64
LOG_MARGIN = 60.0  # integrand below max * exp(-60) is dropped
SNAP_FRACTION = 0.25
SADDLE_MIN_PATIENTS = 100
TAYLOR_RADIUS = 0.1
RHO_FLOOR = 1e-12
MODES = ("quadrature", "saddle")


@dataclass(frozen=True)
class BetaHyperprior:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"beta parameters must be positive, got a={self.a}, b={self.b}")

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)


# -- quadrature -------------------------------------------------------------

@lru_cache(maxsize=64)
def _base_rules(nodes: int, a: float, b: float):
    """Four rules on [0, 1]: Legendre, Jacobi at 0, Jacobi at 1, Jacobi at both ends.

    The Jacobi variants carry the beta density's power at the ends they touch.
    """
    rules = [
        roots_legendre(nodes),
        roots_jacobi(nodes, 0.0, a - 1.0),
        roots_jacobi(nodes, b - 1.0, 0.0),
        roots_jacobi(nodes, b - 1.0, a - 1.0),
    ]
    x = np.array([0.5 * (xr + 1.0) for xr, _ in rules])
    logw = np.array([np.log(w) for _, w in rules])
    x.flags.writeable = False
    logw.flags.writeable = False
    return x, logw


def quadrature_rule(pi, prior: BetaHyperprior, nodes: int = DEFAULT_NODES):
    """Nodes and log-weights (beta density included) covering the bulk of the integrand.

    The interval is where the likelihood of the prevalence is within
    ``LOG_MARGIN`` nats of its peak.  When it reaches 0 or 1, Gauss-Jacobi
    weights absorb the beta density's power at that end, so a singular
    density (``a < 1`` or ``b < 1``) is still integrated accurately.
    """
    if nodes < 2:
        raise ValueError("quadrature needs at least 2 nodes")
    x, lw = _base_rules(nodes, float(prior.a), float(prior.b))
    r = np.empty(nodes)
    logw = np.empty(nodes)
    _kernels.prevalence_rule(
        np.ascontiguousarray(pi, dtype=float), x, lw, prior.a, prior.b,
        LOG_MARGIN, SNAP_FRACTION, 0.5, r, logw,
    )
    return r, logw


def rho_tilde_all_quadrature(pi, prior: BetaHyperprior, nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Leave-one-out prevalence means for every patient at once.

    The shared integrand is divided by each patient's own factor, so the cost
    is ``O(N * nodes)``.
    """
    pi = np.ascontiguousarray(pi, dtype=float)
    r, logw = quadrature_rule(pi, prior, nodes)
    out = np.empty(pi.size)
    bad = _kernels.loo_prevalence_means(pi, r, logw, out)
    if bad >= 0:
        raise DegenerateError("quadrature weights vanished", f"patient {bad + 1}")
    return out


def rho_tilde_quadrature(pi, prior: BetaHyperprior, exclude: int, nodes: int = DEFAULT_NODES) -> float:
    """Posterior mean of the prevalence given every patient's ``pi`` except ``exclude``."""
    others = np.delete(np.asarray(pi, dtype=float), exclude)
    r, logw = quadrature_rule(others, prior, nodes)
    log_f = np.array([_kernels.prevalence_loglik(others, v) for v in r]) + logw
    log_f -= log_f.max()
    w = np.exp(log_f)
    if not w.sum() > 0:
        raise DegenerateError("quadrature weights vanished", f"patient {exclude + 1}")
    return float(r @ w / w.sum())


# -- saddle point -----------------------------------------------------------

@dataclass(frozen=True)
class SaddleResult:
    rho: float
    converged: bool
    degenerate: bool
    iterations: int


def _posterior_given(pi, r):
    num = r * pi
    return num / (num + (1.0 - r) * (1.0 - pi))


def rho_tilde_saddle(
    pi,
    exclude: int,
    *,
    init: float | None = None,
    damping: float = 0.5,
    max_iterations: int = 500,
    tol: float = 1e-8,
) -> SaddleResult:
    """Solve ``r = mean_{j != exclude} P(X_j = 1 | pi_j, r)`` by damped fixed-point iteration.

    If the iteration does not settle, the root of the (monotone) score is
    found by bisection and ``converged`` is False.  When every ``pi_j`` is 0.5
    any ``r`` solves the equation; the initial value is returned with
    ``degenerate`` set.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.size < SADDLE_MIN_PATIENTS:
        raise ValueError(f"saddle-point mode needs at least {SADDLE_MIN_PATIENTS} patients")
    others = np.delete(pi, exclude)
    r = float(np.clip(others.mean() if init is None else init, RHO_FLOOR, 1.0 - RHO_FLOOR))
    if np.all(others == 0.5):
        return SaddleResult(r, True, True, 0)
    for it in range(1, max_iterations + 1):
        new = (1.0 - damping) * r + damping * float(_posterior_given(others, r).mean())
        if abs(new - r) < tol:
            return SaddleResult(new, True, False, it)
        r = new
    return SaddleResult(_score_root(others), False, False, max_iterations)


def _score_root(pi) -> float:
    """Root of ``sum (2 pi - 1) / (r pi + (1 - r)(1 - pi))`` (decreasing in r), kept off 0 and 1."""
    peak = _kernels.prevalence_peak(np.ascontiguousarray(pi, dtype=float))
    return float(np.clip(peak, RHO_FLOOR, 1.0 - RHO_FLOOR))


def rho_tilde_all_saddle(pi, warm=None, max_newton: int = 50, tol: float = 1e-12):
    """Leave-one-out saddle points for all patients; returns ``(rho, all_converged)``.

    The stationarity condition is ``sum_{j != i} s_j / (c_j + r s_j) = 0`` with
    ``s = 2 pi - 1``, ``c = 1 - pi``.  Around the all-patient root ``r0`` the
    shared sum is replaced by its Taylor series to sixth order; every
    leave-one-out root lies within ``O(1/N)`` of ``r0`` so the truncation error
    is negligible, and each patient needs a scalar Newton solve in ``O(1)``.
    Patients whose root falls outside the series' safe radius are solved
    directly in ``O(N)``.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.size < SADDLE_MIN_PATIENTS:
        raise ValueError(f"saddle-point mode needs at least {SADDLE_MIN_PATIENTS} patients")
    s = 2.0 * pi - 1.0
    c = 1.0 - pi
    if np.all(s == 0.0):
        r0 = 0.5 if warm is None else warm
        return np.full(pi.size, r0, dtype=float), True
    r0 = _score_root(pi)
    ratio = s / (c + r0 * s)
    # k-th Taylor coefficient of the shared sum: (-1)^k sum ratio^(k+1)
    coef = np.array([(-1.0) ** k * float((ratio ** (k + 1)).sum()) for k in range(7)])
    r = np.full(pi.size, r0)
    ok = True
    for _ in range(max_newton):
        dlt = r - r0
        powers = dlt[None, :] ** np.arange(7)[:, None]
        h = coef @ powers
        dh = (coef[1:] * np.arange(1, 7)) @ powers[:-1]
        own = s / (c + r * s)
        f = h - own
        df = dh + own ** 2
        step = np.where(df != 0, f / np.where(df != 0, df, 1.0), 0.0)
        new = np.clip(r - step, RHO_FLOOR, 1.0 - RHO_FLOOR)
        done = np.abs(new - r) <= tol
        r = new
        if done.all():
            break
    else:
        ok = False
    far = np.flatnonzero(np.abs((r - r0)[None, :] * ratio[:, None]).max(axis=0) > TAYLOR_RADIUS)
    for i in far:
        r[i] = _score_root(np.delete(pi, i))
    return r, ok


# -- message passing --------------------------------------------------------

@dataclass(frozen=True)
class HbpConfig:
    bp: BpConfig = BpConfig()
    mode: str = "quadrature"
    nodes: int = DEFAULT_NODES
    # pi and rho_tilde damping; the edge factor on top of damped edges makes
    # the prevalence loop oscillate near the collapse of BP
    node_damping: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.node_damping <= 1.0:
            raise ValueError("node_damping must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.nodes < 2:
            raise ValueError("nodes must be at least 2")


@dataclass
class HbpResult:
    estimate: MarginalEstimate
    rho_tilde: np.ndarray
    rho_hat: float
    pi: np.ndarray
    saddle_flagged: int = 0


def run_hbp(y, d: PoolingDesign, noise: NoiseModel, prior: BetaHyperprior, cfg: HbpConfig = HbpConfig()) -> HbpResult:
    """Decode with a beta hyperprior on the prevalence.

    Edge messages use each patient's current ``rho_tilde`` as its prior.  After
    every sweep ``pi`` and then ``rho_tilde`` are recomputed and damped with
    ``cfg.node_damping``.  The node messages start at
    ``pi = 0.5`` and ``rho_tilde`` = hyperprior mean.  Stops when no message of
    any family moves more than the tolerance.

    Quadrature mode runs as one compiled loop unless ``cfg.bp.check_ranges``
    asks for per-sweep assertions; both paths give identical results.
    """
    y = _check_inputs(y, d)
    n = d.n_patients
    if cfg.mode == "saddle" and n < SADDLE_MIN_PATIENTS:
        raise ValueError(f"saddle-point mode needs at least {SADDLE_MIN_PATIENTS} patients")
    bp = cfg.bp
    ix = EdgeIndex.from_design(d)
    u_e, w_e = edge_likelihoods(y, noise, ix)
    state = initial_state(ix.n_edges, bp)
    th = np.array(state.theta_to_test, dtype=float)
    tt = np.array(state.theta_to_patient, dtype=float)
    pi = np.full(n, 0.5)
    rho_t = np.full(n, prior.mean)
    if cfg.mode == "quadrature" and not bp.check_ranges:
        t, converged, flagged, trace = _compiled_sweeps(ix, u_e, w_e, th, tt, pi, rho_t, prior, cfg)
    else:
        t, converged, flagged, trace = _python_sweeps(ix, u_e, w_e, th, tt, pi, rho_t, prior, cfg)
    theta = posterior(ix, tt, rho_t)
    est = MarginalEstimate(theta, log_odds(theta), converged, t, MessageState(th, tt), trace)
    return HbpResult(est, rho_t, float(rho_t.mean()), pi, flagged)


def _compiled_sweeps(ix, u_e, w_e, th, tt, pi, rho_t, prior, cfg):
    bp = cfg.bp
    x, lw = _base_rules(cfg.nodes, float(prior.a), float(prior.b))
    changes = np.zeros(bp.max_iterations)
    t, converged, kind, at = _kernels.hbp_iterate(
        ix.group_size, ix.pat_ptr, ix.pat_edges, th, tt, u_e, w_e, pi, rho_t,
        float(bp.damping), float(cfg.node_damping), bp.max_iterations, float(bp.convergence_tol),
        x, lw, float(prior.a), float(prior.b), LOG_MARGIN, SNAP_FRACTION, changes,
    )
    if kind == 1:
        raise DegenerateError("zero message normalizer", ix.describe_edge(at))
    if kind == 2:
        raise DegenerateError("zero normalizer for test-only probability", f"patient {at + 1}")
    if kind == 3:
        raise DegenerateError("quadrature weights vanished", f"patient {at + 1}")
    trace = [(k + 1, float(changes[k])) for k in range(t)] if bp.record_trace else []
    return int(t), bool(converged), 0, trace


def _python_sweeps(ix, u_e, w_e, th, tt, pi, rho_t, prior, cfg):
    """Reference loop; also the only path for saddle mode.  Updates arrays in place."""
    bp = cfg.bp
    step = Sweeper(ix, bp.damping)
    dmp = cfg.node_damping
    keep = 1.0 - dmp
    active = np.ones(1, dtype=bool)
    x, lw = _base_rules(cfg.nodes, float(prior.a), float(prior.b))
    r = np.empty(cfg.nodes)
    logw = np.empty(cfg.nodes)
    raw = np.empty(pi.size)
    peak = 0.5
    flagged = 0
    trace = []
    th0, tt0 = th, tt
    cur_th, cur_tt = th.copy(), tt.copy()
    for t in range(1, bp.max_iterations + 1):
        cur_th, cur_tt, delta = step(cur_th, cur_tt, u_e, w_e, rho_t, active)
        change = float(delta[0])
        p_full, q_full = ix.full_products(cur_tt)
        den = p_full + q_full
        if not den.all():
            i = int(np.flatnonzero(den == 0)[0])
            raise DegenerateError("zero normalizer for test-only probability", f"patient {i + 1}")
        pi_new = dmp * (p_full / den) + keep * pi
        change = max(change, float(np.abs(pi_new - pi).max()))
        pi[:] = pi_new
        if cfg.mode == "quadrature":
            peak = _kernels.prevalence_rule(
                pi, x, lw, prior.a, prior.b, LOG_MARGIN, SNAP_FRACTION, peak, r, logw
            )
            bad = _kernels.loo_prevalence_means(pi, r, logw, raw)
            if bad >= 0:
                raise DegenerateError("quadrature weights vanished", f"patient {bad + 1}")
        else:
            raw, ok = rho_tilde_all_saddle(pi)
            flagged += not ok
        rho_new = dmp * raw + keep * rho_t
        change = max(change, float(np.abs(rho_new - rho_t).max()))
        rho_t[:] = rho_new
        if bp.check_ranges:
            _check_range(cur_th, cur_tt, pi, rho_t)
        if bp.record_trace:
            trace.append((t, change))
        if change < bp.convergence_tol:
            th0[:], tt0[:] = cur_th, cur_tt
            return t, True, flagged, trace
    th0[:], tt0[:] = cur_th, cur_tt
    return bp.max_iterations, False, flagged, trace


def run_bp_fixed_priors(y, d: PoolingDesign, noise: NoiseModel, per_patient_rho, cfg: BpConfig = BpConfig()) -> MarginalEstimate:
    """BP with a fixed, patient-specific prior infection probability."""
    rho = np.asarray(per_patient_rho, dtype=float)
    if rho.shape != (d.n_patients,):
        raise ValueError("need one prior probability per patient")
    if not ((rho > 0) & (rho < 1)).all():
        raise ValueError("per-patient priors must lie strictly inside (0, 1)")
    return run_bp_with_priors(y, d, noise, rho, cfg)
