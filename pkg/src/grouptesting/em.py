"""Joint estimation of prevalence and test error rates by BP + EM.

Each round runs BP to a (near) fixed point at the current parameters, sets the
prevalence to the mean marginal, and takes one Newton step on the two noise
rates toward a stationary point of the Bethe free entropy.  Parameters are
kept inside ``[EPS, 1 - EPS]`` so the trivial roots at 0 and 1 are never hit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .bp import (
    AssumedParams,
    BpConfig,
    EdgeIndex,
    MarginalEstimate,
    MessageState,
    edge_likelihoods,
    initial_state,
    iterate,
    log_odds,
    posterior,
)
from .errors import DegenerateError
from .pooling import PoolingDesign
from .synth import NoiseModel

EPS = 1e-6
DET_MIN = 1e-300


@dataclass
class PoolAggregates:
    """Per-test ``q_tilde = prod (1 - theta_to_test)`` over members and evidence ``z_mu``."""

    q_tilde: np.ndarray
    z_mu: np.ndarray


def _index(d) -> EdgeIndex:
    return d if isinstance(d, EdgeIndex) else EdgeIndex.from_design(d)


def pool_aggregates(msgs: MessageState, y, d, noise: NoiseModel) -> PoolAggregates:
    ix = _index(d)
    q = ix.pool_complements(np.asarray(msgs.theta_to_test, dtype=float))
    u, w = noise.u_w(y)
    return PoolAggregates(q, u * (1.0 - q) + w * q)


def _sum_log(values, kind, locate):
    bad = np.flatnonzero(~(values > 0))
    if bad.size:
        raise DegenerateError(f"nonpositive {kind} term", locate(int(bad[0])))
    return float(np.log(values).sum())


def bethe_free_entropy(msgs: MessageState, y, d, params: AssumedParams) -> float:
    """Bethe approximation of the log evidence from a set of messages.

    Sum of log test normalizers plus log patient normalizers minus log edge
    normalizers.
    """
    ix = _index(d)
    th = np.asarray(msgs.theta_to_test, dtype=float)
    tt = np.asarray(msgs.theta_to_patient, dtype=float)
    agg = pool_aggregates(msgs, y, ix, params.noise)
    p_full, q_full = ix.full_products(tt)
    z_i = params.rho * p_full + (1.0 - params.rho) * q_full
    z_edge = th * tt + (1.0 - th) * (1.0 - tt)
    return (
        _sum_log(agg.z_mu, "test", lambda mu: f"test {mu + 1}")
        + _sum_log(z_i, "patient", lambda i: f"patient {i + 1}")
        - _sum_log(z_edge, "edge", ix.describe_edge)
    )


def rho_gradient(msgs: MessageState, d, rho: float) -> float:
    """Derivative of the Bethe free entropy in the prevalence, messages held fixed."""
    ix = _index(d)
    p_full, q_full = ix.full_products(np.asarray(msgs.theta_to_patient, dtype=float))
    return float(((p_full - q_full) / (rho * p_full + (1.0 - rho) * q_full)).sum())


def noise_gradient(agg: PoolAggregates, y) -> tuple[float, float]:
    """``(f, g)``: derivatives of the Bethe free entropy in ``p_tp`` and ``p_fp``."""
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    return (
        float((s * (1.0 - agg.q_tilde) / agg.z_mu).sum()),
        float((s * agg.q_tilde / agg.z_mu).sum()),
    )


def noise_jacobian(agg: PoolAggregates, y) -> np.ndarray:
    """Jacobian of ``(f, g)`` in ``(p_tp, p_fp)`` at fixed messages."""
    s2 = (2.0 * np.asarray(y, dtype=float) - 1.0) ** 2
    a = (1.0 - agg.q_tilde) / agg.z_mu
    b = agg.q_tilde / agg.z_mu
    off = -float((s2 * a * b).sum())
    return np.array([[-float((s2 * a * a).sum()), off], [off, -float((s2 * b * b).sum())]])


def m_step_rho(theta_hat) -> float:
    return float(np.mean(theta_hat))


@dataclass(frozen=True)
class NoiseStep:
    noise: NoiseModel
    f: float
    g: float
    stalled: bool


def m_step_noise(agg: PoolAggregates, y, current: NoiseModel, damping: float = 1.0) -> NoiseStep:
    """One clamped Newton step on ``(f, g) = 0``, scaled by ``damping``.

    A singular Jacobian leaves the rates unchanged.
    """
    f, g = noise_gradient(agg, y)
    if f == 0.0 and g == 0.0:
        return NoiseStep(current, f, g, False)
    jac = noise_jacobian(agg, y)
    if not abs(np.linalg.det(jac)) > DET_MIN:
        return NoiseStep(current, f, g, True)
    step = np.linalg.solve(jac, [f, g])
    p_tp, p_fp = np.clip([current.p_tp - damping * step[0], current.p_fp - damping * step[1]], EPS, 1.0 - EPS)
    return NoiseStep(NoiseModel(float(p_tp), float(p_fp)), f, g, False)


@dataclass(frozen=True)
class EmConfig:
    rounds: int = 50
    bp: BpConfig = BpConfig(max_iterations=200)
    estimate_rho: bool = True
    estimate_noise: bool = True
    tol: float = 0.0  # stop once no parameter moves more than this (0: run every round)
    newton_damping: float = 1.0  # fraction of the Newton step taken; below 1 damps oscillation

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if not 0.0 < self.newton_damping <= 1.0:
            raise ValueError("newton_damping must lie in (0, 1]")


@dataclass
class EmRound:
    round: int
    rho: float
    p_tp: float
    p_fp: float
    bethe: float
    f: float
    g: float
    stalled: bool
    bp_iterations: int
    bp_converged: bool


@dataclass
class EmTrace:
    rounds: list = field(default_factory=list)

    @property
    def n_stalled(self) -> int:
        return sum(r.stalled for r in self.rounds)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "rho", "pTP", "pFP", "S", "f", "g"])
            for r in self.rounds:
                w.writerow([r.round] + [repr(v) for v in (r.rho, r.p_tp, r.p_fp, r.bethe, r.f, r.g)])


def default_init(d: PoolingDesign, p_tp: float, p_fp: float) -> AssumedParams:
    """Prevalence starts at half the test-to-patient ratio."""
    return AssumedParams.of(min(d.alpha / 2.0, 0.5), p_tp, p_fp)


def run_bp_em(y, d: PoolingDesign, init: AssumedParams, cfg: EmConfig = EmConfig()):
    """Estimate marginals and parameters; returns ``(MarginalEstimate, AssumedParams, EmTrace)``.

    Messages are warm-started from round to round.  The recorded Bethe free
    entropy uses the parameters the round's BP ran with.  The returned
    estimate carries the last round's BP trace when one was requested.
    """
    y = np.asarray(y)
    if y.shape != (d.n_tests,):
        raise ValueError(f"outcomes have shape {y.shape}, design has {d.n_tests} tests")
    for v in (init.rho, init.noise.p_tp, init.noise.p_fp):
        if not 0.0 < v < 1.0:
            raise ValueError("EM initial parameters must lie strictly inside (0, 1)")
    ix = EdgeIndex.from_design(d)
    rho, noise = float(init.rho), init.noise
    state = initial_state(ix.n_edges, cfg.bp)
    trace = EmTrace()
    theta = np.full(d.n_patients, rho)
    conv, iters, bp_trace = np.array([True]), np.array([0]), []
    for s in range(1, cfg.rounds + 1):
        prior = np.full(d.n_patients, rho)
        u_e, w_e = edge_likelihoods(y, noise, ix)
        try:
            state, conv, iters, bp_trace = iterate(ix, u_e, w_e, prior, cfg.bp, state)
            theta = posterior(ix, state.theta_to_patient, prior)
            bethe = bethe_free_entropy(state, y, ix, AssumedParams(rho, noise))
        except DegenerateError as exc:
            raise DegenerateError(f"EM round {s}: {exc}") from exc
        new_rho = float(np.clip(m_step_rho(theta), EPS, 1.0 - EPS)) if cfg.estimate_rho else rho
        if cfg.estimate_noise:
            step = m_step_noise(pool_aggregates(state, y, ix, noise), y, noise, cfg.newton_damping)
        else:
            f, g = noise_gradient(pool_aggregates(state, y, ix, noise), y)
            step = NoiseStep(noise, f, g, False)
        moved = max(abs(new_rho - rho), abs(step.noise.p_tp - noise.p_tp), abs(step.noise.p_fp - noise.p_fp))
        rho, noise = new_rho, step.noise
        trace.rounds.append(EmRound(
            s, rho, noise.p_tp, noise.p_fp, bethe, step.f, step.g, step.stalled,
            int(iters[0]), bool(conv[0]),
        ))
        if moved <= cfg.tol and conv[0]:
            break
    est = MarginalEstimate(theta, log_odds(theta), bool(conv[0]), int(iters[0]), state, bp_trace)
    return est, AssumedParams(rho, noise), trace
