"""Damped belief propagation for noisy group testing.

Messages live on the edges of the test/patient factor graph, stored as flat
arrays in pool-major edge order (edge ``mu * N_G + k`` joins test ``mu`` and its
``k``-th member).  One sweep updates every edge from the previous sweep's
messages (flooding schedule).  The sweep itself is a compiled loop in
``_kernels``; leave-one-out products are formed from prefix and suffix
products, which stay exact when a factor is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import DegenerateError
from .pooling import PoolingDesign
from .synth import NoiseModel

TAU_CLIP = 1e-12
INIT_MODES = ("uniform", "half", "provided")


@dataclass(frozen=True)
class AssumedParams:
    """Model parameters plugged into the posterior (prevalence and test noise)."""

    rho: float
    noise: NoiseModel

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho={self.rho} outside [0, 1]")

    @classmethod
    def of(cls, rho: float, p_tp: float, p_fp: float) -> "AssumedParams":
        return cls(rho, NoiseModel(p_tp, p_fp))


@dataclass
class MessageState:
    theta_to_test: np.ndarray
    theta_to_patient: np.ndarray

    def copy(self) -> "MessageState":
        return MessageState(self.theta_to_test.copy(), self.theta_to_patient.copy())


@dataclass(frozen=True)
class BpConfig:
    max_iterations: int = 1000
    damping: float = 0.1
    init_mode: str = "uniform"
    convergence_tol: float = 1e-8
    seed: object = None
    initial: MessageState | None = None
    check_ranges: bool = False
    record_trace: bool = False

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping={self.damping} outside (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.init_mode == "provided" and self.initial is None:
            raise ValueError("init_mode='provided' needs initial messages")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be nonnegative")

    def with_seed(self, seed) -> "BpConfig":
        return replace(self, seed=seed)


@dataclass
class MarginalEstimate:
    theta_hat: np.ndarray
    tau_hat: np.ndarray
    converged: bool = True
    iterations_used: int = 0
    messages: MessageState | None = None
    trace: list = field(default_factory=list)


def log_odds(theta) -> np.ndarray:
    """Log-odds of probabilities clipped to ``[1e-12, 1 - 1e-12]`` so the result is finite."""
    t = np.clip(np.asarray(theta, dtype=float), TAU_CLIP, 1.0 - TAU_CLIP)
    return np.log(t) - np.log1p(-t)


class EdgeIndex:
    """Edge bookkeeping for one factor graph, or a disjoint union of several.

    Patient ``i`` owns edges ``pat_edges[pat_ptr[i]:pat_ptr[i + 1]]`` in
    increasing test order.  Component ids let a batched union of independent
    graphs converge and freeze one graph at a time.
    """

    def __init__(self, pools, n_patients: int, patient_bounds=None, test_bounds=None):
        pools = np.asarray(pools, dtype=np.int64)
        self.n_tests, self.group_size = pools.shape
        self.n_patients = n_patients
        self.n_edges = pools.size
        self.edge_patient = pools.ravel()
        self.edge_test = np.repeat(np.arange(self.n_tests), self.group_size)
        self.pat_edges = np.argsort(self.edge_patient, kind="stable")
        self.degree = np.bincount(self.edge_patient, minlength=n_patients)
        self.pat_ptr = np.concatenate(([0], np.cumsum(self.degree))).astype(np.int64)
        self.patient_bounds = np.array([0, n_patients] if patient_bounds is None else patient_bounds)
        self.test_bounds = np.array([0, self.n_tests] if test_bounds is None else test_bounds)
        self.edge_bounds = self.test_bounds * self.group_size
        self.comp_of_test = np.repeat(np.arange(self.n_components), np.diff(self.test_bounds))
        self.comp_of_patient = np.repeat(np.arange(self.n_components), np.diff(self.patient_bounds))

    @classmethod
    def from_design(cls, d: PoolingDesign) -> "EdgeIndex":
        return cls(d.patients_of_test, d.n_patients)

    @classmethod
    def union(cls, designs) -> "EdgeIndex":
        """Disjoint union; component ``b`` keeps its patients and tests contiguous."""
        p_bounds = np.concatenate(([0], np.cumsum([d.n_patients for d in designs])))
        t_bounds = np.concatenate(([0], np.cumsum([d.n_tests for d in designs])))
        pools = np.concatenate(
            [np.asarray(d.patients_of_test) + off for d, off in zip(designs, p_bounds[:-1])]
        )
        return cls(pools, int(p_bounds[-1]), p_bounds, t_bounds)

    @property
    def n_components(self) -> int:
        return len(self.test_bounds) - 1

    def describe_edge(self, e: int) -> str:
        return f"edge (test {self.edge_test[e] + 1}, patient {self.edge_patient[e] + 1})"

    def full_products(self, tt):
        """Per-patient products of incoming ``tt`` and of ``1 - tt``."""
        p = np.empty(self.n_patients)
        q = np.empty(self.n_patients)
        _kernels.patient_full_products(self.pat_ptr, self.pat_edges, tt, p, q)
        return p, q

    def pool_complements(self, th):
        """``prod_{i in pool} (1 - theta_{i -> mu})`` for every test."""
        out = np.empty(self.n_tests)
        _kernels.pool_complement_products(self.group_size, th, out)
        return out


def edge_likelihoods(y, noise: NoiseModel, ix: EdgeIndex):
    u, w = noise.u_w(y)
    return u[ix.edge_test], w[ix.edge_test]


class Sweeper:
    """Reusable buffers for repeated damped sweeps over one ``EdgeIndex``."""

    def __init__(self, ix: EdgeIndex, damping: float):
        self.ix = ix
        self.damping = float(damping)
        self.th_out = np.empty(ix.n_edges)
        self.tt_out = np.empty(ix.n_edges)
        self.delta = np.zeros(ix.n_components)

    def __call__(self, th, tt, u_e, w_e, prior, active):
        """Return damped ``(theta_to_test, theta_to_patient, per-component change)``."""
        ix = self.ix
        bad = _kernels.damped_sweep(
            ix.group_size, ix.pat_ptr, ix.pat_edges, th, tt, u_e, w_e, prior,
            self.damping, ix.comp_of_test, ix.comp_of_patient, active,
            self.th_out, self.tt_out, self.delta,
        )
        if bad >= 0:
            raise DegenerateError("zero message normalizer", ix.describe_edge(bad))
        th_new, self.th_out = self.th_out, th
        tt_new, self.tt_out = self.tt_out, tt
        return th_new, tt_new, self.delta


def posterior(ix: EdgeIndex, tt, prior):
    """Per-patient infection probability from incoming messages and a per-patient prior."""
    p_full, q_full = ix.full_products(tt)
    num = prior * p_full
    den = num + (1.0 - prior) * q_full
    if not den.all():
        i = int(np.flatnonzero(den == 0)[0])
        raise DegenerateError("zero marginal normalizer", f"patient {i + 1}")
    return num / den


def initial_state(n_edges: int, cfg: BpConfig) -> MessageState:
    if cfg.init_mode == "provided":
        init = cfg.initial
        if init.theta_to_test.shape != (n_edges,) or init.theta_to_patient.shape != (n_edges,):
            raise ValueError(f"provided messages do not match {n_edges} edges")
        return init.copy()
    if cfg.init_mode == "half":
        return MessageState(np.full(n_edges, 0.5), np.full(n_edges, 0.5))
    rng = np.random.default_rng(cfg.seed)
    return MessageState(rng.random(n_edges), rng.random(n_edges))


def _check_range(*arrays):
    for a in arrays:
        if not ((a >= 0.0) & (a <= 1.0)).all():
            raise AssertionError("message left [0, 1]")


def iterate(ix: EdgeIndex, u_e, w_e, prior, cfg: BpConfig, state: MessageState):
    """Run damped sweeps until every component converges or hits the cap.

    Components of a batched graph are frozen individually once their largest
    message change drops below the tolerance, so each one follows exactly the
    trajectory it would have on its own.  Returns the final state plus
    per-component convergence flags, iteration counts and the trace of the
    largest change per sweep.
    """
    th = np.array(state.theta_to_test, dtype=float)
    tt = np.array(state.theta_to_patient, dtype=float)
    prior = np.ascontiguousarray(prior, dtype=float)
    step = Sweeper(ix, cfg.damping)
    n_comp = ix.n_components
    active = np.ones(n_comp, dtype=bool)
    iterations = np.zeros(n_comp, dtype=np.int64)
    converged = np.zeros(n_comp, dtype=bool)
    trace = []
    for t in range(1, cfg.max_iterations + 1):
        th, tt, delta = step(th, tt, u_e, w_e, prior, active)
        if cfg.check_ranges:
            _check_range(tt, th)
        iterations[active] = t
        if cfg.record_trace:
            trace.append((t, float(delta[active].max())))
        done = active & (delta < cfg.convergence_tol)
        converged |= done
        active &= ~done
        if not active.any():
            break
    return MessageState(th, tt), converged, iterations, trace


def _estimate(ix, tt, prior, state, converged, iterations, trace) -> MarginalEstimate:
    theta = posterior(ix, tt, prior)
    return MarginalEstimate(theta, log_odds(theta), bool(converged), int(iterations), state, trace)


def _check_inputs(y, d: PoolingDesign):
    y = np.asarray(y)
    if y.shape != (d.n_tests,):
        raise ValueError(f"outcomes have shape {y.shape}, design has {d.n_tests} tests")
    return y


def run_bp_with_priors(y, d: PoolingDesign, noise: NoiseModel, prior, cfg: BpConfig = BpConfig()):
    """BP with a per-patient prior infection probability (vector of length N)."""
    y = _check_inputs(y, d)
    prior = np.asarray(prior, dtype=float)
    if prior.shape != (d.n_patients,):
        raise ValueError("prior must have one entry per patient")
    ix = EdgeIndex.from_design(d)
    u_e, w_e = edge_likelihoods(y, noise, ix)
    state = initial_state(ix.n_edges, cfg)
    if cfg.check_ranges:
        _check_range(state.theta_to_test, state.theta_to_patient)
    state, conv, iters, trace = iterate(ix, u_e, w_e, prior, cfg, state)
    return _estimate(ix, state.theta_to_patient, prior, state, conv[0], iters[0], trace)


def run_bp(y, d: PoolingDesign, params: AssumedParams, cfg: BpConfig = BpConfig()) -> MarginalEstimate:
    """Approximate posterior infection probabilities by damped BP.

    Parameters
    ----------
    y : array of 0/1, length M
        Observed test outcomes.
    d : PoolingDesign
    params : AssumedParams
        Prevalence and noise model assumed by the decoder.
    cfg : BpConfig
        Iteration cap, damping, initialization and early-stop tolerance.

    Returns
    -------
    MarginalEstimate
        ``theta_hat``, clipped log-odds ``tau_hat``, convergence info and the
        final messages.

    Raises
    ------
    DegenerateError
        If a message normalizer vanishes (only at degenerate parameter corners).
    """
    return run_bp_with_priors(y, d, params.noise, np.full(d.n_patients, float(params.rho)), cfg)


def run_bp_many(problems, params: AssumedParams, cfg: BpConfig, seeds) -> list[MarginalEstimate]:
    """Run independent BP problems ``[(y, design), ...]`` as one batched graph.

    Problem ``b`` is initialized from ``seeds[b]`` and its result is identical to
    ``run_bp(y, design, params, cfg.with_seed(seeds[b]))``.
    """
    designs = [d for _, d in problems]
    ys = [_check_inputs(y, d) for y, d in problems]
    ix = EdgeIndex.union(designs)
    u_e, w_e = edge_likelihoods(np.concatenate(ys), params.noise, ix)
    inits = [initial_state(d.n_edges, cfg.with_seed(s)) for d, s in zip(designs, seeds)]
    state = MessageState(
        np.concatenate([s.theta_to_test for s in inits]),
        np.concatenate([s.theta_to_patient for s in inits]),
    )
    prior = np.full(ix.n_patients, float(params.rho))
    state, conv, iters, _ = iterate(ix, u_e, w_e, prior, cfg, state)
    theta = posterior(ix, state.theta_to_patient, prior)
    out = []
    for b in range(len(problems)):
        p0, p1 = ix.patient_bounds[b], ix.patient_bounds[b + 1]
        e0, e1 = ix.edge_bounds[b], ix.edge_bounds[b + 1]
        th = theta[p0:p1].copy()
        msgs = MessageState(state.theta_to_test[e0:e1].copy(), state.theta_to_patient[e0:e1].copy())
        out.append(MarginalEstimate(th, log_odds(th), bool(conv[b]), int(iters[b]), msgs))
    return out


def map_estimate(m) -> np.ndarray:
    """Declare infected iff the infection probability is strictly above 0.5."""
    theta = m.theta_hat if isinstance(m, MarginalEstimate) else np.asarray(m, dtype=float)
    return (theta > 0.5).astype(np.int8)


def threshold_estimate(m, threshold: float) -> np.ndarray:
    """Declare infected iff the log-odds exceed ``threshold`` (0 gives the MAP call)."""
    tau = m.tau_hat if isinstance(m, MarginalEstimate) else log_odds(m)
    return (tau > threshold).astype(np.int8)
