"""Command-line entry points (``grouptesting <command> ...``)."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace

import numpy as np

from . import experiments
from .bootstrap import bootstrap_estimate, write_bootstrap_csv
from .bp import AssumedParams, BpConfig, map_estimate, run_bp
from .em import EmConfig, default_init, run_bp_em
from .errors import ConstructionError, CostGuardError, DegenerateError, DesignError
from .exact import DEFAULT_MAX_PATIENTS, exact_marginals
from .hbp import DEFAULT_NODES, MODES, BetaHyperprior, HbpConfig, run_hbp
from .metrics import magnetizations, tp_fp
from .pooling import generate_design, read_design, write_design
from .synth import NoiseModel, generate_states, observe, read_outcomes, read_states, true_pool_states, write_outcomes, write_states

EXIT_NUMERIC = 1
EXIT_PARTIAL = 2


def _probability(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return v


def _add_problem(p, need_rho=True):
    p.add_argument("--design", required=True, help="design file")
    p.add_argument("--outcomes", required=True, help="outcomes CSV (test,y0,y)")
    if need_rho:
        p.add_argument("--rho", type=_probability, required=True, help="assumed prevalence")
    p.add_argument("--p-tp", type=_probability, required=True, help="assumed true-positive probability")
    p.add_argument("--p-fp", type=_probability, required=True, help="assumed false-positive probability")
    p.add_argument("--states", help="true states CSV; prints TP/FP and magnetizations to stderr")
    p.add_argument("-o", "--output", help="write per-patient results here instead of stdout")


def _add_bp(p, max_iterations=1000):
    p.add_argument("--seed", type=int, default=None, help="message initialization seed")
    p.add_argument("--damping", type=float, default=0.1)
    p.add_argument("--max-iter", type=_positive_int, default=max_iterations)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--trace", help="write per-iteration iter,max_delta CSV here")


def _bp_config(args) -> BpConfig:
    return BpConfig(
        max_iterations=args.max_iter, damping=args.damping, convergence_tol=args.tol,
        seed=args.seed, record_trace=bool(getattr(args, "trace", None)),
    )


def _load(args):
    d = read_design(args.design)
    y, _ = read_outcomes(args.outcomes)
    if y.shape != (d.n_tests,):
        raise DesignError(f"outcomes file has {y.size} tests, design has {d.n_tests}")
    return d, y


def _open_out(args):
    return open(args.output, "w", newline="") if args.output else sys.stdout


def _write_marginals(args, est) -> None:
    fh = _open_out(args)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient", "theta", "tau", "map"])
        calls = map_estimate(est)
        for i, (t, tau) in enumerate(zip(est.theta_hat, est.tau_hat)):
            w.writerow([i + 1, repr(float(t)), repr(float(tau)), int(calls[i])])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "max_delta"])
        for t, delta in trace:
            w.writerow([t, repr(float(delta))])


def _report_truth(args, calls, theta) -> None:
    if not args.states:
        return
    x = read_states(args.states)
    tp, fp = tp_fp(x, calls)
    mp, mm = magnetizations(x, theta)
    print(f"TP={tp:.6g} FP={fp:.6g} m_plus={mp:.6g} m_minus={mm:.6g}", file=sys.stderr)


def _status(est) -> None:
    state = "converged" if est.converged else "did not converge"
    print(f"BP {state} after {est.iterations_used} iterations", file=sys.stderr)


# -- commands -----------------------------------------------------------------

def cmd_design(args) -> int:
    d = generate_design(args.patients, args.tests, args.group_size, seed=args.seed)
    write_design(d, args.output)
    return 0


def cmd_simulate(args) -> int:
    d = read_design(args.design)
    ss = np.random.SeedSequence(args.seed)
    x_seed, y_seed = ss.spawn(2)
    x = generate_states(d.n_patients, args.rho, seed=x_seed)
    y0 = true_pool_states(d, x)
    y = observe(y0, NoiseModel(args.p_tp, args.p_fp), seed=y_seed)
    write_states(x, args.states)
    write_outcomes(y, args.outcomes, y0=y0)
    return 0


def cmd_decode_bp(args) -> int:
    d, y = _load(args)
    est = run_bp(y, d, AssumedParams.of(args.rho, args.p_tp, args.p_fp), _bp_config(args))
    _status(est)
    if args.trace:
        _write_trace(args.trace, est.trace)
    _write_marginals(args, est)
    _report_truth(args, map_estimate(est), est.theta_hat)
    return 0


def cmd_decode_exact(args) -> int:
    d, y = _load(args)
    est = exact_marginals(y, d, AssumedParams.of(args.rho, args.p_tp, args.p_fp), args.max_patients, args.workers)
    _write_marginals(args, est)
    _report_truth(args, map_estimate(est), est.theta_hat)
    return 0


def cmd_bootstrap(args) -> int:
    d, y = _load(args)
    params = AssumedParams.of(args.rho, args.p_tp, args.p_fp)
    cfg = replace(_bp_config(args), seed=None, record_trace=False)
    s = bootstrap_estimate(
        y, d, params, cfg, args.n_bootstrap, args.seed, z=args.z,
        keep_samples=args.interval == "percentile",
    )
    if s.n_unconverged:
        print(f"{s.n_unconverged} of {s.n_bootstrap} bootstrap runs did not converge", file=sys.stderr)
    fh = _open_out(args)
    try:
        write_bootstrap_csv(s, fh, args.interval)
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.states:
        x = read_states(args.states)
        tp, fp = tp_fp(x, s.map_decisions)
        btp, bfp = tp_fp(x, s.decisions)
        print(f"MAP TP={tp:.6g} FP={fp:.6g}  boot TP={btp:.6g} FP={bfp:.6g}", file=sys.stderr)
    return 0


def cmd_em(args) -> int:
    d, y = _load(args)
    init = default_init(d, args.p_tp, args.p_fp)
    if args.rho is not None:
        init = AssumedParams.of(args.rho, args.p_tp, args.p_fp)
    cfg = EmConfig(
        rounds=args.rounds, bp=_bp_config(args),
        estimate_rho=not args.fix_rho, estimate_noise=not args.fix_noise,
        newton_damping=args.newton_damping,
    )
    est, fitted, trace = run_bp_em(y, d, init, cfg)
    print(f"rho={fitted.rho!r} pTP={fitted.noise.p_tp!r} pFP={fitted.noise.p_fp!r}", file=sys.stderr)
    if trace.n_stalled:
        print(f"{trace.n_stalled} noise steps stalled on a singular Jacobian", file=sys.stderr)
    if args.em_trace:
        trace.write_csv(args.em_trace)
    if args.trace:
        _write_trace(args.trace, est.trace)
    _write_marginals(args, est)
    _report_truth(args, map_estimate(est), est.theta_hat)
    return 0


def cmd_hbp(args) -> int:
    d, y = _load(args)
    cfg = HbpConfig(bp=_bp_config(args), mode=args.hbp_mode, nodes=args.quad_nodes,
                    node_damping=args.node_damping)
    res = run_hbp(y, d, NoiseModel(args.p_tp, args.p_fp), BetaHyperprior(args.hyper_a, args.hyper_b), cfg)
    _status(res.estimate)
    print(f"rho_hat={res.rho_hat!r}", file=sys.stderr)
    if res.saddle_flagged:
        print(f"{res.saddle_flagged} sweeps hit a degenerate saddle point", file=sys.stderr)
    if args.trace:
        _write_trace(args.trace, res.estimate.trace)
    _write_marginals(args, res.estimate)
    _report_truth(args, map_estimate(res.estimate), res.estimate.theta_hat)
    return 0


def cmd_sweep(args) -> int:
    s = experiments.load_scenario(args.scenario)
    if args.replicates is not None:
        s = replace(s, replicates=args.replicates)
    if args.timing:
        s = replace(s, timing=True)
    out = args.output or s.output
    if not out:
        raise experiments.ScenarioError("no output path: pass -o or set output in the scenario")
    result = experiments.run_scenario(s, workers=args.workers)
    experiments.write_sweep(result, out, args.per_replicate)
    if result.failures:
        manifest = experiments.failure_manifest_path(out)
        print(f"{len(result.failures)} replicate(s) failed; see {manifest}", file=sys.stderr)
        return EXIT_PARTIAL
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grouptesting", description="Group testing by belief propagation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="generate a random regular pooling design")
    p.add_argument("--patients", "-N", type=_positive_int, required=True)
    p.add_argument("--tests", "-M", type=_positive_int, required=True)
    p.add_argument("--group-size", "-G", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", help="draw infection states and noisy outcomes for a design")
    p.add_argument("--design", required=True)
    p.add_argument("--rho", type=_probability, required=True)
    p.add_argument("--p-tp", type=_probability, required=True)
    p.add_argument("--p-fp", type=_probability, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--states", required=True, help="output states CSV")
    p.add_argument("--outcomes", required=True, help="output outcomes CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("decode-bp", help="posterior marginals by belief propagation")
    _add_problem(p)
    _add_bp(p)
    p.set_defaults(func=cmd_decode_bp)

    p = sub.add_parser("decode-exact", help="exact posterior marginals by enumeration (small N)")
    _add_problem(p)
    p.add_argument("--max-patients", type=_positive_int, default=DEFAULT_MAX_PATIENTS)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_decode_exact)

    p = sub.add_parser("bootstrap", help="bootstrap standard errors and relaxed calls")
    _add_problem(p)
    _add_bp(p)
    p.add_argument("--n-bootstrap", type=_positive_int, default=1000)
    p.add_argument("--z", type=float, default=1.959963984540054)
    p.add_argument("--interval", choices=("normal", "percentile"), default="normal")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("em", help="estimate prevalence and test error rates by BP + EM")
    p.add_argument("--design", required=True)
    p.add_argument("--outcomes", required=True)
    p.add_argument("--rho", type=_probability, default=None, help="initial prevalence (default: alpha / 2)")
    p.add_argument("--p-tp", type=_probability, required=True, help="initial true-positive probability")
    p.add_argument("--p-fp", type=_probability, required=True, help="initial false-positive probability")
    p.add_argument("--rounds", type=_positive_int, default=50)
    p.add_argument("--newton-damping", type=float, default=1.0, help="fraction of each Newton step on the noise rates")
    p.add_argument("--fix-rho", action="store_true", help="keep the prevalence at its initial value")
    p.add_argument("--fix-noise", action="store_true", help="keep the test error rates at their initial values")
    p.add_argument("--em-trace", help="write round,rho,pTP,pFP,S,f,g CSV here")
    p.add_argument("--states")
    p.add_argument("-o", "--output")
    _add_bp(p, max_iterations=200)
    p.set_defaults(func=cmd_em)

    p = sub.add_parser("hbp", help="decode with a beta hyperprior on the prevalence")
    _add_problem(p, need_rho=False)
    _add_bp(p)
    p.add_argument("--hyper-a", type=float, default=1.0)
    p.add_argument("--hyper-b", type=float, default=1.0)
    p.add_argument("--hbp-mode", choices=MODES, default="quadrature")
    p.add_argument("--quad-nodes", type=_positive_int, default=DEFAULT_NODES)
    p.add_argument("--node-damping", type=float, default=0.5, help="damping of the prevalence messages")
    p.set_defaults(func=cmd_hbp)

    p = sub.add_parser("sweep", help="run a scenario file and write aggregated CSV")
    p.add_argument("scenario")
    p.add_argument("-o", "--output")
    p.add_argument("--replicates", type=_positive_int, default=None, help="override the scenario's replicate count")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--timing", action="store_true", help="record decoder wall-clock (output is then not reproducible)")
    p.add_argument("--per-replicate", help="also write one row per replicate here")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except experiments.ScenarioError as exc:
        print(f"error: scenario: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CostGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DesignError, ConstructionError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
