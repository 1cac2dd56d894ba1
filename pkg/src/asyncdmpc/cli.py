"""Command-line front end: condense, terminal-set, solve-once, closed-loop,
certificate.

Every subcommand reads one config file. Randomness is keyed solely by the
config seed (or its --seed override), so repeated invocations write
identical artifacts.
"""

import argparse
import json
import os
import sys
import warnings

import numpy as np

from .config import load_config, serialize_config
from .dualgrad import NoCertificate, rate_certificate
from .mpc import (ConfigInvalid, InitialStateInfeasible, build_problem,
                  closed_loop_run, solve_step, verify_feasibility)
from .netsim import _as_schedule, trace_to_csv, validate_graph
from .qp import Infeasible, centralized_solve
from .report import render_report


def _matstr(mat, indent="      "):
    mat = np.atleast_2d(mat)
    rows = ["  ".join("%10.4f" % v for v in row) for row in mat]
    return ("\n" + indent).join(rows)


def _build_quiet(cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_problem(cfg)


def cmd_condense(cfg, args):
    problem = _build_quiet(cfg)
    if args.json:
        out = {"M": cfg.M, "N": cfg.N, "sigma": problem.sigma,
               "theta": problem.theta, "L": problem.Lip,
               "subsystems": [], "config_normalized": serialize_config(cfg)}
        for i, rt in enumerate(problem.runtimes):
            cp = rt.cp
            out["subsystems"].append({
                "index": i + 1, "n": cp.n, "m": cp.m, "rho": cp.rho,
                "K": cp.K.tolist(), "P": cp.P.tolist(),
                "mu": cp.mu, "ell": cp.ell,
                "theta": cp.theta, "L": cp.Lip})
        print(json.dumps(out, indent=2))
        return 0
    print("condensed %d subsystems at horizon N=%d (sigma=%.6g)"
          % (cfg.M, cfg.N, problem.sigma))
    for i, rt in enumerate(problem.runtimes):
        cp = rt.cp
        print("subsystem %d: n=%d m=%d rho=%d" % (i + 1, cp.n, cp.m, cp.rho))
        print("    K = %s" % _matstr(cp.K, "        "))
        print("    P = %s" % _matstr(cp.P, "        "))
        print("    mu=%.6g  ell=%.6g  theta=%.6g  L=%.6g"
              % (cp.mu, cp.ell, cp.theta, cp.Lip))
    print("aggregate: theta=%.6g  L=%.6g" % (problem.theta, problem.Lip))
    return 0


def cmd_terminal_set(cfg, args):
    problem = _build_quiet(cfg)
    if args.json:
        out = {"sigma": problem.sigma, "subsystems": []}
        for i, rt in enumerate(problem.runtimes):
            out["subsystems"].append({
                "index": i + 1, "rows": rt.Xf.nrows,
                "G": rt.Xf.G.tolist(), "h": rt.Xf.h.tolist()})
        print(json.dumps(out, indent=2))
        return 0
    print("terminal sets at sigma = 1/M - (N+1)*gamma = %.6g"
          % problem.sigma)
    for i, rt in enumerate(problem.runtimes):
        print("subsystem %d: %d halfspaces" % (i + 1, rt.Xf.nrows))
        for r in range(rt.Xf.nrows):
            row = "  ".join("%10.4f" % v for v in rt.Xf.G[r])
            print("    [%s] <= %10.4f" % (row, rt.Xf.h[r]))
    return 0


def _certificate_inputs(cfg, problem):
    diag = validate_graph(cfg.graph)
    sched = _as_schedule(cfg.schedule)
    lo, hi = sched.node_bounds(cfg.M)
    return {"M": cfg.M, "abar": diag["abar"],
            "tau_lo": min(lo), "tau_hi": max(hi),
            "tau_delay": sched.tau_delay,
            "theta": problem.theta, "Lip": problem.Lip,
            "Nrho": cfg.N * problem.rho, "beta": cfg.beta}


def _try_certificate(cfg, problem):
    ins = _certificate_inputs(cfg, problem)
    try:
        cert = rate_certificate(ins["M"], ins["abar"], ins["tau_lo"],
                                ins["tau_hi"], ins["tau_delay"],
                                ins["theta"], ins["Lip"], ins["Nrho"],
                                ins["beta"], c9=0.5 * ins["theta"], pi4=1.5)
        return ins, cert, None
    except NoCertificate as exc:
        return ins, None, str(exc)


def cmd_certificate(cfg, args):
    problem = _build_quiet(cfg)
    ins, cert, reason = _try_certificate(cfg, problem)
    if args.json:
        out = {"inputs": ins,
               "certificate": cert.as_dict() if cert else None,
               "reason": reason}
        print(json.dumps(out, indent=2))
        return 0
    print("certificate inputs: %s" % ", ".join(
        "%s=%.6g" % (k, v) for k, v in ins.items()))
    if cert is None:
        print("no convergence-rate certificate: %s" % reason)
        return 0
    for key, val in cert.as_dict().items():
        print("  %s = %.12g" % (key, val))
    print("R-linear rate delta = %.12g" % cert.delta)
    return 0


def cmd_solve_once(cfg, args):
    problem = _build_quiet(cfg)
    mode = args.mode
    res = solve_step(problem, cfg, cfg.x0, mode=mode, seed=cfg.seed)
    xs = cfg.split_state(cfg.x0)
    J_sum = sum(rt.cp.cost(xs[i], res.states[i].u)
                for i, rt in enumerate(problem.runtimes))
    try:
        central = centralized_solve(problem.runtimes, np.asarray(cfg.x0),
                                    problem.b_eps)
        gap = J_sum - central.value
        J_central = central.value
    except Infeasible:
        raise InitialStateInfeasible("initial state admits no feasible "
                                     "stacked input")
    ins, cert, reason = _try_certificate(cfg, problem)
    trace_path = None
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        trace_path = os.path.join(args.out_dir,
                                  "solve_trace_%s.csv" % mode)
        trace_to_csv(res.trace, trace_path)
    summary = {
        "mode": mode, "seed": cfg.seed,
        "iterations": list(res.iterations),
        "t_done": res.t_done, "events": res.n_events,
        "J_distributed": J_sum, "J_central": J_central, "gap": gap,
        "lambda_norms": [float(np.linalg.norm(res.states[i].lam))
                         for i in range(cfg.M)],
        "all_terminated": all(st.l == 1 for st in res.states),
        "trace_csv": trace_path,
        "certificate": cert.as_dict() if cert else None,
        "no_certificate_reason": reason,
    }
    if args.json:
        print(json.dumps(summary, indent=2))
        return 0
    print("mode=%s seed=%d: iterations per node %s, simulated time %.4f s"
          % (mode, cfg.seed, summary["iterations"], res.t_done))
    print("J distributed = %.10g, central = %.10g, gap = %.3e (eps_g=%g)"
          % (J_sum, J_central, gap, cfg.eps_g))
    print("lambda norms: %s" % ", ".join("%.3e" % v
                                         for v in summary["lambda_norms"]))
    if trace_path:
        print("event trace written to %s" % trace_path)
    if cert is None:
        print("no convergence-rate certificate: %s" % reason)
    else:
        print("certificate delta = %.12g" % cert.delta)
    return 0


def cmd_closed_loop(cfg, args):
    problem = _build_quiet(cfg)
    out_dir = args.out_dir or "asyncdmpc_out"
    os.makedirs(out_dir, exist_ok=True)
    traces = {}
    for mode, label in (("async", "async"), ("synchronous", "sync")):
        traces[label] = closed_loop_run(cfg, mode=mode, problem=problem)
        traces[label].to_csv(os.path.join(out_dir, "trace_%s.csv" % label),
                             cfg.subsystems)

    import csv as _csv

    with open(os.path.join(out_dir, "solve_times.csv"), "w",
              newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["t", "async", "sync"])
        for k in range(cfg.T_sim):
            w.writerow([k, "%.17g" % traces["async"].solve_seconds[k],
                        "%.17g" % traces["sync"].solve_seconds[k]])
    figures = render_report(out_dir, traces)

    rep = verify_feasibility(traces["async"], problem, cfg)
    tr = traces["async"]
    summary = {
        "steps": cfg.T_sim, "out_dir": out_dir,
        "violations": len(rep["violations"]),
        "final_state_norm": (float(np.linalg.norm(tr.x_final))
                             if tr.x_final is not None else None),
        "iterations_async": [sum(it) for it in tr.iterations],
        "solve_seconds_async_total": float(sum(tr.solve_seconds)),
        "solve_seconds_sync_total": float(
            sum(traces["sync"].solve_seconds)),
        "artifacts": [os.path.join(out_dir, p) for p in
                      ("trace_async.csv", "trace_sync.csv",
                       "solve_times.csv")] + figures,
    }
    if args.json:
        print(json.dumps(summary, indent=2))
        return 0
    print("closed loop over %d steps written to %s" % (cfg.T_sim, out_dir))
    print("feasibility violations: %d" % summary["violations"])
    if summary["final_state_norm"] is not None:
        print("final state norm: %.6e" % summary["final_state_norm"])
    print("simulated solve time totals: async %.4f s, sync %.4f s"
          % (summary["solve_seconds_async_total"],
             summary["solve_seconds_sync_total"]))
    for p in summary["artifacts"]:
        print("  wrote %s" % p)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="asyncdmpc",
        description="Distributed MPC with an asynchronous push-sum dual "
                    "gradient solver on a simulated directed network.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode=False, steps=False, out_dir=False):
        sp.add_argument("--config", required=True,
                        help="path to the experiment config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--json", action="store_true",
                        help="machine-readable output")
        if mode:
            sp.add_argument("--mode", choices=("async", "synchronous"),
                            default="async")
        if steps:
            sp.add_argument("--steps", type=int, default=None,
                            help="override the number of closed-loop steps")
        if out_dir:
            sp.add_argument("--out-dir", default=None,
                            help="directory for CSV and figure artifacts")

    common(sub.add_parser("condense",
                          help="DARE gains and condensed problem data"))
    common(sub.add_parser("terminal-set",
                          help="invariant terminal sets per subsystem"))
    common(sub.add_parser("solve-once",
                          help="one distributed dual solve at x0"),
           mode=True, out_dir=True)
    common(sub.add_parser("closed-loop",
                          help="full receding-horizon run in both modes"),
           steps=True, out_dir=True)
    common(sub.add_parser("certificate",
                          help="convergence-rate constants for the config"))
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "steps", None) is not None:
            if args.steps < 0:
                raise ConfigInvalid("--steps must be nonnegative")
            cfg.T_sim = args.steps
        handler = {"condense": cmd_condense,
                   "terminal-set": cmd_terminal_set,
                   "solve-once": cmd_solve_once,
                   "closed-loop": cmd_closed_loop,
                   "certificate": cmd_certificate}[args.command]
        return handler(cfg, args)
    except (ConfigInvalid, InitialStateInfeasible, Infeasible, OSError) as exc:
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
