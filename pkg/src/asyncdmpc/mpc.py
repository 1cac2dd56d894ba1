"""Problem assembly, closed-loop driver, and feasibility check machinery.

build_problem turns a validated configuration into per-subsystem runtime
data (condensed matrices, terminal set, stacked feasible polytope, prepared
QP solver). closed_loop_run drives the receding-horizon loop: at each step
every subsystem resets its dual iterate, the network solves the coupled
problem to distributed termination, and the first input block is applied.
verify_feasibility replays a finished trace against the tightened global
bound and the one-step-shifted candidate solution.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .dualgrad import ApdgNode
from .model import condense
from .netsim import run_apdg
from .polytope import terminal_set
from .qp import Infeasible, PreparedQp, centralized_solve


class ConfigInvalid(ValueError):
    """Configuration violates a structural or numerical requirement."""


class InitialStateInfeasible(RuntimeError):
    """No feasible stacked input exists at the initial state."""


def tightened_bound(N, M, rho, eps):
    """Per-block right-hand side of the tightened global constraint.

    Block l (0-based) is (1 - M*(l+1)*eps) * ones(rho), strictly decreasing
    in l, equal to the untightened bound 1 when eps = 0.
    """
    blocks = [(1.0 - M * (l + 1) * eps) * np.ones(rho) for l in range(N)]
    return np.concatenate(blocks)


@dataclass
class DmpcConfig:
    """Everything needed to assemble and run one closed-loop experiment."""

    subsystems: list
    N: int
    gamma: float
    eps: float
    eps_b: float
    eps_g: float
    graph: object
    schedule: object
    beta: float
    seed: int
    T_sim: int
    x0: np.ndarray
    warm_start: bool = False
    iteration_cap: int = 100000

    @property
    def M(self):
        return len(self.subsystems)

    @property
    def sigma(self):
        return 1.0 / self.M - (self.N + 1) * self.gamma

    def validate(self):
        M = self.M
        if M < 1:
            raise ConfigInvalid("need at least one subsystem")
        if self.N < 1:
            raise ConfigInvalid("horizon N must be at least 1")
        if self.T_sim < 0:
            raise ConfigInvalid("T_sim must be nonnegative")
        for idx, sys in enumerate(self.subsystems):
            try:
                sys.validate()
            except ValueError as exc:
                raise ConfigInvalid("subsystem %d: %s" % (idx + 1, exc))
        rhos = {sys.rho for sys in self.subsystems}
        if len(rhos) != 1:
            raise ConfigInvalid("all subsystems must share one global-"
                                "constraint row count, got %s" % sorted(rhos))
        if getattr(self.graph, "M", None) != M:
            raise ConfigInvalid("graph has %s nodes, config has %d"
                                % (getattr(self.graph, "M", None), M))
        if not 0.0 < self.gamma < 1.0 / (M * (self.N + 1)):
            raise ConfigInvalid("gamma must lie in (0, 1/(M(N+1))) = (0, %g)"
                                % (1.0 / (M * (self.N + 1))))
        if not 0.0 < self.eps <= self.gamma:
            raise ConfigInvalid("eps must lie in (0, gamma]")
        if not 0.0 < self.eps_b < self.eps:
            raise ConfigInvalid("eps_b must lie in (0, eps)")
        if self.eps_g <= 0.0:
            raise ConfigInvalid("eps_g must be positive")
        if self.sigma <= 0.0:
            raise ConfigInvalid("terminal scaling 1/M - (N+1)*gamma must be "
                                "positive, got %g" % self.sigma)
        if self.beta <= 0.0:
            raise ConfigInvalid("beta must be positive")
        n_total = sum(sys.n for sys in self.subsystems)
        x0 = np.asarray(self.x0, dtype=float).ravel()
        if x0.size != n_total:
            raise ConfigInvalid("x0 has %d entries, subsystems need %d"
                                % (x0.size, n_total))
        return self

    def split_state(self, x):
        """Cut a stacked state vector into per-subsystem pieces."""
        x = np.asarray(x, dtype=float).ravel()
        out, at = [], 0
        for sys in self.subsystems:
            out.append(x[at:at + sys.n])
            at += sys.n
        return out


class SubsystemRuntime:
    """Condensed matrices, terminal set and prepared solver for one node."""

    def __init__(self, sys, N, sigma):
        self.sys = sys
        self.cp = condense(sys, N)
        self.Xf = terminal_set(sys, self.cp.K, sigma)
        n, m, rho = sys.n, sys.m, sys.rho
        nx = sys.X.nrows
        Gx = np.zeros((N * nx + self.Xf.nrows, (N + 1) * n))
        hx = np.zeros(N * nx + self.Xf.nrows)
        for l in range(N):
            Gx[l * nx:(l + 1) * nx, l * n:(l + 1) * n] = sys.X.G
            hx[l * nx:(l + 1) * nx] = sys.X.h
        Gx[N * nx:, N * n:] = self.Xf.G
        hx[N * nx:] = self.Xf.h
        self.Gx_big = Gx
        self.hx_big = hx
        self.GxA = Gx @ self.cp.Abar
        self.Gu_big = np.kron(np.eye(N), sys.U.G)
        self.hu_big = np.kron(np.ones(N), sys.U.h)
        self.G_loc = np.vstack([Gx @ self.cp.Bbar, self.Gu_big])
        self.solver = PreparedQp(self.cp.CostW, self.G_loc)
        self.A_K = sys.A + sys.B @ self.cp.K

    def local_h(self, x):
        """Right-hand side of the stacked local constraints at state x."""
        return np.concatenate([self.hx_big - self.GxA @ x, self.hu_big])

    def in_terminal_set(self, x, tol=1e-9):
        return self.Xf.contains(x, tol)


@dataclass
class DmpcProblem:
    """Assembled per-subsystem runtimes plus the shared tightened bound."""

    runtimes: list
    b_eps: np.ndarray
    M: int
    N: int
    rho: float
    sigma: float
    theta: float
    Lip: float


def build_problem(cfg):
    """Condense every subsystem and realize its stacked feasible set."""
    cfg.validate()
    sigma = cfg.sigma
    runtimes = [SubsystemRuntime(sys, cfg.N, sigma) for sys in cfg.subsystems]
    rho = cfg.subsystems[0].rho
    b_eps = tightened_bound(cfg.N, cfg.M, rho, cfg.eps)
    theta = min(rt.cp.theta for rt in runtimes)
    Lip = max(rt.cp.Lip for rt in runtimes)
    return DmpcProblem(runtimes=runtimes, b_eps=b_eps, M=cfg.M, N=cfg.N,
                       rho=rho, sigma=sigma, theta=theta, Lip=Lip)


def make_nodes(problem, cfg, xs, lam0s=None):
    """Fresh dual-iteration runtimes for one solve, one per subsystem."""
    nodes = []
    for i, rt in enumerate(problem.runtimes):
        lam0 = None if lam0s is None else lam0s[i]
        nodes.append(ApdgNode(rt.cp, xs[i], None, problem.b_eps, problem.M,
                              beta=cfg.beta, eps=cfg.eps, eps_b=cfg.eps_b,
                              eps_g=cfg.eps_g, lam0=lam0, solver=rt.solver,
                              h=rt.local_h(xs[i])))
    return nodes


def solve_step(problem, cfg, x, mode="async", seed=None, stop=None,
               lam0s=None, track_conservation=False):
    """Run one distributed dual solve at the stacked state x."""
    xs = cfg.split_state(x)
    nodes = make_nodes(problem, cfg, xs, lam0s)
    if seed is None:
        seed = cfg.seed
    if stop is None:
        stop = ("termination", cfg.iteration_cap)
    return run_apdg(cfg.graph, nodes, cfg.schedule, seed=seed, stop=stop,
                    mode=mode, track_conservation=track_conservation)


@dataclass
class MpcTrace:
    """Closed-loop record: one row per control step plus the final state."""

    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u0: list = field(default_factory=list)
    u_full: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    solve_seconds: list = field(default_factory=list)
    wall_seconds: list = field(default_factory=list)
    g_applied: list = field(default_factory=list)
    g_pred: list = field(default_factory=list)
    J_local: list = field(default_factory=list)
    lam_spread: list = field(default_factory=list)
    terminal_flags: list = field(default_factory=list)
    x_final: np.ndarray = None
    mode: str = "async"

    def to_csv(self, path, subsystems):
        import csv

        header = ["t"]
        for i, sys in enumerate(subsystems):
            header += ["x%d_%d" % (i + 1, c + 1) for c in range(sys.n)]
        for i, sys in enumerate(subsystems):
            header += ["u%d_%d" % (i + 1, c + 1) for c in range(sys.m)]
        rho = len(self.g_applied[0]) if self.g_applied else subsystems[0].rho
        header += ["g_%d" % (r + 1) for r in range(rho)]
        header += ["iters_%d" % (i + 1) for i in range(len(subsystems))]
        header += ["solve_seconds"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self.t)):
                row = [self.t[k]]
                row += ["%.17g" % v for v in np.concatenate(self.x[k])]
                row += ["%.17g" % v for v in np.concatenate(self.u0[k])]
                row += ["%.17g" % v for v in self.g_applied[k]]
                row += [str(it) for it in self.iterations[k]]
                row += ["%.17g" % self.solve_seconds[k]]
                w.writerow(row)
        return path


def closed_loop_run(cfg, mode="async", problem=None):
    """Receding-horizon loop over T_sim steps at the configured schedule.

    Each step resets the dual iterates (unless warm_start is set), solves
    the coupled problem over the simulated network to distributed
    termination, applies the first input block of every subsystem, and
    advances the nominal dynamics.
    """
    if problem is None:
        problem = build_problem(cfg)
    xs = cfg.split_state(cfg.x0)
    x_stacked = np.concatenate(xs)
    try:
        centralized_solve(problem.runtimes, x_stacked, problem.b_eps)
    except Infeasible as exc:
        raise InitialStateInfeasible("initial state admits no feasible "
                                     "stacked input: %s" % exc)

    trace = MpcTrace(mode=mode)
    lam0s = None
    for t in range(cfg.T_sim):
        wall0 = time.perf_counter()
        res = solve_step(problem, cfg, np.concatenate(xs), mode=mode,
                         seed=cfg.seed + t, lam0s=lam0s)
        wall1 = time.perf_counter()

        u0s, lams, g_sum, J_loc, flags = [], [], None, [], []
        for i, rt in enumerate(problem.runtimes):
            st = res.states[i]
            m = rt.sys.m
            u0s.append(st.u[:m].copy())
            lams.append(st.lam.copy())
            gi = rt.cp.coupling_output(xs[i], st.u)
            g_sum = gi if g_sum is None else g_sum + gi
            J_loc.append(rt.cp.cost(xs[i], st.u))
            flags.append(rt.in_terminal_set(xs[i]))
        g_now = np.zeros(problem.runtimes[0].sys.rho)
        for i, rt in enumerate(problem.runtimes):
            g_now = g_now + rt.sys.Cg @ xs[i] + rt.sys.Dg @ u0s[i]
        spread = 0.0
        for i in range(problem.M):
            for j in range(i + 1, problem.M):
                spread = max(spread, float(np.max(np.abs(lams[i] - lams[j]))))

        trace.t.append(t)
        trace.x.append([x.copy() for x in xs])
        trace.u0.append(u0s)
        trace.u_full.append([res.states[i].u.copy() for i in range(problem.M)])
        trace.lam.append(lams)
        trace.iterations.append(list(res.iterations))
        trace.solve_seconds.append(res.t_done)
        trace.wall_seconds.append(wall1 - wall0)
        trace.g_applied.append(g_now)
        trace.g_pred.append(g_sum)
        trace.J_local.append(J_loc)
        trace.lam_spread.append(spread)
        trace.terminal_flags.append(flags)

        if cfg.warm_start:
            lam0s = lams
        xs = [rt.sys.A @ xs[i] + rt.sys.B @ u0s[i]
              for i, rt in enumerate(problem.runtimes)]
    trace.x_final = np.concatenate(xs)
    return trace


def candidate_shift(u_prev, x_traj, K, A_K):
    """One-step-shifted candidate: drop the first input, append the
    terminal feedback, and shift the predicted trajectory accordingly."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    m, n = K.shape
    x_traj = np.asarray(x_traj, dtype=float).ravel()
    u_prev = np.asarray(u_prev, dtype=float).ravel()
    N = x_traj.size // n - 1
    if u_prev.size != N * m:
        raise ValueError("u_prev has %d entries, expected %d"
                         % (u_prev.size, N * m))
    xN = x_traj[N * n:]
    u_plus = np.concatenate([u_prev[m:], K @ xN])
    x_plus = np.concatenate([x_traj[n:], A_K @ xN])
    return u_plus, x_plus


def verify_feasibility(trace, problem, cfg, tol=1e-9):
    """Replay a closed-loop trace against the feasibility guarantees.

    Checks, at every recorded step: (a) the summed coupling output of the
    accepted solutions stays below the tightened bound with the allowed
    eps*M margin, (b) the applied inputs satisfy the original global
    constraint, and (c) the one-step-shifted candidate is feasible for the
    successor state, both locally and against the tightened bound.
    Returns a report dict; an empty 'violations' list means all checks hold.
    """
    violations = []
    margins = {"pred": -np.inf, "applied": -np.inf,
               "cand_local": -np.inf, "cand_global": -np.inf}
    T = len(trace.t)
    epsM = cfg.eps * problem.M
    for k in range(T):
        t = trace.t[k]
        over = float(np.max(trace.g_pred[k] - problem.b_eps - epsM))
        margins["pred"] = max(margins["pred"], over)
        if over > tol:
            violations.append((t, "tightened-bound", over))
        over = float(np.max(trace.g_applied[k] - 1.0))
        margins["applied"] = max(margins["applied"], over)
        if over > tol:
            violations.append((t, "global-constraint", over))

        if k + 1 < T:
            x_next = trace.x[k + 1]
        elif trace.x_final is not None:
            x_next = cfg.split_state(trace.x_final)
        else:
            continue
        g_cand = None
        for i, rt in enumerate(problem.runtimes):
            x_traj = rt.cp.predict_states(trace.x[k][i], trace.u_full[k][i])
            u_plus, _ = candidate_shift(trace.u_full[k][i], x_traj,
                                        rt.cp.K, rt.A_K)
            over = float(np.max(rt.G_loc @ u_plus - rt.local_h(x_next[i])))
            margins["cand_local"] = max(margins["cand_local"], over)
            if over > tol:
                violations.append((t, "candidate-local-%d" % (i + 1), over))
            gi = rt.cp.coupling_output(x_next[i], u_plus)
            g_cand = gi if g_cand is None else g_cand + gi
        over = float(np.max(g_cand - problem.b_eps))
        margins["cand_global"] = max(margins["cand_global"], over)
        if over > tol:
            violations.append((t, "candidate-tightened-bound", over))
    return {"violations": violations, "steps_checked": T, "margins": margins}
