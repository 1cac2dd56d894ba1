"""Deterministic, seeded discrete-event simulation of the directed network.

Events live on a heap keyed by (time, node, sequence); the sequence number is
a global creation counter, so same-time activations run before the deliveries
they spawn and the whole run is reproducible bit for bit from the seed.
Activations pull a node's buffered messages through its update; deliveries
append envelopes to the receiver's buffer. Message delays are drawn uniformly
from [0, tau] per envelope, or fixed at tau when the schedule says so
(self-messages are instantaneous either way), and monotonized per
sender-receiver pair so a link never reorders. Every node takes its first
update at time zero; later activations are spaced by the schedule.
"""

import csv
import heapq
import math
from dataclasses import dataclass, replace

import numpy as np


class NotStronglyConnected(Exception):
    """The digraph fails forward or reverse reachability."""


class IterationCap(Exception):
    """A node exceeded the per-solve iteration budget without terminating."""


class Digraph:
    """Fixed directed communication graph with implied self-loops.

    Mixing weights are column-stochastic: every node splits its outgoing mass
    evenly over its out-neighborhood (itself included), so the weight a_ij
    applied by receiver i to sender j is 1/|N_out(j)|.

    Nodes are 0-based internally; use from_edges_1based for edge lists written
    in the 1-based convention of configuration files.
    """

    def __init__(self, M, edges):
        M = int(M)
        if M < 1:
            raise ValueError("need at least one node")
        eset = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < M and 0 <= j < M):
                raise ValueError("edge (%d, %d) out of range for M=%d" % (i, j, M))
            eset.add((i, j))
        for i in range(M):
            eset.add((i, i))
        self.M = M
        self.edges = frozenset(eset)
        self.out_neighbors = [sorted(j for (a, j) in eset if a == i) for i in range(M)]
        self.in_neighbors = [sorted(a for (a, j) in eset if j == i) for i in range(M)]
        self.out_degree = [len(self.out_neighbors[i]) for i in range(M)]
        self.weights = np.zeros((M, M))
        for i in range(M):
            for j in self.in_neighbors[i]:
                self.weights[i, j] = 1.0 / self.out_degree[j]

    @classmethod
    def from_edges_1based(cls, M, edges):
        return cls(M, [(i - 1, j - 1) for (i, j) in edges])

    def edges_nonself(self):
        """Sorted 0-based edge list with the implied self-loops stripped."""
        return sorted((i, j) for (i, j) in self.edges if i != j)


def validate_graph(g):
    """Reachability, weight stochasticity, and minimum-weight diagnostics.

    Raises NotStronglyConnected unless every node reaches and is reached by
    node 0 (which on a finite digraph is equivalent to strong connectivity).
    """
    M = g.M

    def reach(neigh):
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for v in frontier:
                for w in neigh[v]:
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            frontier = nxt
        return seen

    fwd = reach(g.out_neighbors)
    bwd = reach(g.in_neighbors)
    if len(fwd) != M or len(bwd) != M:
        missing = sorted(set(range(M)) - (fwd & bwd))
        raise NotStronglyConnected(
            "nodes %s are not on a closed walk through node 0" %
            [v + 1 for v in missing])
    col_sums = g.weights.sum(axis=0)
    residual = float(np.abs(col_sums - 1.0).max())
    abar = float(g.weights[g.weights > 0].min())
    return {"M": M, "strongly_connected": True, "abar": abar,
            "stochastic_residual": residual}


@dataclass
class MessageEnvelope:
    """One directed message; immutable after send apart from bookkeeping."""

    sender: int
    receiver: int
    z: np.ndarray
    y: float
    d: np.ndarray
    s: int
    l: int
    send_time: float
    deliver_time: float
    consumed: bool = False


@dataclass
class Schedule:
    """Activation-interval bounds (seconds), delay bound, per-node speed factors.

    delay_dist picks how internode message delays use tau_delay: "uniform"
    draws each delay from [0, tau_delay], "constant" delivers exactly
    tau_delay late.
    """

    tau_lo: float
    tau_hi: float
    tau_delay: float
    factors: tuple = None
    delay_dist: str = "uniform"

    def node_bounds(self, M):
        f = self.factors if self.factors is not None else (1.0,) * M
        if len(f) != M:
            raise ValueError("need one speed factor per node")
        return ([self.tau_lo * fi for fi in f], [self.tau_hi * fi for fi in f])


def eta_bounds(M, tau_lo, tau_hi, tau):
    """Worst-case activation-window counts implied by the timing bounds.

    eta1 bounds the global-index gap between consecutive activations of any
    one node; eta2 bounds the extra staleness a delayed message can carry.
    """
    if tau_lo <= 0:
        raise ValueError("tau_lo must be positive")
    # Nudge the quotients up a few ulps before flooring: timing bounds are
    # usually round multiples of each other, and a ratio like 0.15/0.05
    # landing at 2.999...96 must still count as 3 (rounding the window up
    # is the conservative direction for a staleness bound).
    eta1 = (M - 1) * int(math.floor((tau_hi / tau_lo) * (1.0 + 1e-12))) + 1
    eta2 = M * int(math.floor((tau / tau_lo) * (1.0 + 1e-12)))
    return eta1, eta2, eta1 + eta2


@dataclass
class RunResult:
    states: list
    trace: list
    iterations: list
    t_done: float
    n_events: int
    diagnostics: dict
    conservation: list = None


def _as_schedule(schedule_params):
    if isinstance(schedule_params, Schedule):
        return schedule_params
    p = tuple(schedule_params)
    if len(p) == 3:
        return Schedule(p[0], p[1], p[2])
    if len(p) == 4:
        return Schedule(p[0], p[1], p[2], tuple(p[3]) if p[3] is not None else None)
    raise ValueError("schedule_params must be (tau_lo, tau_hi, tau[, factors])")


def run_apdg(g, nodes, schedule_params, seed, stop=None, mode="async",
             track_conservation=False):
    """Drive the asynchronous updates over the simulated network.

    Arguments
    ----------
    g : Digraph (validated here).
    nodes : one runtime per node exposing initial_state(), update(state,
        buffers, weights_row) and check(prev, next) for the termination test.
    schedule_params : Schedule or (tau_lo, tau_hi, tau_delay[, factors]).
    seed : every random draw (activation intervals, message delays) comes
        from one generator seeded with this value.
    stop : ("termination", cap) runs until all nodes raise their flags, with
        IterationCap past cap local iterations; ("iterations", K) disables
        the termination test and runs each node for exactly K updates.
    mode : every node activates at time zero in both modes. "async" then
        draws per-node intervals between consecutive activations;
        "synchronous" activates every node at multiples of a common barrier
        period (the slowest compute interval plus the delay bound), with
        message delays still drawn the same way.
    track_conservation : record, after every event, the residuals of the
        push-sum mass ledgers (y mass against node count, z mass against the
        accumulated step injections, d mass against the gradient sum).

    Returns a RunResult; trace rows are (time, kind, node0, k_local, s,
    lambda_norm, grad_norm, l) with 0-based node ids ("update" rows describe
    the freshly produced state, "deliver" rows the arriving envelope).
    """
    diagnostics = validate_graph(g)
    sched = _as_schedule(schedule_params)
    M = g.M
    if len(nodes) != M:
        raise ValueError("need one node runtime per graph node")
    if stop is None:
        stop = ("termination", 100000)
    stop_kind, stop_arg = stop[0], int(stop[1])
    if stop_kind not in ("termination", "iterations"):
        raise ValueError("stop kind must be 'termination' or 'iterations'")
    if mode not in ("async", "synchronous"):
        raise ValueError("mode must be 'async' or 'synchronous'")

    rng = np.random.default_rng(seed)
    lo, hi = sched.node_bounds(M)
    tau = float(sched.tau_delay)
    if sched.delay_dist not in ("uniform", "constant"):
        raise ValueError("delay_dist must be 'uniform' or 'constant'")
    const_delay = sched.delay_dist == "constant"
    barrier = max(hi) + tau

    states = [nodes[i].initial_state() for i in range(M)]
    buffers = [[] for _ in range(M)]
    heap = []
    seq = 0
    last_deliver = {}
    registry = []  # unconsumed envelopes, for the conservation ledger
    injected_y = 0.0
    nrho = states[0].z.shape[0]
    injected_z = np.zeros(nrho)
    injected_d = np.zeros(nrho)
    alpha_d_cum = np.zeros(nrho)
    conservation = [] if track_conservation else None
    trace = []
    done = [False] * M
    t_done = 0.0
    n_events = 0

    def push(time, node, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (time, node, seq, kind, payload))
        seq += 1

    def send_all(i, t, state):
        for j in g.out_neighbors[i]:
            if j == i:
                deliver = t
            elif const_delay:
                deliver = t + tau
            else:
                deliver = t + (rng.uniform(0.0, tau) if tau > 0.0 else 0.0)
                prev_t = last_deliver.get((i, j))
                if prev_t is not None and deliver < prev_t:
                    deliver = prev_t
                last_deliver[(i, j)] = deliver
            env = MessageEnvelope(i, j, state.z.copy(), float(state.y),
                                  state.d.copy(), state.s, state.l, t, deliver)
            push(deliver, j, "deliver", env)
            if track_conservation:
                registry.append(env)

    def snapshot(t):
        nonlocal registry
        registry = [e for e in registry if not e.consumed]
        y_mass = 0.0
        z_mass = np.zeros(nrho)
        d_mass = np.zeros(nrho)
        for e in registry:
            a = g.weights[e.receiver, e.sender]
            y_mass += a * e.y
            z_mass += a * e.z
            d_mass += a * e.d
        grad_sum = np.zeros(nrho)
        for st in states:
            grad_sum += st.grad_prev
        conservation.append((
            t,
            y_mass - (M + injected_y),
            float(np.abs(z_mass - (injected_z - alpha_d_cum)).max()),
            float(np.abs(d_mass - (grad_sum + injected_d)).max()),
        ))

    for i in range(M):
        send_all(i, 0.0, states[i])
    for i in range(M):
        push(0.0, i, "activate", None)

    while heap:
        t, nid, _, kind, payload = heapq.heappop(heap)
        n_events += 1
        if kind == "deliver":
            env = payload
            buffers[env.receiver].append(env)
            trace.append((t, "deliver", env.receiver,
                          states[env.receiver].k_local, env.s,
                          float(np.linalg.norm(env.z)),
                          float(np.linalg.norm(env.d)), env.l))
        else:
            i = nid
            if done[i]:
                continue
            prev = states[i]
            nxt = nodes[i].update(prev, buffers[i], g.weights[i])
            if track_conservation:
                for e in buffers[i]:
                    a = g.weights[i, e.sender]
                    if e.consumed:
                        injected_y += a * e.y
                        injected_z += a * e.z
                        injected_d += a * e.d
                    else:
                        e.consumed = True
                alpha_d_cum += nxt.w - nxt.z  # equals alpha * d_old exactly
            else:
                for e in buffers[i]:
                    e.consumed = True
            buffers[i] = [e for e in buffers[i] if e.l == 1]
            if stop_kind == "termination" and nodes[i].check(prev, nxt):
                nxt = replace(nxt, l=1)
                done[i] = True
                t_done = max(t_done, t)
            states[i] = nxt
            send_all(i, t, nxt)
            trace.append((t, "update", i, nxt.k_local, nxt.s,
                          float(np.linalg.norm(nxt.lam)),
                          float(np.linalg.norm(nxt.grad_prev)), nxt.l))
            if stop_kind == "termination":
                if not done[i]:
                    if nxt.k_local >= stop_arg:
                        raise IterationCap(
                            "node %d hit %d iterations" % (i + 1, stop_arg))
                    if mode == "synchronous":
                        push(t + barrier, i, "activate", None)
                    else:
                        push(t + rng.uniform(lo[i], hi[i]), i, "activate", None)
            else:
                if nxt.k_local >= stop_arg:
                    done[i] = True
                    t_done = max(t_done, t)
                elif mode == "synchronous":
                    push(t + barrier, i, "activate", None)
                else:
                    push(t + rng.uniform(lo[i], hi[i]), i, "activate", None)
        if track_conservation:
            snapshot(t)
        if all(done):
            break

    if not all(done):
        raise IterationCap("event queue drained before every node finished")
    return RunResult(states=states, trace=trace,
                     iterations=[st.k_local for st in states],
                     t_done=t_done, n_events=n_events,
                     diagnostics=diagnostics, conservation=conservation)


def trace_to_csv(trace, path):
    """Write an event trace with 1-based node ids and 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "kind", "node", "k_local", "s",
                    "lambda_norm", "grad_norm", "l"])
        for (t, kind, node, k_local, s, lam_n, grad_n, l) in trace:
            w.writerow([format(t, ".17g"), kind, node + 1, k_local, s,
                        format(lam_n, ".17g"), format(grad_n, ".17g"), l])
