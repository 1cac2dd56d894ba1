"""Per-node dual gradient machinery: push-sum state, the asynchronous update
law, the distributed termination test, and the linear-rate certificate.

Each node owns a DualNodeState and advances it with local_update whenever the
simulator activates it. The update mixes buffered neighbor messages with
column-stochastic weights, recovers the dual estimate as a projected ratio,
maximizes the local Lagrangian by an inner QP, and tracks the network-average
gradient through the d iterate.
"""

import math
from dataclasses import dataclass

import numpy as np

from .model import gradient_f
from .qp import PreparedQp


class Frozen(Exception):
    """Update requested on a node that already terminated."""


class NoCertificate(Exception):
    """Step size or problem constants fall outside the proven range."""


@dataclass
class DualNodeState:
    """Local push-sum dual-gradient iterate of one subsystem.

    grad_prev stores the gradient at the current dual estimate; it starts at
    zero by convention (the initial gradient is declared zero rather than
    evaluated, so the first consumption share is exactly the even split of
    the tightened budget).
    """

    lam: np.ndarray
    z: np.ndarray
    w: np.ndarray
    y: float
    d: np.ndarray
    grad_prev: np.ndarray
    u: np.ndarray
    s: int = 0
    l: int = 0
    k_local: int = 0


def initial_state(nrho, nm, lam0=None):
    """Fresh node state: lam0 >= 0 (default 0), z=0, y=1, d=0, counters 0."""
    if lam0 is None:
        lam0 = np.zeros(nrho)
    lam0 = np.asarray(lam0, dtype=float).ravel()
    if lam0.shape[0] != nrho or np.any(lam0 < 0):
        raise ValueError("lam0 must be a nonnegative vector of length %d" % nrho)
    return DualNodeState(
        lam=lam0, z=np.zeros(nrho), w=np.zeros(nrho), y=1.0,
        d=np.zeros(nrho), grad_prev=np.zeros(nrho), u=np.zeros(nm),
        s=0, l=0, k_local=0,
    )


def local_update(state, buffers, weights, beta, cp, x, b_eps, M,
                 feas=None, solver=None, h=None):
    """One asynchronous update of a node; returns the successor state.

    Arguments
    ----------
    state : current DualNodeState (l must be 0).
    buffers : message objects carrying sender, z, y, d, s, l; every buffered
        entry participates in the mixing sums, including the node's own last
        self-message and multiple entries from a fast neighbor.
    weights : per-sender mixing weights a_ij (indexable by message.sender).
    beta : fixed step size; the adaptive step multiplies it by the iteration
        deficit against the most advanced buffered neighbor (minimum one).
    cp, x, b_eps, M : condensed problem, local state, tightened budget, node
        count; together they define the local dual objective.
    feas : input-sequence polytope for the inner QP; alternatively pass a
        PreparedQp as `solver` with its right-hand side `h`.
    """
    if state.l:
        raise Frozen("node already terminated")
    if not buffers:
        raise ValueError("buffers must contain at least the node's own last message")
    if solver is None:
        if feas is None:
            raise ValueError("provide either feas or (solver, h)")
        solver = PreparedQp(cp.CostW, feas.G)
        h = feas.h

    nrho = state.z.shape[0]
    w = np.zeros(nrho)
    y = 0.0
    d_mix = np.zeros(nrho)
    s_tilde = state.s
    for m in buffers:
        a = weights[m.sender]
        w = w + a * m.z
        y = y + a * m.y
        d_mix = d_mix + a * m.d
        if m.s > s_tilde:
            s_tilde = m.s

    lam = np.maximum(w, 0.0) / y
    q = 2.0 * (cp.CostF @ np.asarray(x, dtype=float).ravel()) + cp.ConsH.T @ lam
    u, _ = solver.solve(q, h)
    alpha = (max(s_tilde - state.s, 0) + 1) * beta
    z = w - alpha * state.d
    grad = gradient_f(cp, x, u, b_eps, M)
    d = d_mix + grad - state.grad_prev

    return DualNodeState(
        lam=lam, z=z, w=w, y=y, d=d, grad_prev=grad, u=u,
        s=state.s + 1, l=0, k_local=state.k_local + 1,
    )


def check_termination(prev, next_state, cp, x, eps, eps_b, eps_g, M):
    """Distributed stopping test on two consecutive states of one node.

    First condition: the consumption change g(x, u_next) - g(x, u_prev) is
    elementwise below (eps - eps_b); evaluated through the stored gradients,
    which also covers the fictitious initial consumption b_eps/M encoded by
    grad_prev = 0. Second condition: the local duality-gap surrogate
    J(x, u_next) + ||grad f(lam_prev)|| * ||lam_next - lam_prev|| + f(lam_next)
    stays below eps_g / M, where f(lam) is evaluated at the inner-QP maximizer
    u_next (so f(lam) = lam' grad f(lam) - J(x, u_next) exactly).
    """
    thresh = eps - eps_b
    diff = prev.grad_prev - next_state.grad_prev  # = g(x,u_next) - g(x,u_prev)
    if not np.all(diff < thresh):
        return False
    J = cp.cost(x, next_state.u)
    f_next = float(next_state.lam @ next_state.grad_prev) - J
    lhs = J + float(np.linalg.norm(prev.grad_prev) *
                    np.linalg.norm(next_state.lam - prev.lam)) + f_next
    return lhs <= eps_g / M


class ApdgNode:
    """Problem bundle driving one node inside the network simulator.

    Holds the condensed data, the current measured state, the tightened
    budget, and a prepared inner-QP solver; exposes the three hooks the
    event loop needs.
    """

    def __init__(self, cp, x, feas, b_eps, M, beta, eps, eps_b, eps_g,
                 lam0=None, solver=None, h=None):
        self.cp = cp
        self.x = np.asarray(x, dtype=float).ravel()
        self.b_eps = np.asarray(b_eps, dtype=float).ravel()
        self.M = int(M)
        self.beta = float(beta)
        self.eps = float(eps)
        self.eps_b = float(eps_b)
        self.eps_g = float(eps_g)
        self.lam0 = lam0
        if solver is None:
            solver = PreparedQp(cp.CostW, feas.G)
            h = feas.h
        self.solver = solver
        self.h = np.asarray(h, dtype=float).ravel()

    def initial_state(self):
        return initial_state(self.b_eps.shape[0], self.cp.CostW.shape[0],
                             lam0=self.lam0)

    def update(self, state, buffers, weights):
        return local_update(state, buffers, weights, self.beta, self.cp,
                            self.x, self.b_eps, self.M,
                            solver=self.solver, h=self.h)

    def check(self, prev, next_state):
        return check_termination(prev, next_state, self.cp, self.x,
                                 self.eps, self.eps_b, self.eps_g, self.M)


@dataclass
class RateCertificate:
    """Constants certifying geometric decay of the dual error at rate delta."""

    eta1: int
    eta2: int
    eta: int
    b_exp: int
    xi: float
    c: float
    beta1: float
    beta2: float
    delta: float
    script_L: float
    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0
    c4: float = 0.0
    c5: float = 0.0
    c6: float = 0.0
    c7: float = 0.0
    c8: float = 0.0
    c9: float = 0.0
    c10: float = 0.0
    c11: float = 0.0
    c12: float = 0.0
    c13: float = 0.0
    c14: float = 0.0
    pi1: float = 0.0
    pi2: float = 0.0
    pi3: float = 0.0
    pi4: float = 0.0
    tau_ticks: int = 0

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def rate_certificate(M, abar, tau_lo, tau_hi, tau_delay, theta, Lip, Nrho,
                     beta, c9, pi4):
    """Evaluate the convergence-rate constant chain.

    Activation-window counts come from the timing bounds (tau_lo, tau_hi in
    seconds per activation interval, tau_delay seconds of worst-case message
    delay); the delay enters the mixing-exponent b in units of minimum
    activation intervals, ceil(tau_delay / tau_lo), recorded as tau_ticks.

    Raises NoCertificate when the constants admit no proven rate: zero dual
    curvature (theta <= 0), c9 outside (0, theta), or beta outside (0, beta2).
    Raises ValueError on malformed timing or weight inputs.
    """
    if tau_lo <= 0:
        raise ValueError("tau_lo must be positive")
    if tau_hi < tau_lo or tau_delay < 0:
        raise ValueError("need tau_hi >= tau_lo and tau_delay >= 0")
    if not 0 < abar <= 1:
        raise ValueError("abar must lie in (0, 1]")
    if pi4 <= 1:
        raise ValueError("pi4 must exceed 1")
    if theta <= 0:
        raise NoCertificate("dual strong convexity constant is zero; "
                            "no geometric rate is certified")
    if not 0 < c9 < theta:
        raise NoCertificate("c9 must lie strictly between 0 and theta=%g" % theta)

    M = int(M)
    # Nudge quotients a few ulps toward the conservative side before
    # rounding: ratios of round timing numbers (0.15/0.05) can land just
    # under an integer in floating point, and the window counts must not
    # shrink because of that.
    eta1 = (M - 1) * int(math.floor((tau_hi / tau_lo) * (1.0 + 1e-12))) + 1
    eta2 = M * int(math.floor((tau_delay / tau_lo) * (1.0 + 1e-12)))
    eta = eta1 + eta2
    tau_ticks = int(math.ceil((tau_delay / tau_lo) * (1.0 - 1e-12)))
    b = (M - 1) * (eta1 + 1) + M * (tau_ticks + 1)

    ab = abar ** b
    if not ab < 1.0:
        raise NoCertificate("mixing bound degenerate (abar^b = %g)" % ab)
    xi = (1.0 - ab) ** (1.0 / b)
    c = 2.0 * (1.0 + abar ** (-b)) / (1.0 - ab)
    Mhat = M * (eta + 1)

    c1 = float(M) ** (M * eta) * c * Mhat
    pi1 = 2.0 * c1
    c2 = c / xi
    c3 = c2 * math.sqrt(Mhat * Nrho)
    c10 = ((2.0 + pi4) * pi1 * M + math.sqrt(M) / Mhat) * (M * eta + 1) / c9
    c11 = pi1 * M * (M * eta + 1)
    c12 = c3 * pi4 ** 2 * (1.0 / xi + 1.0 / xi ** 2) * math.sqrt(Nrho) * M
    c13 = M * pi4 * (c3 * (1.0 + 1.0 / xi) + math.sqrt(Nrho))
    script_L = (c11 + c10 * Lip) * (c12 + c13)

    beta2 = (1.0 - xi) ** 2 / script_L
    g = theta - c9
    # beta1 = ((sqrt(L + 4g(1-xi)) - sqrt(L)) / (2g))^2, rationalized to avoid
    # the catastrophic cancellation of the two near-equal square roots
    root_big = math.sqrt(script_L + 4.0 * g * (1.0 - xi))
    root_L = math.sqrt(script_L)
    beta1 = (2.0 * (1.0 - xi) / (root_big + root_L)) ** 2

    if not 0 < beta < beta2:
        raise NoCertificate(
            "step size %g outside the certified range (0, %g)" % (beta, beta2))
    if beta <= beta1:
        delta = 1.0 - g * beta
    else:
        delta = math.sqrt(script_L * beta) + xi

    return RateCertificate(
        eta1=eta1, eta2=eta2, eta=eta, b_exp=b, xi=xi, c=c,
        beta1=beta1, beta2=beta2, delta=delta, script_L=script_L,
        c1=c1, c2=c2, c3=c3,
        c4=c3 * pi4 * (1.0 + 1.0 / xi) * Lip * beta,
        c5=math.sqrt(Nrho) * M * pi4 * Lip * beta,
        c6=(math.sqrt(M) / Mhat) * (M * eta + 1) * beta,
        c7=2.0 + pi4 - beta * Lip,
        c8=1.0 - beta * Lip,
        c9=c9, c10=c10, c11=c11, c12=c12, c13=c13,
        c14=1.0 - beta * theta,
        pi1=pi1, pi2=pi1 * xi, pi3=pi1 * M * (M * eta + 1) * beta, pi4=pi4,
        tau_ticks=tau_ticks,
    )
