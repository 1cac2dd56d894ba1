"""Subsystem dynamics, horizon condensation, Riccati/LQR synthesis, convexity constants.

The condensed data of one subsystem collects everything the dual algorithm
needs: the quadratic cost in the stacked input vector, the coupling-output
maps, and the strong-convexity/smoothness constants read off their spectra.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .polytope import Polytope


class DareError(Exception):
    """Riccati fixed-point iteration failed to converge or stabilize."""


def symmetric_eigenvalues(S, tol=1e-12, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.

    Small dense matrices only. One sweep rotates every off-diagonal pair;
    convergence is measured by the off-diagonal Frobenius mass relative to
    the matrix scale.
    """
    A = np.array(S, dtype=float, copy=True)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix must be symmetric")
    A = 0.5 * (A + A.T)
    if n == 1:
        return A.diagonal().copy()
    scale = max(1.0, float(np.abs(A).max()))
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) < 1e-18 * abs(diff):
                    A[p, q] = A[q, p] = 0.0
                    continue
                theta = diff / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(1.0, theta)) if theta != 0 else 1.0
                cth = 1.0 / np.hypot(1.0, t)
                sth = t * cth
                rot_p = cth * A[:, p] - sth * A[:, q]
                rot_q = sth * A[:, p] + cth * A[:, q]
                A[:, p], A[:, q] = rot_p, rot_q
                rot_p = cth * A[p, :] - sth * A[q, :]
                rot_q = sth * A[p, :] + cth * A[q, :]
                A[p, :], A[q, :] = rot_p, rot_q
                A[p, q] = A[q, p] = 0.0
    return np.sort(A.diagonal().copy())


def _check_spd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.allclose(M, M.T, atol=1e-10 * max(1.0, np.abs(M).max())):
        raise ValueError("%s must be symmetric" % name)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError("%s must be positive definite" % name)
    return M


@dataclass
class LtiSubsystem:
    """One subsystem: x+ = A x + B u with box-like polytopic sets and coupling maps.

    Cg/Dg map state/input into the shared resource rows of the normalized
    global constraint (right-hand side 1 per row, summed over subsystems).
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    X: Polytope
    U: Polytope
    Cg: np.ndarray
    Dg: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if self.B.shape[0] != self.A.shape[0]:
            self.B = self.B.reshape(self.A.shape[0], -1)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.Cg = np.atleast_2d(np.asarray(self.Cg, dtype=float))
        self.Dg = np.atleast_2d(np.asarray(self.Dg, dtype=float))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def rho(self):
        return self.Cg.shape[0]

    def validate(self):
        """Raise ValueError on any structural violation."""
        n, m = self.n, self.m
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        _check_spd(self.Q, "Q")
        _check_spd(self.R, "R")
        if self.Q.shape != (n, n) or self.R.shape != (m, m):
            raise ValueError("Q/R dimensions inconsistent with A/B")
        if self.X.dim != n or self.U.dim != m:
            raise ValueError("X/U dimensions inconsistent with A/B")
        for P, name in ((self.X, "X"), (self.U, "U")):
            if not np.all(P.h > 0):
                raise ValueError("%s must contain the origin strictly in its interior" % name)
        if self.Cg.shape != (self.rho, n) or self.Dg.shape != (self.rho, m):
            raise ValueError("Cg/Dg dimensions inconsistent")
        return self


def dare_solve(A, B, Q, R, tol=1e-12, max_iter=100000):
    """Fixed-point solution of the discrete-time algebraic Riccati equation.

    Iterates P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Q from P0 = Q until the
    update is below tol in the max norm, then forms the LQR gain
    K = -(R + B'PB)^-1 B'PA and verifies the closed loop is strictly stable.

    Returns
    ----------
    (P, K) : terminal weight and feedback gain.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = A.T @ P @ (A - B @ gain) + Q
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol:
            P = P_next
            break
        P = P_next
    else:
        raise DareError("Riccati iteration did not converge in %d steps" % max_iter)
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    closed = np.max(np.abs(np.linalg.eigvals(A + B @ K)))
    if closed >= 1.0:
        raise DareError("closed loop has spectral radius %.6f >= 1" % closed)
    return P, K


@dataclass
class CondensedProblem:
    """Stacked horizon matrices and scalar constants of one subsystem.

    The cost of an input sequence u from state x evaluates as
    u' CostW u + 2 u' CostF x + x' CostH x, and the coupling output as
    ConsF x + ConsH u (N blocks of rho rows, one per prediction step).
    """

    N: int
    Abar: np.ndarray
    Bbar: np.ndarray
    CostW: np.ndarray
    CostF: np.ndarray
    CostH: np.ndarray
    ConsF: np.ndarray
    ConsH: np.ndarray
    P: np.ndarray
    K: np.ndarray
    mu: float
    ell: float
    theta: float
    Lip: float
    n: int = field(default=0)
    m: int = field(default=0)
    rho: int = field(default=0)

    def cost(self, x, u):
        """J(x, u) of the condensed quadratic."""
        x = np.asarray(x, dtype=float).ravel()
        u = np.asarray(u, dtype=float).ravel()
        return float(u @ (self.CostW @ u) + 2.0 * u @ (self.CostF @ x) + x @ (self.CostH @ x))

    def coupling_output(self, x, u):
        """ConsF x + ConsH u, the subsystem's share of the global rows."""
        x = np.asarray(x, dtype=float).ravel()
        u = np.asarray(u, dtype=float).ravel()
        return self.ConsF @ x + self.ConsH @ u

    def predict_states(self, x, u):
        """Stacked state trajectory col(x_0..x_N) = Abar x + Bbar u."""
        x = np.asarray(x, dtype=float).ravel()
        u = np.asarray(u, dtype=float).ravel()
        return self.Abar @ x + self.Bbar @ u


def condense(sys, N):
    """Condense one subsystem's horizon-N optimal control data.

    Builds the stacked prediction maps, the quadratic cost in the input
    sequence, the coupling-output maps, and the four scalar constants
    (mu, ell from the cost Hessian spectrum; theta, Lip from the coupling
    map's Gram spectrum divided by them).
    """
    if N < 1:
        raise ValueError("horizon must be at least 1")
    sys.validate()
    n, m, rho = sys.n, sys.m, sys.rho
    P, K = dare_solve(sys.A, sys.B, sys.Q, sys.R)

    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(powers[-1] @ sys.A)

    Abar = np.vstack(powers)
    Bbar = np.zeros(((N + 1) * n, N * m))
    for blk in range(1, N + 1):
        for j in range(blk):
            Bbar[blk * n:(blk + 1) * n, j * m:(j + 1) * m] = powers[blk - 1 - j] @ sys.B

    Qbig = np.zeros(((N + 1) * n, (N + 1) * n))
    for blk in range(N):
        Qbig[blk * n:(blk + 1) * n, blk * n:(blk + 1) * n] = sys.Q
    Qbig[N * n:, N * n:] = P
    Rbig = np.kron(np.eye(N), sys.R)

    CostW = Bbar.T @ Qbig @ Bbar + Rbig
    CostW = 0.5 * (CostW + CostW.T)
    CostF = Bbar.T @ Qbig @ Abar
    CostH = Abar.T @ Qbig @ Abar
    CostH = 0.5 * (CostH + CostH.T)

    ConsF = np.vstack([sys.Cg @ powers[ell] for ell in range(N)])
    ConsH = np.zeros((N * rho, N * m))
    for blk in range(N):
        ConsH[blk * rho:(blk + 1) * rho, blk * m:(blk + 1) * m] = sys.Dg
        for j in range(blk):
            ConsH[blk * rho:(blk + 1) * rho, j * m:(j + 1) * m] = sys.Cg @ powers[blk - 1 - j] @ sys.B

    spec_w = symmetric_eigenvalues(2.0 * CostW)
    mu = float(spec_w[0])
    ell = float(spec_w[-1])
    if mu <= 0:
        raise ValueError("condensed cost is not strongly convex (mu = %g)" % mu)

    gram = ConsH @ ConsH.T
    spec_g = symmetric_eigenvalues(gram)
    lam_min = float(spec_g[0])
    lam_max = float(spec_g[-1])
    if lam_min < 1e-12 * max(lam_max, 1.0):
        warnings.warn(
            "coupling map H H' is singular: dual strong convexity constant is 0 "
            "and no convergence-rate certificate will be available",
            stacklevel=2,
        )
        lam_min = 0.0
    theta = lam_min / ell
    Lip = lam_max / mu

    return CondensedProblem(
        N=N, Abar=Abar, Bbar=Bbar, CostW=CostW, CostF=CostF, CostH=CostH,
        ConsF=ConsF, ConsH=ConsH, P=P, K=K,
        mu=mu, ell=ell, theta=theta, Lip=Lip, n=n, m=m, rho=rho,
    )


def gradient_f(cp, x, u, b_eps, M):
    """Gradient of the local dual objective at the inner maximizer u.

    Equals b_eps / M - (ConsF x + ConsH u); zero exactly when the subsystem
    consumes its even share of the tightened global budget.
    """
    b_eps = np.asarray(b_eps, dtype=float).ravel()
    return b_eps / M - cp.coupling_output(x, u)
