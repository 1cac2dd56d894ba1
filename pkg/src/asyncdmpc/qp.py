"""Dense strongly convex QP over polytopes.

Solves min_u u' W u + q' u subject to G u <= h with W positive definite.
Strategy: projected dual gradient ascent with Nesterov momentum and gradient
restart, interleaved with a combinatorial active-set polish that lands on the
exact KKT point once the dual iterate identifies the active rows. Everything
that depends only on (W, G) is factored once, so repeated solves with varying
(q, h) (the situation in every MPC step) reuse the preparation.
"""

import numpy as np

from .polytope import Polytope, Infeasible, is_empty


class MaxIter(Exception):
    """Inner QP solver exhausted its iteration budget without a KKT point."""


_BLOWUP = 1e10


class PreparedQp:
    """Reusable solver for min u'Wu + q'u s.t. Gu <= h over varying (q, h).

    Arguments
    ----------
    W : positive definite cost matrix (the Hessian of the objective is 2W).
    G : constraint matrix, one row per inequality; may contain zero rows
        (state-only conditions that become constant once x is fixed).
    """

    def __init__(self, W, G, kkt_tol=1e-8, feas_tol=1e-9, max_iter=100000):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        G = np.asarray(G, dtype=float).reshape(-1, W.shape[0])
        self.W = W
        self.G = G
        self.kkt_tol = kkt_tol
        self.feas_tol = feas_tol
        self.max_iter = int(max_iter)
        H2 = W + W.T  # Hessian 2W, symmetrized
        try:
            np.linalg.cholesky(H2)
        except np.linalg.LinAlgError:
            raise ValueError("cost matrix W must be positive definite")
        self.H2inv = np.linalg.inv(H2)
        self.GH2inv = G @ self.H2inv
        S = self.GH2inv @ G.T
        self.S = 0.5 * (S + S.T)
        if self.S.size:
            lam_max = float(np.linalg.eigvalsh(self.S)[-1])
        else:
            lam_max = 0.0
        self.step = 1.0 / max(lam_max, 1e-12)

    def _primal(self, q, mu):
        return -self.H2inv @ (q + self.G.T @ mu)

    def _polish(self, q, h, active):
        """Active-set refinement: exact KKT solve on a working set.

        Starts from the rows suggested by the dual iterate, then drops rows
        with negative multipliers and adds the worst violated row until the
        KKT conditions hold or the working set cycles (returns None).
        """
        nrows = self.G.shape[0]
        work = sorted(set(int(j) for j in active))
        Gq = self.GH2inv @ q
        for _ in range(3 * nrows + 20):
            if len(work) > self.G.shape[1] + 5:
                return None
            if work:
                idx = np.array(work, dtype=int)
                S_A = self.S[np.ix_(idx, idx)]
                rhs = -Gq[idx] - h[idx]
                try:
                    nu = np.linalg.solve(S_A, rhs)
                except np.linalg.LinAlgError:
                    nu = np.linalg.lstsq(S_A, rhs, rcond=None)[0]
                if nu.min() < -self.kkt_tol:
                    work.pop(int(np.argmin(nu)))
                    continue
                u = -self.H2inv @ (q + self.G[idx].T @ nu)
            else:
                nu = np.zeros(0)
                u = -self.H2inv @ q
            resid = self.G @ u - h
            worst = int(np.argmax(resid)) if nrows else 0
            if nrows == 0 or resid[worst] <= self.feas_tol:
                mu = np.zeros(nrows)
                if work:
                    mu[np.array(work, dtype=int)] = np.maximum(nu, 0.0)
                return u, mu
            if worst in work:
                return None  # numerically stuck working set
            work.append(worst)
            work.sort()
        return None

    def solve(self, q, h):
        """Return (u_star, mu) at KKT residual <= kkt_tol.

        Raises Infeasible when {u : Gu <= h} is empty, MaxIter when the
        budget runs out without certifying a solution.
        """
        q = np.asarray(q, dtype=float).ravel()
        h = np.asarray(h, dtype=float).ravel()
        nrows = self.G.shape[0]
        if h.shape[0] != nrows:
            raise ValueError("h has %d rows, expected %d" % (h.shape[0], nrows))

        u0 = -self.H2inv @ q
        if nrows == 0 or np.all(self.G @ u0 - h <= self.feas_tol):
            return u0, np.zeros(nrows)

        scale = 1.0 + float(np.abs(q).max() + np.abs(h).max())
        mu = np.zeros(nrows)
        yv = mu.copy()
        tk = 1.0
        checked_empty = False
        for it in range(self.max_iter):
            u_y = self._primal(q, yv)
            grad = h - self.G @ u_y  # gradient of the negated dual
            mu_next = np.maximum(0.0, yv - self.step * grad)
            if grad @ (mu_next - mu) > 0.0:
                tk = 1.0  # gradient restart: kill the momentum
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
            yv = mu_next + ((tk - 1.0) / t_next) * (mu_next - mu)
            mu = mu_next
            tk = t_next

            if it % 25 == 0 or it == self.max_iter - 1:
                u = self._primal(q, mu)
                resid = self.G @ u - h
                viol = float(resid.max())
                comp = float(np.abs(mu * resid).max())
                if viol <= self.feas_tol and comp <= self.kkt_tol * scale:
                    return u, mu
                active = np.flatnonzero((mu > self.kkt_tol * scale) | (resid > -1e-7 * scale))
                polished = self._polish(q, h, active)
                if polished is not None:
                    return polished
                # An empty constraint set makes the dual diverge, but the
                # divergence can be slow; after a while with no certificate,
                # settle the question once with an emptiness check so
                # infeasibility surfaces as Infeasible rather than MaxIter.
                if not checked_empty and (it >= 1000 or float(np.abs(mu).max()) > _BLOWUP):
                    checked_empty = True
                    if is_empty(Polytope(self.G, h)):
                        raise Infeasible("constraint polytope is empty")
        raise MaxIter("no KKT point within %d iterations" % self.max_iter)


def solve_inner(CostW, q, feas, kkt_tol=1e-8, feas_tol=1e-9, max_iter=100000):
    """Minimize u' CostW u + q' u over the polytope feas; return the minimizer.

    One-shot convenience wrapper; use PreparedQp directly when solving many
    instances that share (CostW, G).
    """
    solver = PreparedQp(CostW, feas.G, kkt_tol=kkt_tol, feas_tol=feas_tol, max_iter=max_iter)
    u, _ = solver.solve(q, feas.h)
    return u


class CentralSolution:
    """Optimizer of the stacked tightened problem, used as a verification oracle."""

    def __init__(self, u, value, lam, g_total):
        self.u = u            # list of per-subsystem input sequences
        self.value = value    # sum of full quadratic costs (state terms included)
        self.lam = lam        # multipliers of the coupled rows (the dual optimum)
        self.g_total = g_total  # sum of coupling outputs at the optimizer


def centralized_solve(problems, x, b_eps):
    """Solve the stacked QP: min sum_i J_i s.t. local sets and sum_i g_i <= b_eps.

    Arguments
    ----------
    problems : per-subsystem runtime objects exposing `cp` (CondensedProblem),
        `G_loc` (local constraint rows over the input sequence) and
        `local_h(x_i)` (their state-dependent right-hand side).
    x : list of per-subsystem states, or one stacked vector split by cp.n.
    b_eps : tightened right-hand side of the coupled rows.

    Raises Infeasible when the stacked problem has no feasible point, which
    is exactly the statement that x is outside the feasible domain.
    """
    M = len(problems)
    if isinstance(x, np.ndarray) and x.ndim == 1 and len(x) != M:
        xs, at = [], 0
        for pr in problems:
            xs.append(x[at:at + pr.cp.n])
            at += pr.cp.n
        if at != len(x):
            raise ValueError("stacked state length does not match subsystem dimensions")
        x = xs
    x = [np.asarray(xi, dtype=float).ravel() for xi in x]
    b_eps = np.asarray(b_eps, dtype=float).ravel()

    dims = [pr.cp.CostW.shape[0] for pr in problems]
    n_tot = sum(dims)
    offs = np.cumsum([0] + dims)

    Wbig = np.zeros((n_tot, n_tot))
    qbig = np.zeros(n_tot)
    local_rows = sum(pr.G_loc.shape[0] for pr in problems)
    Gbig = np.zeros((local_rows + len(b_eps), n_tot))
    hbig = np.zeros(local_rows + len(b_eps))
    row = 0
    coupling_rhs = b_eps.copy()
    for i, pr in enumerate(problems):
        a, b = offs[i], offs[i + 1]
        Wbig[a:b, a:b] = pr.cp.CostW
        qbig[a:b] = 2.0 * pr.cp.CostF @ x[i]
        k = pr.G_loc.shape[0]
        Gbig[row:row + k, a:b] = pr.G_loc
        hbig[row:row + k] = pr.local_h(x[i])
        row += k
        Gbig[local_rows:, a:b] = pr.cp.ConsH
        coupling_rhs -= pr.cp.ConsF @ x[i]
    hbig[local_rows:] = coupling_rhs

    solver = PreparedQp(Wbig, Gbig)
    u_stack, mu = solver.solve(qbig, hbig)

    u = [u_stack[offs[i]:offs[i + 1]] for i in range(M)]
    value = sum(pr.cp.cost(x[i], u[i]) for i, pr in enumerate(problems))
    g_total = sum(pr.cp.coupling_output(x[i], u[i]) for i, pr in enumerate(problems))
    return CentralSolution(u, float(value), mu[local_rows:].copy(), g_total)
