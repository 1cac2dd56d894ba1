"""Halfspace polytopes, a dense two-phase simplex LP, and invariant-set computation.

Everything here operates on small dense problems (tens of rows, a handful of
variables), so the solver favors determinism and verifiability over speed:
Bland's pivoting rule makes the simplex cycle-free and reproducible.
"""

import numpy as np

_PIVOT_TOL = 1e-11
_COST_TOL = 1e-9
_FEAS_TOL = 1e-8


class Infeasible(Exception):
    """The constraint set is empty."""


class Unbounded(Exception):
    """The LP objective is unbounded above."""


class IterationLimit(Exception):
    """An iterative set computation exceeded its cap."""


class EmptyTerminalSet(Exception):
    """The tightened terminal base set is empty (shrink gamma)."""


class Polytope:
    """The set {x : G x <= h} in halfspace representation.

    Arguments
    ----------
    G : (r, n) array_like
        Row-wise outward normals.
    h : (r,) array_like
        Offsets.
    """

    def __init__(self, G, h):
        G = np.atleast_2d(np.asarray(G, dtype=float))
        h = np.asarray(h, dtype=float).ravel()
        if G.shape[0] != h.shape[0]:
            raise ValueError("G has %d rows but h has %d entries" % (G.shape[0], h.shape[0]))
        if G.shape[0] < 1:
            raise ValueError("a polytope needs at least one halfspace")
        self.G = G
        self.h = h

    @property
    def nrows(self):
        return self.G.shape[0]

    @property
    def dim(self):
        return self.G.shape[1]

    def contains(self, x, tol=1e-9):
        """True iff G x <= h + tol elementwise."""
        x = np.asarray(x, dtype=float).ravel()
        return bool(np.all(self.G @ x <= self.h + tol))

    def as_box(self):
        """Return (lo, hi) when the rows are exactly the box pattern
        [I; -I] x <= [hi; -lo], else None."""
        n = self.dim
        if self.nrows != 2 * n:
            return None
        if not (np.array_equal(self.G[:n], np.eye(n))
                and np.array_equal(self.G[n:], -np.eye(n))):
            return None
        return -self.h[n:], self.h[:n].copy()

    def __repr__(self):
        return "Polytope(%d halfspaces in R^%d)" % (self.nrows, self.dim)


def contains(P, x, tol=1e-9):
    """Membership test, function form of Polytope.contains."""
    return P.contains(x, tol=tol)


def intersect(*polys):
    """Stack the halfspaces of several polytopes over the same space."""
    dims = {P.dim for P in polys}
    if len(dims) != 1:
        raise ValueError("cannot intersect polytopes of different dimensions: %s" % dims)
    G = np.vstack([P.G for P in polys])
    h = np.concatenate([P.h for P in polys])
    return Polytope(G, h)


def box(lo, hi):
    """Axis-aligned box {x : lo <= x <= hi} as a Polytope."""
    lo = np.asarray(lo, dtype=float).ravel()
    hi = np.asarray(hi, dtype=float).ravel()
    n = lo.size
    G = np.vstack([np.eye(n), -np.eye(n)])
    h = np.concatenate([hi, -lo])
    return Polytope(G, h)


def _pivot(T, row, col):
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and abs(T[r, col]) > 0.0:
            T[r] -= T[r, col] * T[row]


def _simplex_min(T, cost, basis, max_iter=20000):
    """Minimize cost @ v over {A v = b, v >= 0} given a starting basic feasible basis.

    T is the (m, ncols+1) tableau [A | b] kept in canonical form with respect
    to `basis`. Bland's rule on both the entering and leaving choices prevents
    cycling. Mutates T and basis in place; returns nothing (solution read off
    the tableau by the caller).
    """
    m = T.shape[0]
    ncols = T.shape[1] - 1
    for _ in range(max_iter):
        red = cost - cost[basis] @ T[:, :ncols]
        entering = -1
        for j in range(ncols):
            if red[j] < -_COST_TOL:
                entering = j
                break
        if entering < 0:
            return
        col = T[:, entering]
        best_row = -1
        best_ratio = np.inf
        for r in range(m):
            if col[r] > _PIVOT_TOL:
                ratio = T[r, -1] / col[r]
                if ratio < best_ratio - 1e-12 or (
                    abs(ratio - best_ratio) <= 1e-12
                    and (best_row < 0 or basis[r] < basis[best_row])
                ):
                    best_ratio = ratio
                    best_row = r
        if best_row < 0:
            raise Unbounded("LP objective unbounded above")
        _pivot(T, best_row, entering)
        basis[best_row] = entering
    raise IterationLimit("simplex exceeded %d pivots" % max_iter)


def lp_solve(c, P):
    """Maximize c @ x over a polytope with a dense two-phase simplex.

    Free variables are split as x = xp - xm and slacks close the inequalities;
    phase 1 drives artificial variables out of rows whose right-hand side had
    to be sign-flipped.

    Arguments
    ----------
    c : (n,) array_like
        Objective, maximized.
    P : Polytope

    Returns
    ----------
    (x_star, value) : maximizer and optimal objective value.

    Raises Infeasible if P is empty and Unbounded if the maximum is +inf.
    """
    c = np.asarray(c, dtype=float).ravel()
    G, h = P.G, P.h
    r, n = G.shape
    if c.size != n:
        raise ValueError("objective has dimension %d, polytope lives in R^%d" % (c.size, n))

    A = np.hstack([G, -G, np.eye(r)])
    b = h.copy()
    flipped = b < 0
    A[flipped] *= -1.0
    b[flipped] *= -1.0

    art_rows = np.flatnonzero(flipped)
    n_core = 2 * n + r
    n_art = art_rows.size
    if n_art:
        Art = np.zeros((r, n_art))
        for k, row in enumerate(art_rows):
            Art[row, k] = 1.0
        A = np.hstack([A, Art])

    T = np.hstack([A, b[:, None]])
    basis = []
    art_iter = iter(range(n_core, n_core + n_art))
    for row in range(r):
        basis.append(next(art_iter) if flipped[row] else 2 * n + row)

    if n_art:
        cost1 = np.zeros(n_core + n_art)
        cost1[n_core:] = 1.0
        _simplex_min(T, cost1, basis)
        if cost1[basis] @ T[:, -1] > _FEAS_TOL:
            raise Infeasible("polytope is empty")
        # pivot lingering (degenerate) artificials out, dropping redundant rows
        keep = []
        for row in range(len(basis)):
            if basis[row] >= n_core:
                piv = -1
                for j in range(n_core):
                    if abs(T[row, j]) > _PIVOT_TOL:
                        piv = j
                        break
                if piv < 0:
                    continue  # all-zero row: redundant constraint
                _pivot(T, row, piv)
                basis[row] = piv
            keep.append(row)
        T = T[keep][:, list(range(n_core)) + [-1]]
        basis = [basis[row] for row in keep]

    cost2 = np.zeros(n_core)
    cost2[:n] = -c
    cost2[n:2 * n] = c
    _simplex_min(T, cost2, basis)

    v = np.zeros(n_core)
    for row, j in enumerate(basis):
        v[j] = T[row, -1]
    x = v[:n] - v[n:2 * n]
    return x, float(c @ x)


def is_empty(P):
    """True iff the polytope has no points (phase-1 feasibility probe)."""
    try:
        lp_solve(np.zeros(P.dim), P)
    except Infeasible:
        return True
    return False


def remove_redundant(P, tol=1e-9):
    """Drop every halfspace that does not support the set.

    Row i is redundant when maximizing its normal over the other rows (with
    row i itself relaxed by one unit, which keeps the test LP bounded) cannot
    exceed h_i. The scan is sequential, so mutually redundant duplicates
    collapse to a single representative. Idempotent.
    """
    G = P.G.copy()
    h = P.h.copy()
    keep = list(range(P.nrows))
    i = 0
    while i < len(keep):
        if len(keep) == 1:
            break
        row = keep[i]
        rows = [rr for rr in keep if rr != row]
        test = Polytope(
            np.vstack([G[rows], G[row][None, :]]),
            np.concatenate([h[rows], [h[row] + 1.0]]),
        )
        try:
            _, val = lp_solve(G[row], test)
        except Unbounded:
            val = np.inf
        if val <= h[row] + tol:
            keep.pop(i)
        else:
            i += 1
    return Polytope(G[keep], h[keep])


def _spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _invariant_subset(A_cl, base, max_iter, tol):
    """Largest subset of `base` kept inside `base` by x+ = A_cl x.

    Fixed-point scheme: keep adding the constraints of `base` propagated
    through successive powers of A_cl until none of them cuts the current
    set, certified one row at a time by LP maximization.
    """
    if _spectral_radius(A_cl) >= 1.0:
        raise ValueError("closed-loop matrix is not strictly stable; no finite invariant set")
    if is_empty(base):
        raise Infeasible("base set for the invariant computation is empty")
    omega_G = [base.G]
    omega_h = [base.h]
    A_pow = A_cl.copy()
    for _ in range(max_iter):
        omega = Polytope(np.vstack(omega_G), np.concatenate(omega_h))
        mapped = base.G @ A_pow
        new_rows = []
        for i in range(base.nrows):
            try:
                _, val = lp_solve(mapped[i], omega)
            except Unbounded:
                val = np.inf
            if val > base.h[i] + tol:
                new_rows.append(i)
        if not new_rows:
            return remove_redundant(omega, tol=tol)
        omega_G.append(mapped[new_rows])
        omega_h.append(base.h[new_rows])
        A_pow = A_pow @ A_cl
    raise IterationLimit("invariant set not finitely determined within %d steps" % max_iter)


def mpi_set(A_K, X, U, K, max_iter=500, tol=1e-9):
    """Maximal positively invariant set of x+ = A_K x inside X with K x constrained to U.

    Arguments
    ----------
    A_K : (n, n) array_like
        Strictly stable closed-loop matrix.
    X : Polytope
        State set.
    U : Polytope
        Input set, imposed on K x.
    K : (m, n) array_like
        Feedback gain.

    Returns the largest Omega inside {x in X : K x in U} with A_K Omega
    contained in Omega. Raises IterationLimit if the determinedness index
    exceeds max_iter.
    """
    A_K = np.atleast_2d(np.asarray(A_K, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    base = intersect(X, Polytope(U.G @ K, U.h))
    return _invariant_subset(A_K, base, max_iter, tol)


def terminal_set(sys, K, sigma, max_iter=500, tol=1e-9):
    """Invariant terminal set with the coupling-output rows capped at sigma.

    The base set intersects the subsystem's state set, the input set pulled
    back through the feedback gain, and {x : (Cg + Dg K) x <= sigma 1}; the
    returned set is the maximal invariant subset of that base under
    x+ = (A + B K) x.
    """
    if sigma <= 0:
        raise EmptyTerminalSet("sigma = %g must be positive" % sigma)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    A_cl = sys.A + sys.B @ K
    coupling = Polytope(sys.Cg + sys.Dg @ K, sigma * np.ones(sys.Cg.shape[0]))
    base = intersect(sys.X, Polytope(sys.U.G @ K, sys.U.h), coupling)
    if is_empty(base):
        raise EmptyTerminalSet("tightened terminal base set is empty (gamma too large?)")
    try:
        return _invariant_subset(A_cl, base, max_iter, tol)
    except Infeasible as exc:
        raise EmptyTerminalSet(str(exc))
