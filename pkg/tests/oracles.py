"""Independent dense oracles shared by the tests.

Nothing here calls the KKT or PDAS code: the optimal control is recomputed
from the assembled matrices by eliminating the state (one dense Stokes solve
per control dof) and solving the reduced quadratic program directly.
The element-level helpers use plain quadrature and sorting.
"""
import itertools

import numpy as np


class ReducedQP:
    """``min 0.5 y'Hy + g'y`` over control dofs subject to the zero-flux row ``c'y = 0``."""

    def __init__(self, sys, rho, y_d):
        A2, M2, D = sys.A2.toarray(), sys.M2.toarray(), sys.D.toarray()
        I, Q = sys.vel_dofs, sys.ctrl_dofs
        nI, nq, k = len(I), len(Q), sys.n_p
        S = np.block([[A2[np.ix_(I, I)], -D[I]], [D[I].T, np.zeros((k, k))]])
        S = np.vstack([S, np.concatenate([np.zeros(nI), sys.coarse_area])])

        def state(yq):
            rhs = np.concatenate([sys.F1[I] - A2[np.ix_(I, Q)] @ yq, -D[Q].T @ yq, [0.0]])
            return np.linalg.lstsq(S, rhs, rcond=None)[0][:nI]

        w0 = state(np.zeros(nq))
        U = np.zeros((2 * sys.nv, nq))
        u0 = np.zeros(2 * sys.nv)
        u0[I] = w0
        for j in range(nq):
            e = np.zeros(nq)
            e[j] = 1.0
            U[I, j] = state(e) - w0
            U[Q[j], j] += 1.0
        Aqq = A2[np.ix_(Q, Q)]
        self.H = U.T @ M2 @ U + rho * Aqq
        self.g = U.T @ (M2 @ u0 - sys.F2) - rho * Aqq @ np.asarray(y_d)
        self.c = D[Q].sum(axis=1)
        self.nq = nq

    def solve(self, fixed_idx=(), fixed_val=()):
        """Minimizer with ``y[fixed_idx] = fixed_val``; returns (y, mu) or None if singular.

        ``mu`` is minus the constrained gradient on the fixed dofs (zero elsewhere),
        so ``mu <= 0`` at a lower bound and ``mu >= 0`` at an upper bound.
        """
        fixed_idx = np.asarray(fixed_idx, dtype=int)
        nf = len(fixed_idx)
        E = np.zeros((self.nq, nf))
        E[fixed_idx, np.arange(nf)] = 1.0
        n = self.nq
        K = np.zeros((n + 1 + nf, n + 1 + nf))
        K[:n, :n] = self.H
        K[:n, n] = K[n, :n] = self.c
        K[:n, n + 1 :] = E
        K[n + 1 :, :n] = E.T
        rhs = np.concatenate([-self.g, [0.0], np.asarray(fixed_val, dtype=float)])
        if np.linalg.matrix_rank(K) < len(K):
            return None
        z = np.linalg.solve(K, rhs)
        y, lam = z[:n], z[n]
        mu = np.zeros(n)
        mu[fixed_idx] = -(self.H @ y + self.g + lam * self.c)[fixed_idx]
        return y, mu


def enumerate_active_sets(qp, contact_pos, bounds, tol=1e-10):
    """All 3^m patterns over the contact pairs that are feasible with correct multiplier signs.

    Returns a list of ``(pattern, y, mu)`` with pattern entries -1 (lower), 0, +1 (upper).
    """
    ya, yb = (np.asarray(b, float) for b in bounds)
    m = len(contact_pos)
    comp = np.arange(m) // (m // 2)
    lo, hi = ya[comp], yb[comp]
    found = []
    for pattern in itertools.product((-1, 0, 1), repeat=m):
        pat = np.array(pattern)
        idx = contact_pos[pat != 0]
        val = np.where(pat < 0, lo, hi)[pat != 0]
        out = qp.solve(idx, val)
        if out is None:
            continue
        y, mu = out
        yc, muc = y[contact_pos], mu[contact_pos]
        free = pat == 0
        ok = np.all(yc[free] >= lo[free] - tol) and np.all(yc[free] <= hi[free] + tol)
        ok = ok and np.all(muc[pat < 0] <= tol) and np.all(muc[pat > 0] >= -tol)
        if ok:
            found.append((pat, y, mu))
    return found


def hat_gradients(corners):
    """Gradients of the three barycentric coordinates by inverting the affine map."""
    J = np.column_stack([corners[1] - corners[0], corners[2] - corners[0]])
    Jinv_T = np.linalg.inv(J).T
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return ref @ Jinv_T.T


def three_point(corners, g):
    """Degree-2 edge-midpoint rule."""
    area = 0.5 * abs(np.linalg.det(np.column_stack([corners[1] - corners[0], corners[2] - corners[0]])))
    mids = 0.5 * (corners + np.roll(corners, -1, axis=0))
    return area / 3.0 * sum(g(m) for m in mids)


def bary_at(corners, x):
    J = np.column_stack([corners[1] - corners[0], corners[2] - corners[0]])
    l12 = np.linalg.solve(J, x - corners[0])
    return np.array([1.0 - l12.sum(), l12[0], l12[1]])


def brute_force_mark(eta, theta):
    """Smallest k such that the k largest entries (ties by index) reach theta^2 of the total."""
    order = sorted(range(len(eta)), key=lambda i: (-eta[i], i))
    total = sum(eta)
    acc = 0.0
    for k, i in enumerate(order, start=1):
        acc += eta[i]
        if acc >= theta**2 * total * (1 - 1e-15):
            return sorted(order[:k])
    return sorted(order)
