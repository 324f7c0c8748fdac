"""Coupled state/adjoint/control linear system of one active-set step.

Unknown layout of the factorized system::

    [ w_I (2 n_v) | y_free | p (kappa) | phi_I (2 n_v) | r (kappa) ]

Control dofs on the current active sets are eliminated (their values are
the bounds), which is the same as identity rows plus symmetric column
elimination. Only the state pressure carries a constant null mode: a
constant adjoint pressure is tied to the zero-flux condition of the control
and is therefore determined. The null mode of ``p`` is removed by pinning
``p_0 = 0`` and dropping the first adjoint divergence row, which is the
negative sum of the others. ``r`` is pinned the same way only when every
boundary control dof is fixed. The area-weighted mean is subtracted after
the solve. A dense bordered mean row would do the same job but multiplies
the LU fill by about five on fine meshes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import FeSystem

__all__ = [
    "ActiveSetState",
    "KktSolution",
    "KktSolveReport",
    "KktSingularError",
    "KktToleranceError",
    "solve_kkt",
    "kkt_matrix",
]


class KktSingularError(RuntimeError):
    """The constrained system has a null mode; ``mode`` names it."""

    def __init__(self, message: str, mode: str):
        super().__init__(message)
        self.mode = mode


class KktToleranceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class ActiveSetState:
    """Active sets over contact pairs.

    Pair ``k = c + i * n_c`` is component ``i`` at ``sys.contact[c]``.
    """

    lower: np.ndarray
    upper: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=bool)
        self.upper = np.asarray(self.upper, dtype=bool)
        if self.lower.shape != self.upper.shape:
            raise ValueError("active masks differ in length")
        if np.any(self.lower & self.upper):
            raise ValueError("a pair cannot be active at both bounds")

    @classmethod
    def empty(cls, n_pairs: int) -> "ActiveSetState":
        z = np.zeros(n_pairs, dtype=bool)
        return cls(z, z.copy())

    @property
    def inactive(self) -> np.ndarray:
        return ~(self.lower | self.upper)

    @property
    def n_lower(self) -> int:
        return int(self.lower.sum())

    @property
    def n_upper(self) -> int:
        return int(self.upper.sum())

    def key(self) -> bytes:
        return (self.lower.astype(np.int8) - self.upper.astype(np.int8)).tobytes()

    def same_sets(self, other: "ActiveSetState") -> bool:
        return bool(np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper))

    def pairs(self, contact: np.ndarray, which: str):
        """Set of ``(vertex, component)`` tuples for ``which`` in lower/upper/inactive."""
        mask = getattr(self, which)
        nc = len(contact)
        k = np.nonzero(mask)[0]
        return {(int(contact[j % nc]), int(j // nc)) for j in k}


@dataclass
class KktSolveReport:
    residual_norm: float
    block_residuals: dict
    factorization_stats: dict
    pressure_shift: tuple
    r_mean: float


@dataclass
class KktSolution:
    """Fields on the full fine vertex set (component-blocked); ``mu`` on control dofs."""

    w: np.ndarray
    y: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    r: np.ndarray
    mu: np.ndarray
    report: KktSolveReport = field(repr=False)

    def as_tuple(self):
        return self.w, self.y, self.p, self.phi, self.r, self.mu, self.report


def _bounds_arrays(bounds):
    ya, yb = (np.asarray(b, dtype=float).reshape(2) for b in bounds)
    return ya, yb


def _fixed_values(sys: FeSystem, active: ActiveSetState, bounds):
    """Control-space positions that are fixed and their values."""
    ya, yb = _bounds_arrays(bounds)
    nc = sys.n_contact
    comp = np.arange(2 * nc) // max(nc, 1)
    pos = sys.contact_pos
    fixed = active.lower | active.upper
    vals = np.where(active.lower, ya[comp], yb[comp])
    return pos[fixed], vals[fixed]


class _Blocks:
    """Sliced operators for one active-set pattern."""

    def __init__(self, sys: FeSystem, fixed_pos: np.ndarray, rho: float):
        self.sys = sys
        nq2 = 2 * sys.n_q
        free_mask = np.ones(nq2, dtype=bool)
        free_mask[fixed_pos] = False
        self.free_pos = np.nonzero(free_mask)[0]
        self.fixed_pos = fixed_pos
        I = sys.vel_dofs
        Q = sys.ctrl_dofs
        Qf = Q[self.free_pos]
        F = Q[fixed_pos]
        A2, M2, D = sys.A2, sys.M2, sys.D
        L = (rho * A2 + M2).tocsr()
        self.I, self.Q, self.Qf, self.F = I, Q, Qf, F
        self.A_II = A2[I][:, I]
        self.A_IQf = A2[I][:, Qf]
        self.A_IF = A2[I][:, F]
        self.M_II = M2[I][:, I]
        self.M_IQf = M2[I][:, Qf]
        self.M_IF = M2[I][:, F]
        self.D_I = D[I]
        self.D_Qf = D[Qf]
        self.D_F = D[F]
        self.L_QfQf = L[Qf][:, Qf]
        self.L_QfF = L[Qf][:, F]
        self.M_QfI = M2[Qf][:, I]
        self.A_QfI = A2[Qf][:, I]
        self.A_QfQ = A2[Qf][:, Q]
        self.L_QQ = L[Q][:, Q]
        self.A_QI = A2[Q][:, I]
        self.A_QQ = A2[Q][:, Q]
        self.M_QI = M2[Q][:, I]
        self.D_Q = D[Q]


def _assemble_matrix(b: _Blocks, pin_r: bool):
    """Coupled matrix with the pressure null modes pinned.

    Returns ``(K, keep_rows, keep_cols)`` where the index arrays refer to the
    unpinned block layout.
    """
    kappa = b.sys.n_p
    nI, nf = len(b.I), len(b.Qf)
    Z = None
    rows = [
        [b.A_II, b.A_IQf, -b.D_I, Z, Z],
        [b.D_I.T, b.D_Qf.T, Z, Z, Z],
        [-b.M_II, -b.M_IQf, Z, b.A_II, b.D_I],
        [Z, Z, Z, b.D_I.T, Z],
        [b.M_QfI, b.L_QfQf, Z, -b.A_QfI, -b.D_Qf],
    ]
    K = sp.bmat(rows, format="csr") if nf else sp.bmat([r[:1] + r[2:] for r in rows[:4]], format="csr")
    n = K.shape[0]
    drop_rows = [nI + kappa + nI]
    drop_cols = [nI + nf]
    if pin_r:
        drop_rows.append(nI)
        drop_cols.append(nI + nf + kappa + nI)
    keep_rows = np.setdiff1d(np.arange(n), drop_rows)
    keep_cols = np.setdiff1d(np.arange(n), drop_cols)
    return K[keep_rows][:, keep_cols].tocsc(), keep_rows, keep_cols


def _column_layout(b: _Blocks):
    nI, nf, kappa = len(b.I), len(b.Qf), b.sys.n_p
    o = np.cumsum([0, nI, nf, kappa, nI, kappa])
    return {"w": (o[0], o[1]), "y": (o[1], o[2]), "p": (o[2], o[3]), "phi": (o[3], o[4]), "r": (o[4], o[5])}


def kkt_matrix(sys: FeSystem, active: ActiveSetState, rho: float, bounds):
    """Assembled pinned matrix, e.g. for debugging dumps."""
    fixed_pos, _ = _fixed_values(sys, active, bounds)
    b = _Blocks(sys, fixed_pos, rho)
    return _assemble_matrix(b, _needs_r_pin(b))[0]


def _needs_r_pin(b: _Blocks) -> bool:
    # the zero-flux row of the control is absent when no free dof touches the boundary
    flux = np.asarray(b.D_Qf.sum(axis=1)).ravel()
    scale = max(1.0, float(np.abs(b.sys.D).max()))
    return not np.any(np.abs(flux) > 1e-12 * scale)


def _max(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def solve_kkt(
    sys: FeSystem,
    active: ActiveSetState,
    rho: float,
    bounds,
    y_d: np.ndarray,
    tol: float = 1e-10,
) -> KktSolution:
    """Solve the coupled system for a fixed active-set pattern.

    Parameters
    ----------
    y_d : control-space vector (length ``2 * sys.n_q``).
    tol : bound on every scaled block residual ``|res|_inf / max(1, |rhs|_inf)``.

    Returns
    -------
    KktSolution with ``w, y, phi`` on the full fine vertex set, ``p, r`` per
    coarse element and ``mu`` on control dofs.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    y_d = np.asarray(y_d, dtype=float)
    if y_d.shape != (2 * sys.n_q,):
        raise ValueError(f"y_d must have length {2 * sys.n_q}")
    if active.lower.shape != (2 * sys.n_contact,):
        raise ValueError("active-set masks do not match the contact pairs")
    fixed_pos, fixed_val = _fixed_values(sys, active, bounds)
    b = _Blocks(sys, fixed_pos, rho)
    pin_r = _needs_r_pin(b)
    kappa = sys.n_p
    yF = fixed_val
    if pin_r:
        flux = float(np.sum(b.D_F.T @ yF))
        scale = max(1.0, _max(yF)) * max(1.0, float(np.abs(sys.D).max()))
        if abs(flux) > 1e-12 * scale * max(1, len(yF)):
            raise KktSingularError(
                f"fixed controls carry a net boundary flux {flux:.3e} that no velocity can balance; "
                "the constant adjoint-pressure mode is undetermined",
                mode="constant adjoint pressure",
            )
    F1_I = sys.F1[b.I]
    F2_I = sys.F2[b.I]
    F2_Qf = sys.F2[b.Qf]
    rhs_blocks = [
        F1_I - b.A_IF @ yF,
        -(b.D_F.T @ yF),
        -F2_I + b.M_IF @ yF,
        np.zeros(kappa),
        F2_Qf + rho * (b.A_QfQ @ y_d) - b.L_QfF @ yF,
    ]
    K, keep_rows, keep_cols = _assemble_matrix(b, pin_r)
    rhs = np.concatenate(rhs_blocks)[keep_rows]
    try:
        lu = spla.splu(K, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise KktSingularError(f"factorization failed: {exc}", mode="unknown") from exc
    xk = lu.solve(rhs)
    xk += lu.solve(rhs - K @ xk)
    x = np.zeros(sum(len(r) for r in rhs_blocks))
    x[keep_cols] = xk
    if not np.all(np.isfinite(x)):
        raise KktSingularError("non-finite solution from the factorization", mode="unknown")
    lay = _column_layout(b)
    sl = {k: x[a:e] for k, (a, e) in lay.items()}
    nv2 = 2 * sys.nv
    w = np.zeros(nv2)
    w[b.I] = sl["w"]
    phi = np.zeros(nv2)
    phi[b.I] = sl["phi"]
    y = np.zeros(nv2)
    y[b.Qf] = sl["y"]
    y[b.F] = yF
    p = sl["p"].copy()
    r = sl["r"].copy()
    area = sys.coarse_area
    omega = float(area.sum())
    p_shift = float(area @ p) / omega
    p -= p_shift
    r_shift = 0.0
    if pin_r:
        r_shift = float(area @ r) / omega
        r -= r_shift
    # block residuals of the full (unpinned) equations
    yq = y[b.Q]
    res = [
        b.A_II @ w[b.I] + sys.A2[b.I][:, b.Q] @ yq - b.D_I @ p - F1_I,
        b.D_I.T @ w[b.I] + b.D_Q.T @ yq,
        b.A_II @ phi[b.I] + b.D_I @ r - b.M_II @ w[b.I] - sys.M2[b.I][:, b.Q] @ yq + F2_I,
        b.D_I.T @ phi[b.I],
    ]
    g = sys.F2[b.Q] + rho * (b.A_QQ @ y_d) - (b.L_QQ @ yq - b.A_QI @ phi[b.I] - b.D_Q @ r + b.M_QI @ w[b.I])
    res.append(g[b.free_pos])
    names = ["state_momentum", "state_divergence", "adjoint_momentum", "adjoint_divergence", "control"]
    scaled = {n: _max(rr) / max(1.0, _max(rf)) for n, rr, rf in zip(names, res, rhs_blocks)}
    worst = max(scaled.values())
    mu = np.zeros(2 * sys.n_q)
    mu[b.fixed_pos] = g[b.fixed_pos]
    stats = {"n": K.shape[0], "nnz": K.nnz, "nnz_lu": lu.L.nnz + lu.U.nnz}
    report = KktSolveReport(worst, scaled, stats, (p_shift, r_shift), float(area @ r) / omega)
    if not worst <= tol:
        raise KktToleranceError(f"KKT residual {worst:.3e} exceeds tolerance {tol:.1e}", worst)
    return KktSolution(w, y, p, phi, r, mu, report)
