"""Primal-dual active set iteration for the box-constrained control."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import DiscreteField, FeSystem
from .kkt import ActiveSetState, KktSolution, KktSolveReport, solve_kkt

__all__ = [
    "OptimalityPoint",
    "PdasNonConvergence",
    "active_sets",
    "project",
    "pdas_solve",
    "reduced_objective",
    "write_iteration_log",
]


class PdasNonConvergence(RuntimeError):
    def __init__(self, message: str, history: list, cycle: tuple | None = None):
        super().__init__(message)
        self.history = history
        self.cycle = cycle


@dataclass
class OptimalityPoint:
    """Converged discrete optimality point.

    ``w, y, u, phi`` live on the full fine vertex set (component-blocked),
    ``p, r`` on coarse elements and ``mu`` on control dofs.
    """

    sys: FeSystem
    w: np.ndarray
    y: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    r: np.ndarray
    mu: np.ndarray
    active: ActiveSetState
    iterations: int
    rho: float
    bounds: tuple
    y_d: np.ndarray
    report: KktSolveReport
    history: list = field(default_factory=list)
    converged: bool = True

    @property
    def u(self) -> np.ndarray:
        return self.w + self.y

    def field(self, name: str) -> DiscreteField:
        kind = "pressure_like" if name in ("p", "r") else "velocity_like"
        return DiscreteField(kind, getattr(self, name), self.sys.mesh)

    @property
    def y_contact(self) -> np.ndarray:
        return self.y[self.sys.ctrl_dofs][self.sys.contact_pos]

    @property
    def mu_contact(self) -> np.ndarray:
        return self.mu[self.sys.contact_pos]

    @property
    def y_d_full(self) -> np.ndarray:
        return self.sys.from_control(self.y_d)


def _bound_per_pair(bounds, n_pairs):
    ya, yb = (np.asarray(b, dtype=float).reshape(2) for b in bounds)
    comp = np.arange(n_pairs) // max(n_pairs // 2, 1)
    return ya[comp], yb[comp]


def active_sets(y: np.ndarray, mu: np.ndarray, bounds, iteration: int = 0) -> ActiveSetState:
    """Active sets from contact-pair vectors ``y`` and ``mu`` (component-blocked)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if y.shape != mu.shape:
        raise ValueError("y and mu differ in length")
    lo, hi = _bound_per_pair(bounds, len(y))
    upper = mu + (y - hi) > 0
    lower = mu + (y - lo) < 0
    return ActiveSetState(lower & ~upper, upper, iteration)


def _satisfies_kkt(state: ActiveSetState, y, mu, lo, hi, tol: float = 1e-10) -> bool:
    """Feasibility on every pair and multiplier signs on the active pairs."""
    feasible = np.all(y >= lo - tol) and np.all(y <= hi + tol)
    signs = np.all(mu[state.lower] <= tol) and np.all(mu[state.upper] >= -tol)
    return bool(feasible and signs and np.all(np.abs(mu[state.inactive]) <= tol))


def project(sys: FeSystem, y_ctrl: np.ndarray, bounds) -> np.ndarray:
    """Clip the contact entries of a control-space vector into the bounds."""
    out = np.array(y_ctrl, dtype=float)
    pos = sys.contact_pos
    lo, hi = _bound_per_pair(bounds, len(pos))
    out[pos] = np.clip(out[pos], lo, hi)
    return out


def reduced_objective(sys: FeSystem, sol: KktSolution, rho: float, y_d: np.ndarray) -> float:
    """Modified objective up to the constant ``|u_d|^2 / 2``."""
    u = sol.w + sol.y
    e = sol.y - sys.from_control(y_d)
    return float(0.5 * u @ (sys.M2 @ u) - u @ sys.F2 + 0.5 * rho * e @ (sys.A2 @ e))


def pdas_solve(
    sys: FeSystem,
    rho: float,
    bounds,
    y_d: np.ndarray,
    y0: np.ndarray | None = None,
    mu0: np.ndarray | None = None,
    max_iter: int = 50,
    tol: float = 1e-12,
    kkt_tol: float = 1e-10,
    log_path=None,
) -> OptimalityPoint:
    """Run the active-set loop until the sets repeat or the control stalls.

    ``y0`` and ``mu0`` are control-space vectors; by default ``y0`` is
    ``y_d`` projected into the bounds and ``mu0`` is zero.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    ya, yb = (np.asarray(b, dtype=float).reshape(2) for b in bounds)
    if not np.all(ya < yb):
        raise ValueError("bounds must satisfy y_a < y_b componentwise")
    y_d = np.asarray(y_d, dtype=float)
    y_prev = project(sys, y_d if y0 is None else y0, bounds)
    mu = np.zeros(2 * sys.n_q) if mu0 is None else np.asarray(mu0, dtype=float)
    pos = sys.contact_pos
    lo, hi = _bound_per_pair(bounds, len(pos))
    state = active_sets(y_prev[pos], mu[pos], bounds, 0)
    seen = {state.key(): 0}
    history = []
    for k in range(1, max_iter + 1):
        sol = solve_kkt(sys, state, rho, bounds, y_d, tol=kkt_tol)
        yq = sol.y[sys.ctrl_dofs]
        dy = float(np.max(np.abs(yq - y_prev))) if yq.size else 0.0
        history.append(
            {
                "k": k,
                "n_lower": state.n_lower,
                "n_upper": state.n_upper,
                "dy": dy,
                "residual": sol.report.residual_norm,
                "objective": reduced_objective(sys, sol, rho, y_d),
                "feasible": bool(np.all(yq[pos] >= lo - 1e-10) and np.all(yq[pos] <= hi + 1e-10)),
            }
        )
        new = active_sets(yq[pos], sol.mu[pos], bounds, k)
        # a stalled control only ends the loop at a genuine KKT point: with the
        # zero-flux row a freed dof can stay pinned while the sets still move
        stalled = dy < tol and _satisfies_kkt(state, yq[pos], sol.mu[pos], lo, hi)
        if new.same_sets(state) or stalled:
            if log_path is not None:
                write_iteration_log(log_path, history)
            return OptimalityPoint(
                sys, sol.w, sol.y, sol.p, sol.phi, sol.r, sol.mu, state, k, rho,
                (ya, yb), y_d, sol.report, history,
            )
        key = new.key()
        if key in seen:
            if log_path is not None:
                write_iteration_log(log_path, history)
            raise PdasNonConvergence(
                f"active-set pattern of iteration {k} repeats iteration {seen[key]}", history, (seen[key], k)
            )
        seen[key] = k
        state = new
        y_prev = yq
    if log_path is not None:
        write_iteration_log(log_path, history)
    raise PdasNonConvergence(f"no convergence in {max_iter} iterations", history)


def write_iteration_log(path, history: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "n_lower", "n_upper", "dy_inf", "kkt_residual"])
        for h in history:
            wr.writerow([h["k"], h["n_lower"], h["n_upper"], repr(h["dy"]), repr(h["residual"])])
