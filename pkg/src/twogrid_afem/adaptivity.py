"""Solve, estimate, mark, refine."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import PointLocator, assemble
from .cases import BenchmarkCase, compute_errors
from .estimator import (
    EstimatorBreakdown,
    compute_estimator,
    element_indicators,
    write_estimator_dump,
)
from .mesh import TwoGridMesh, bisect_coarse, build_initial, write_mesh
from .pdas import OptimalityPoint, PdasNonConvergence, pdas_solve, project

__all__ = [
    "AfemConfig",
    "ConvergenceHistory",
    "AfemAbort",
    "HISTORY_COLUMNS",
    "doerfler_mark",
    "lift_marks",
    "warm_start",
    "optimality_diagnostics",
    "afem_run",
    "rates",
    "rate",
    "loglog_slope",
]

log = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    "level",
    "N",
    "error_total",
    "estimator_total",
    "eta_state",
    "eta_adjoint",
    "eta_control",
    "err_u",
    "err_p",
    "err_phi",
    "err_r",
    "err_y",
    "pdas_iters",
    "rate_error",
    "rate_estimator",
]


@dataclass
class AfemConfig:
    theta: float = 0.3
    max_levels: int = 200
    max_dofs: int = 50_000
    pdas_tol: float = 1e-12
    pdas_max_iter: int = 50
    kkt_tol: float = 1e-10
    quad_degree: int = 5
    mode: str = "adaptive"
    initial_h: float | None = None

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.mode not in ("adaptive", "uniform"):
            raise ValueError("mode must be 'adaptive' or 'uniform'")
        if self.max_levels < 1 or self.max_dofs < 1:
            raise ValueError("max_levels and max_dofs must be positive")


class AfemAbort(RuntimeError):
    def __init__(self, message: str, history: "ConvergenceHistory", level: int, diagnostics=None):
        super().__init__(message)
        self.history = history
        self.level = level
        self.diagnostics = diagnostics


def doerfler_mark(indicators2, theta: float):
    """Minimal greedy set carrying a ``theta**2`` fraction of the total.

    Returns ``(marked_ids, converged)``; ``converged`` is True only when
    every indicator vanishes, in which case nothing is marked.
    """
    eta = np.asarray(indicators2, dtype=float)
    if np.any(eta < 0):
        raise ValueError("squared indicators must be non-negative")
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    total = float(eta.sum())
    if total == 0.0:
        return np.zeros(0, dtype=np.int64), True
    order = np.lexsort((np.arange(len(eta)), -eta))
    cs = np.cumsum(eta[order])
    target = theta**2 * cs[-1]
    k = int(np.searchsorted(cs, target, side="left")) + 1
    return np.sort(order[:k]), False


def lift_marks(mesh: TwoGridMesh, fine_marked) -> np.ndarray:
    """Coarse parents of marked fine elements."""
    return np.unique(mesh.parent[np.asarray(fine_marked, dtype=np.int64)])


def rate(E0: float, E1: float, N0: float, N1: float):
    """``log(E1 / E0) / log(N0 / N1)``, or None when undefined."""
    if N0 == N1 or E0 <= 0 or E1 <= 0:
        return None
    return math.log(E1 / E0) / math.log(N0 / N1)


def loglog_slope(N, E) -> float:
    """Negative least-squares slope of log E against log N."""
    lx, ly = np.log(np.asarray(N, float)), np.log(np.asarray(E, float))
    return float(-np.polyfit(lx, ly, 1)[0])


@dataclass
class ConvergenceHistory:
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def fill_rates(self) -> None:
        for k, row in enumerate(self.rows):
            if k == 0:
                row["rate_error"] = row["rate_estimator"] = None
                continue
            prev = self.rows[k - 1]
            row["rate_error"] = rate(prev["error_total"], row["error_total"], prev["N"], row["N"])
            row["rate_estimator"] = rate(prev["estimator_total"], row["estimator_total"], prev["N"], row["N"])

    def slope(self, name: str, last: int = 5) -> float:
        return loglog_slope(self.column("N")[-last:], self.column(name)[-last:])

    def write_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                wr.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in HISTORY_COLUMNS])

    def write_loglog(self, path) -> None:
        with Path(path).open("w") as fh:
            for r in self.rows:
                fh.write(f"{r['N']} {r['error_total']!r} {r['estimator_total']!r}\n")

    @classmethod
    def read_csv(cls, path) -> "ConvergenceHistory":
        with Path(path).open(newline="") as fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames != HISTORY_COLUMNS:
                raise ValueError(f"unexpected history columns {rd.fieldnames}")
            rows = []
            for r in rd:
                row = {}
                for c in HISTORY_COLUMNS:
                    v = r[c]
                    if v == "":
                        row[c] = None
                    elif c in ("level", "N", "pdas_iters"):
                        row[c] = int(v)
                    else:
                        row[c] = float(v)
                rows.append(row)
        return cls(rows)


def rates(history: ConvergenceHistory):
    """Per-level ``(rate_error, rate_estimator)``; the first entry is ``(None, None)``."""
    if len(history) < 2:
        raise ValueError("rates need at least two levels")
    history.fill_rates()
    return [(r["rate_error"], r["rate_estimator"]) for r in history.rows]


def warm_start(old_sol: OptimalityPoint, new_sys, bounds) -> np.ndarray:
    """Old control interpolated at the new fine vertices, projected into the bounds."""
    old = old_sol.sys.mesh.fine
    loc = PointLocator(old.vertices, old.triangles)
    Xn = new_sys.mesh.fine.vertices
    tid, lam = loc.locate(Xn)
    nodes = old.triangles[tid]
    nv_old = old.n_vertices
    vals = [np.einsum("nk,nk->n", lam, old_sol.y[nodes + i * nv_old]) for i in range(2)]
    return project(new_sys, new_sys.to_control(np.concatenate(vals)), bounds)


def optimality_diagnostics(sys, sol: OptimalityPoint, est: EstimatorBreakdown) -> dict:
    """Feasibility, sign and divergence checks of a converged level."""
    ya, yb = (np.asarray(b, float) for b in sol.bounds)
    nc = sys.n_contact
    comp = np.arange(2 * nc) // max(nc, 1)
    yc = sol.y_contact
    muc = sol.mu_contact
    feas = float(max(0.0, np.max(ya[comp] - yc, initial=0.0), np.max(yc - yb[comp], initial=0.0)))
    act = sol.active
    mu_sign = float(max(np.max(muc[act.lower], initial=0.0), np.max(-muc[act.upper], initial=0.0)))
    mu_inactive = float(np.max(np.abs(muc[act.inactive]), initial=0.0))
    ta = np.abs(yc - ya[comp]) <= 1e-10 * np.maximum(1.0, np.abs(ya[comp]))
    tb = np.abs(yc - yb[comp]) <= 1e-10 * np.maximum(1.0, np.abs(yb[comp]))
    s = est.s
    s_viol = float(
        max(
            np.max(s[ta], initial=0.0),
            np.max(-s[tb], initial=0.0),
            np.max(np.abs(s[~ta & ~tb]), initial=0.0),
        )
    )
    Dabs = abs(sys.D)

    def div_res(v):
        return float(np.max(np.abs(sys.D.T @ v)) / max(1.0, float(np.max(Dabs.T @ np.abs(v)))))

    return {
        "feasibility_violation": feas,
        "mu_sign_violation": mu_sign,
        "mu_inactive_max": mu_inactive,
        "s_sign_violation": s_viol,
        "div_u_residual": div_res(sol.u),
        "div_phi_residual": div_res(sol.phi),
        "eta_y_d": est.eta_y_d,
        "eta_y_e": est.eta_y_e,
        "kkt_residual": sol.report.residual_norm,
        "n_lower": sol.active.n_lower,
        "n_upper": sol.active.n_upper,
    }


def afem_run(case: BenchmarkCase, config: AfemConfig, out_dir=None) -> ConvergenceHistory:
    """Adaptive (or uniform) loop; writes the run files when ``out_dir`` is given."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = ConvergenceHistory()
    mesh = build_initial(case.domain, config.initial_h or case.initial_h)
    prev = None
    for level in range(config.max_levels):
        t0 = time.perf_counter()
        sys = assemble(mesh, case.f, case.u_d, config.quad_degree)
        y_d = sys.to_control(sys.interpolate(case.y_d))
        y0 = None if prev is None else warm_start(prev, sys, case.bounds)
        try:
            sol = pdas_solve(
                sys,
                case.rho,
                case.bounds,
                y_d,
                y0=y0,
                max_iter=config.pdas_max_iter,
                tol=config.pdas_tol,
                kkt_tol=config.kkt_tol,
                log_path=None if out is None else out / f"pdas_{level}.csv",
            )
        except PdasNonConvergence as exc:
            history.fill_rates()
            raise AfemAbort(f"level {level}: {exc}", history, level, exc.history) from exc
        err = compute_errors(sol, case, config.quad_degree)
        est = compute_estimator(sys, sol, case.f, case.u_d, config.quad_degree)
        row = {
            "level": level,
            "N": sys.n_dofs,
            "error_total": err.total,
            "estimator_total": est.total,
            "eta_state": est.eta_state,
            "eta_adjoint": est.eta_adjoint,
            "eta_control": est.eta_control,
            "err_u": err.err_u,
            "err_p": err.err_p,
            "err_phi": err.err_phi,
            "err_r": err.err_r,
            "err_y": err.err_y,
            "pdas_iters": sol.iterations,
            "rate_error": None,
            "rate_estimator": None,
        }
        history.rows.append(row)
        diag = optimality_diagnostics(sys, sol, est)
        history.fill_rates()
        if out is not None:
            write_mesh(out / f"mesh_{level}.txt", mesh.coarse)
            write_estimator_dump(out / f"estimator_{level}.csv", est, mesh)
            history.write_csv(out / "history.csv")
            history.write_loglog(out / "loglog.dat")
        last = sys.n_dofs >= config.max_dofs or level + 1 >= config.max_levels
        ind2 = element_indicators(est, mesh)
        if config.mode == "uniform":
            marked = np.arange(mesh.coarse.n_triangles)
            diag["marked_fraction"] = 1.0
        else:
            fine_marked, done = doerfler_mark(ind2, config.theta)
            if done:
                last = True
            marked = lift_marks(mesh, fine_marked)
            diag["marked_fraction"] = len(marked) / mesh.coarse.n_triangles
        diag["marked"] = marked
        diag["wall_time"] = time.perf_counter() - t0
        diag["n_coarse"] = mesh.coarse.n_triangles
        history.diagnostics.append(diag)
        log.info(
            "level %d N=%d error=%.4e estimator=%.4e pdas=%d (%.2fs)",
            level, row["N"], row["error_total"], row["estimator_total"], sol.iterations, diag["wall_time"],
        )
        if last:
            break
        centroids = mesh.coarse.vertices[mesh.coarse.triangles].mean(axis=1)
        diag["marked_centroids"] = centroids[marked]
        diag["all_centroids"] = centroids
        mesh = bisect_coarse(mesh, marked)
        if config.mode == "uniform":
            # a second full sweep makes every coarse triangle four congruent-class children
            mesh = bisect_coarse(mesh, np.arange(mesh.coarse.n_triangles))
        prev = sol
    return history
