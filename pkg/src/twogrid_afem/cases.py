"""Manufactured benchmark problems and error norms.

Callables take coordinate arrays ``(x, y)``. Vector fields return arrays of
shape ``(2, ...)``, gradients ``(2, 2, ...)`` with ``[i, j] = d v_i / d x_j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .mesh import DomainSpec, lshape, unit_square
from .quadrature import map_points, triangle_rule

__all__ = [
    "BenchmarkCase",
    "ErrorReport",
    "CheckResult",
    "case_square",
    "case_lshape",
    "get_case",
    "case_square_consistent",
    "case_lshape_consistent",
    "CASES",
    "compute_errors",
    "verify_case",
    "ALPHA",
]

PI = np.pi


@dataclass
class BenchmarkCase:
    name: str
    domain: DomainSpec
    rho: float
    bounds: tuple
    u: Callable
    grad_u: Callable
    lap_u: Callable
    p: Callable
    grad_p: Callable
    phi: Callable
    grad_phi: Callable
    lap_phi: Callable
    r: Callable
    grad_r: Callable
    f: Callable
    u_d: Callable
    initial_h: float = 0.5
    corner: tuple | None = None

    # the exact control coincides with the exact velocity in both examples
    def y(self, x, y):
        return self.u(x, y)

    def grad_y(self, x, y):
        return self.grad_u(x, y)

    def y_d(self, x, y):
        return self.u(x, y)


# ---------------------------------------------------------------- adjoint pair


def _phi(x, y):
    return np.array([0.5 * np.sin(PI * x) ** 2 * np.sin(2 * PI * y), -0.5 * np.sin(PI * y) ** 2 * np.sin(2 * PI * x)])


def _grad_phi(x, y):
    s2x, s2y = np.sin(2 * PI * x), np.sin(2 * PI * y)
    return np.array(
        [
            [0.5 * PI * s2x * s2y, PI * np.sin(PI * x) ** 2 * np.cos(2 * PI * y)],
            [-PI * np.sin(PI * y) ** 2 * np.cos(2 * PI * x), -0.5 * PI * s2y * s2x],
        ]
    )


def _lap_phi(x, y):
    s2x, s2y = np.sin(2 * PI * x), np.sin(2 * PI * y)
    return np.array(
        [
            PI**2 * np.cos(2 * PI * x) * s2y - 2 * PI**2 * np.sin(PI * x) ** 2 * s2y,
            2 * PI**2 * np.sin(PI * y) ** 2 * s2x - PI**2 * np.cos(2 * PI * y) * s2x,
        ]
    )


def _sinsin(x, y):
    return np.sin(2 * PI * x) * np.sin(2 * PI * y)


def _grad_sinsin(x, y):
    return 2 * PI * np.array([np.cos(2 * PI * x) * np.sin(2 * PI * y), np.sin(2 * PI * x) * np.cos(2 * PI * y)])


# ---------------------------------------------------------------- square


def _u_sq(x, y):
    ex = np.exp(x)
    return np.array([-ex * (y * np.cos(y) + np.sin(y)), ex * y * np.sin(y)])


def _grad_u_sq(x, y):
    ex = np.exp(x)
    u1, u2 = _u_sq(x, y)
    return np.array(
        [[u1, -ex * (2 * np.cos(y) - y * np.sin(y))], [u2, ex * (np.sin(y) + y * np.cos(y))]]
    )


def _lap_u_sq(x, y):
    ex = np.exp(x)
    return np.array([2 * ex * np.sin(y), 2 * ex * np.cos(y)])


def _make(name, domain, rho, bounds, u, gu, lu, p, gp, initial_h, corner=None):
    def f(x, y):
        return -lu(x, y) + gp(x, y)

    def u_d(x, y):
        return u(x, y) + _lap_phi(x, y) + _grad_sinsin(x, y)

    return BenchmarkCase(
        name=name,
        domain=domain,
        rho=rho,
        bounds=bounds,
        u=u,
        grad_u=gu,
        lap_u=lu,
        p=p,
        grad_p=gp,
        phi=_phi,
        grad_phi=_grad_phi,
        lap_phi=_lap_phi,
        r=_sinsin,
        grad_r=_grad_sinsin,
        f=f,
        u_d=u_d,
        initial_h=initial_h,
        corner=corner,
    )


def case_square() -> BenchmarkCase:
    """Unit square, Dirichlet bottom side, contact elsewhere."""
    return _make(
        "square",
        unit_square(),
        1e-2,
        (np.array([-4.0, -2.0]), np.array([2.0, 2.5])),
        _u_sq,
        _grad_u_sq,
        _lap_u_sq,
        _sinsin,
        _grad_sinsin,
        initial_h=0.75,
    )


# ---------------------------------------------------------------- L-shape

ALPHA = 856399 / 1572864
_W = 3 * PI / 2
_S = 1 + ALPHA
_T = ALPHA - 1
_C1 = np.cos(ALPHA * _W) / (1 + ALPHA)


def _omega(theta, k: int = 0):
    """k-th derivative of the angular profile as printed."""
    out = 0.0
    for a in (_S, _T):
        ph = theta * a + k * PI / 2
        out = out + a**k * (_C1 * np.sin(ph) - np.cos(ph))
    return out


def _polar(x, y):
    rr = np.hypot(x, y)
    th = np.arctan2(y, x)
    # the branch cut lies in the removed quadrant, so the ray x = 0, y < 0 maps to 3 pi / 2
    th = np.where(th < -PI / 4, th + 2 * PI, th)
    return rr, th


def _grad_polar(rr, th, beta, G, dG):
    """Gradient of r**beta * G(theta)."""
    rb = rr ** (beta - 1)
    c, s = np.cos(th), np.sin(th)
    return np.array([rb * (beta * c * G - s * dG), rb * (beta * s * G + c * dG)])


def _u_l(x, y):
    rr, th = _polar(np.asarray(x, float), np.asarray(y, float))
    w0, w1 = _omega(th), _omega(th, 1)
    c, s = np.cos(th), np.sin(th)
    ra = rr**ALPHA
    return np.array([ra * (_S * s * w0 + c * w1), ra * (-_S * c * w0 + s * w1)])


def _grad_u_l(x, y):
    # u = (d_y psi, -d_x psi) with psi = r**(1+alpha) * omega
    rr, th = _polar(np.asarray(x, float), np.asarray(y, float))
    w = [_omega(th, k) for k in range(3)]
    c, s = np.cos(th), np.sin(th)
    # components of u in polar-separable form r**alpha * U_i(theta)
    U1 = _S * s * w[0] + c * w[1]
    U2 = -_S * c * w[0] + s * w[1]
    dU1 = _S * c * w[0] + _S * s * w[1] - s * w[1] + c * w[2]
    dU2 = _S * s * w[0] - _S * c * w[1] + c * w[1] + s * w[2]
    g1 = _grad_polar(rr, th, ALPHA, U1, dU1)
    g2 = _grad_polar(rr, th, ALPHA, U2, dU2)
    return np.array([g1, g2])


def _g(th, k=0):
    """k-th derivative of g = s^2 omega + omega'' (Laplacian of psi is r**(alpha-1) g)."""
    return _S**2 * _omega(th, k) + _omega(th, k + 2)


def _lap_u_l(x, y):
    rr, th = _polar(np.asarray(x, float), np.asarray(y, float))
    gx, gy = _grad_polar(rr, th, _T, _g(th), _g(th, 1))
    return np.array([gy, -gx])


def _check_corner(rr):
    if np.any(rr < 1e-14):
        raise ValueError("pressure requested at the reentrant corner")


def _p_l(x, y):
    rr, th = _polar(np.asarray(x, float), np.asarray(y, float))
    _check_corner(rr)
    return -(rr**_T) * (_S**2 * _omega(th, 1) + _omega(th, 3)) / (1 - ALPHA)


def _grad_p_l(x, y):
    rr, th = _polar(np.asarray(x, float), np.asarray(y, float))
    _check_corner(rr)
    return _grad_polar(rr, th, _T, _g(th, 1) / _T, _g(th, 2) / _T)


def case_lshape() -> BenchmarkCase:
    """L-shaped domain with contact on the whole boundary."""
    return _make(
        "lshape",
        lshape(),
        1e-2,
        (np.array([-3.0, -3.0]), np.array([4.0, 4.0])),
        _u_l,
        _grad_u_l,
        _lap_u_l,
        _p_l,
        _grad_p_l,
        initial_h=1.0,
        corner=(0.0, 0.0),
    )


# ---------------------------------------------------------------- consistent adjoint
# phi = curl(S**4), S = sin(pi x) sin(pi y): grad(phi) vanishes on the boundary,
# so the stated exact control satisfies the boundary optimality condition.


def _S_parts(x, y):
    a, b = PI * np.asarray(x, float), PI * np.asarray(y, float)
    S = np.sin(a) * np.sin(b)
    Sx = PI * np.cos(a) * np.sin(b)
    Sy = PI * np.sin(a) * np.cos(b)
    Sxy = PI**2 * np.cos(a) * np.cos(b)
    return S, Sx, Sy, Sxy


def _phi_c(x, y):
    S, Sx, Sy, _ = _S_parts(x, y)
    return np.array([4 * S**3 * Sy, -4 * S**3 * Sx])


def _grad_phi_c(x, y):
    S, Sx, Sy, Sxy = _S_parts(x, y)
    pxx = 12 * S**2 * Sx**2 - 4 * PI**2 * S**4
    pyy = 12 * S**2 * Sy**2 - 4 * PI**2 * S**4
    pxy = 12 * S**2 * Sx * Sy + 4 * S**3 * Sxy
    return np.array([[pxy, pyy], [-pxx, -pxy]])


def _lap_phi_c(x, y):
    S, Sx, Sy, Sxy = _S_parts(x, y)
    q = Sx**2 + Sy**2
    dx = 24 * S * Sx * q + 24 * S**2 * (-PI**2 * S * Sx + Sy * Sxy) - 32 * PI**2 * S**3 * Sx
    dy = 24 * S * Sy * q + 24 * S**2 * (Sx * Sxy - PI**2 * S * Sy) - 32 * PI**2 * S**3 * Sy
    return np.array([dy, -dx])


def _consistent(case: BenchmarkCase) -> BenchmarkCase:
    def u_d(x, y):
        return case.u(x, y) + _lap_phi_c(x, y) + _grad_sinsin(x, y)

    case.name += "_consistent"
    case.phi, case.grad_phi, case.lap_phi, case.u_d = _phi_c, _grad_phi_c, _lap_phi_c, u_d
    return case


def case_square_consistent() -> BenchmarkCase:
    """Square case with an adjoint velocity whose normal derivative vanishes."""
    return _consistent(case_square())


def case_lshape_consistent() -> BenchmarkCase:
    """L-shape case with an adjoint velocity whose normal derivative vanishes."""
    return _consistent(case_lshape())


CASES = {
    "square": case_square,
    "lshape": case_lshape,
    "square_consistent": case_square_consistent,
    "lshape_consistent": case_lshape_consistent,
}


def get_case(name: str) -> BenchmarkCase:
    try:
        return CASES[name]()
    except KeyError:
        raise ValueError(f"unknown case {name!r}") from None


# ---------------------------------------------------------------- errors


@dataclass
class ErrorReport:
    err_u: float
    err_p: float
    err_phi: float
    err_r: float
    err_y: float

    @property
    def total(self) -> float:
        return self.err_y + self.err_u + self.err_p + self.err_phi + self.err_r

    def as_dict(self) -> dict:
        return {
            "err_u": self.err_u,
            "err_p": self.err_p,
            "err_phi": self.err_phi,
            "err_r": self.err_r,
            "err_y": self.err_y,
            "error_total": self.total,
        }


def _elem_grad(T, grads, values, nv):
    """Constant P1 gradient per element, shape (nt, 2, 2)."""
    out = np.empty((len(T), 2, 2))
    for i in range(2):
        out[:, i, :] = np.einsum("tk,tkd->td", values[T + i * nv], grads)
    return out


def h1_seminorm_error(mesh, area, grads, values, grad_exact, quad_degree: int = 5) -> float:
    X, T = mesh.fine.vertices, mesh.fine.triangles
    bary, w = triangle_rule(quad_degree)
    pts = map_points(X, T, bary)
    G = grad_exact(pts[..., 0], pts[..., 1])  # (2, 2, nt, nq)
    Gh = _elem_grad(T, grads, values, len(X))  # (nt, 2, 2)
    d = G - np.transpose(Gh, (1, 2, 0))[..., None]
    return float(np.sqrt(np.sum(area[:, None] * w[None] * np.sum(d**2, axis=(0, 1)))))


def pressure_error(mesh, area, values_coarse, exact, quad_degree: int = 5) -> float:
    """L2 distance between zero-mean representatives."""
    X, T = mesh.fine.vertices, mesh.fine.triangles
    bary, w = triangle_rule(quad_degree)
    pts = map_points(X, T, bary)
    P = exact(pts[..., 0], pts[..., 1])
    omega = float(area.sum())
    mean_exact = float(np.sum(area[:, None] * w[None] * P)) / omega
    ph = values_coarse[mesh.parent]
    mean_h = float(area @ ph) / omega
    d = (P - mean_exact) - (ph - mean_h)[:, None]
    return float(np.sqrt(np.sum(area[:, None] * w[None] * d**2)))


def compute_errors(sol, case: BenchmarkCase, quad_degree: int = 5) -> ErrorReport:
    if quad_degree < 5:
        raise ValueError("error quadrature needs degree >= 5")
    sys = sol.sys
    m, a, g = sys.mesh, sys.area, sys.grads
    return ErrorReport(
        err_u=h1_seminorm_error(m, a, g, sol.u, case.grad_u, quad_degree),
        err_p=pressure_error(m, a, sol.p, case.p, quad_degree),
        err_phi=h1_seminorm_error(m, a, g, sol.phi, case.grad_phi, quad_degree),
        err_r=pressure_error(m, a, sol.r, case.r, quad_degree),
        err_y=h1_seminorm_error(m, a, g, sol.y, case.grad_y, quad_degree),
    )


# ---------------------------------------------------------------- verification


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tol)


def _in_polygon(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Even-odd ray casting, strict interior for generic points."""
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(poly)
    for k in range(n):
        (x1, y1), (x2, y2) = poly[k], poly[(k + 1) % n]
        cond = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (x < xc)
    return inside


def sample_interior(domain: DomainSpec, n: int = 100, margin: float = 1e-3) -> np.ndarray:
    """First ``n`` Halton points strictly inside the polygon."""
    poly = domain.polygon
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    gen = qmc.Halton(d=2, scramble=False)
    gen.fast_forward(1)
    out = []
    while sum(len(o) for o in out) < n:
        cand = lo + (hi - lo) * gen.random(4 * n)
        keep = _in_polygon(poly, cand)
        # keep away from the boundary so the difference stencil stays inside
        d = np.min(np.stack([_dist_to_segment(cand, poly[k], poly[(k + 1) % len(poly)]) for k in range(len(poly))]), axis=0)
        out.append(cand[keep & (d > margin)])
    return np.concatenate(out)[:n]


def _dist_to_segment(pts, a, b):
    ab = b - a
    t = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(pts - proj, axis=1)


def _scaled(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def verify_case(case: BenchmarkCase, n: int = 100, step: float = 1e-5, tol: float = 1e-5) -> list:
    """Finite-difference checks of the manufactured data.

    Derivatives of the hand-coded gradients are compared against central
    differences of the fields; ``f`` and ``u_d`` are compared against
    reconstructions built only from difference quotients of ``u``, ``p``,
    ``phi``, ``r`` and the analytic gradients.
    """
    pts = sample_interior(case.domain, n)
    x, y = pts[:, 0], pts[:, 1]
    h = step

    def div_of_grad(grad):
        gxp, gxm = grad(x + h, y), grad(x - h, y)
        gyp, gym = grad(x, y + h), grad(x, y - h)
        return (gxp[:, 0] - gxm[:, 0]) / (2 * h) + (gyp[:, 1] - gym[:, 1]) / (2 * h)

    def fd_vec_grad(fun):
        dx = (fun(x + h, y) - fun(x - h, y)) / (2 * h)
        dy = (fun(x, y + h) - fun(x, y - h)) / (2 * h)
        return np.stack([dx, dy], axis=1)

    def fd_scalar_grad(fun):
        return np.array([(fun(x + h, y) - fun(x - h, y)) / (2 * h), (fun(x, y + h) - fun(x, y - h)) / (2 * h)])

    lap_u_fd = div_of_grad(case.grad_u)
    lap_phi_fd = div_of_grad(case.grad_phi)
    f_fd = -lap_u_fd + fd_scalar_grad(case.p)
    ud_fd = case.u(x, y) + lap_phi_fd + fd_scalar_grad(case.r)
    gu = case.grad_u(x, y)
    gphi = case.grad_phi(x, y)
    checks = [
        CheckResult("grad_u", _scaled(gu, fd_vec_grad(case.u)), tol),
        CheckResult("grad_phi", _scaled(gphi, fd_vec_grad(case.phi)), tol),
        CheckResult("grad_p", _scaled(case.grad_p(x, y), fd_scalar_grad(case.p)), tol),
        CheckResult("grad_r", _scaled(case.grad_r(x, y), fd_scalar_grad(case.r)), tol),
        CheckResult("lap_u", _scaled(case.lap_u(x, y), lap_u_fd), tol),
        CheckResult("lap_phi", _scaled(case.lap_phi(x, y), lap_phi_fd), tol),
        CheckResult("f", _scaled(case.f(x, y), f_fd), tol),
        CheckResult("u_d", _scaled(case.u_d(x, y), ud_fd), tol),
        CheckResult("div_u", float(np.max(np.abs(gu[0, 0] + gu[1, 1]))), 1e-8),
        CheckResult("div_phi", float(np.max(np.abs(gphi[0, 0] + gphi[1, 1]))), 1e-8),
        CheckResult("div_u_fd", float(np.max(np.abs(fd_vec_grad(case.u)[0, 0] + fd_vec_grad(case.u)[1, 1]))), tol),
        CheckResult("y_d_equals_y", _scaled(case.y_d(x, y), case.y(x, y)), 0.0),
    ]
    poly = case.domain.polygon
    t = np.linspace(0.0, 1.0, n)
    bpts = np.concatenate([poly[k] + t[:, None] * (poly[(k + 1) % len(poly)] - poly[k]) for k in range(len(poly))])
    checks.append(CheckResult("phi_boundary", float(np.max(np.abs(case.phi(bpts[:, 0], bpts[:, 1])))), 1e-12))
    return checks
