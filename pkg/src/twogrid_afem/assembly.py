"""P1 (fine mesh) / P0 (coarse mesh) finite element operators.

Vector quantities are stored component-blocked over the *full* fine vertex
set: entry ``j + i * nv`` is component ``i`` at vertex ``j``. Constrained
subspaces are addressed through the dof index arrays on :class:`FeSystem`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import TwoGridMesh
from .quadrature import map_points, triangle_rule

__all__ = [
    "AssemblyError",
    "LocationError",
    "FeSystem",
    "DiscreteField",
    "ContactMass",
    "p1_gradients",
    "local_stiffness",
    "local_mass",
    "assemble",
    "boundary_mass_contact",
    "evaluate_field",
    "PointLocator",
    "write_coo",
]


class AssemblyError(RuntimeError):
    pass


class LocationError(LookupError):
    pass


def p1_gradients(vertices: np.ndarray, triangles: np.ndarray):
    """Areas (nt,) and barycentric gradients (nt, 3, 2).

    Raises AssemblyError on a degenerate element.
    """
    c = vertices[triangles]
    x0, x1, x2 = c[:, 0], c[:, 1], c[:, 2]
    det = (x1[:, 0] - x0[:, 0]) * (x2[:, 1] - x0[:, 1]) - (x1[:, 1] - x0[:, 1]) * (x2[:, 0] - x0[:, 0])
    area = 0.5 * det
    diam2 = np.max(
        [np.sum((x1 - x0) ** 2, axis=1), np.sum((x2 - x1) ** 2, axis=1), np.sum((x0 - x2) ** 2, axis=1)], axis=0
    )
    bad = np.nonzero(area <= 1e-14 * diam2)[0]
    if bad.size:
        raise AssemblyError(f"degenerate triangle {int(bad[0])} (area {area[bad[0]]:.3e})")
    g = np.empty((len(triangles), 3, 2))
    g[:, 0] = np.column_stack([x1[:, 1] - x2[:, 1], x2[:, 0] - x1[:, 0]])
    g[:, 1] = np.column_stack([x2[:, 1] - x0[:, 1], x0[:, 0] - x2[:, 0]])
    g[:, 2] = np.column_stack([x0[:, 1] - x1[:, 1], x1[:, 0] - x0[:, 0]])
    g /= det[:, None, None]
    return area, g


def local_stiffness(area, grads):
    """Element matrices int grad(l_i) . grad(l_j), shape (nt, 3, 3)."""
    return area[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)


_MASS_REF = (np.ones((3, 3)) + np.eye(3)) / 12.0


def local_mass(area):
    return area[:, None, None] * _MASS_REF[None]


def _scatter(triangles, local, n):
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _eval_vector(fun, x, y):
    v = fun(x, y)
    return np.broadcast_to(np.asarray(v[0], dtype=float), x.shape), np.broadcast_to(
        np.asarray(v[1], dtype=float), x.shape
    )


def load_vector(vertices, triangles, area, fun, quad_degree):
    """Component-blocked load vector int fun . (l_j e_i)."""
    bary, w = triangle_rule(quad_degree)
    pts = map_points(vertices, triangles, bary)
    fx, fy = _eval_vector(fun, pts[..., 0], pts[..., 1])
    nv = len(vertices)
    out = np.zeros(2 * nv)
    for i, comp in enumerate((fx, fy)):
        loc = area[:, None] * np.einsum("tq,q,qk->tk", comp, w, bary)
        out[i * nv : (i + 1) * nv] = np.bincount(triangles.ravel(), weights=loc.ravel(), minlength=nv)
    return out


@dataclass
class FeSystem:
    """Assembled operators for one two-grid mesh.

    ``A`` and ``M`` are scalar P1 matrices over all fine vertices; ``D`` is
    the vector divergence matrix ``D[(j, i), k] = int div(l_j e_i) chi_k``
    coupling fine vector dofs to coarse P0 dofs.
    """

    mesh: TwoGridMesh
    A: sp.csr_matrix
    M: sp.csr_matrix
    D: sp.csr_matrix
    F1: np.ndarray
    F2: np.ndarray
    area: np.ndarray
    grads: np.ndarray
    interior: np.ndarray
    control: np.ndarray
    contact: np.ndarray

    @property
    def nv(self) -> int:
        return self.mesh.fine.n_vertices

    @property
    def n_v(self) -> int:
        return len(self.interior)

    @property
    def n_q(self) -> int:
        return len(self.control)

    @property
    def n_p(self) -> int:
        return self.mesh.coarse.n_triangles

    @property
    def n_contact(self) -> int:
        return len(self.contact)

    @property
    def n_dofs(self) -> int:
        """Unknowns of the coupled system: w, y, p, phi, r, mu."""
        return 2 * self.n_v + 2 * self.n_q + 2 * self.n_p + 2 * self.n_q

    @cached_property
    def vel_dofs(self) -> np.ndarray:
        return np.concatenate([self.interior, self.interior + self.nv])

    @cached_property
    def ctrl_dofs(self) -> np.ndarray:
        return np.concatenate([self.control, self.control + self.nv])

    @cached_property
    def contact_pos(self) -> np.ndarray:
        """Positions of contact pairs (component-blocked) inside the control space."""
        pos = np.searchsorted(self.control, self.contact)
        return np.concatenate([pos, pos + self.n_q])

    @cached_property
    def A2(self) -> sp.csr_matrix:
        return sp.block_diag([self.A, self.A], format="csr")

    @cached_property
    def M2(self) -> sp.csr_matrix:
        return sp.block_diag([self.M, self.M], format="csr")

    @cached_property
    def coarse_area(self) -> np.ndarray:
        return self.mesh.coarse.signed_areas()

    def interpolate(self, fun) -> np.ndarray:
        """Nodal interpolant of a vector callable, component-blocked."""
        X = self.mesh.fine.vertices
        fx, fy = _eval_vector(fun, X[:, 0], X[:, 1])
        return np.concatenate([fx, fy])

    def to_control(self, full: np.ndarray) -> np.ndarray:
        return full[self.ctrl_dofs]

    def from_control(self, ctrl: np.ndarray) -> np.ndarray:
        out = np.zeros(2 * self.nv)
        out[self.ctrl_dofs] = ctrl
        return out


def assemble(mesh: TwoGridMesh, f, u_d, quad_degree: int = 5) -> FeSystem:
    """Assemble stiffness, mass, divergence and the two load vectors.

    ``f`` and ``u_d`` map coordinate arrays ``(x, y)`` to a pair of
    component arrays.
    """
    if quad_degree < 2:
        raise ValueError("quad_degree must be at least 2")
    fine = mesh.fine
    X, T = fine.vertices, fine.triangles
    nv = len(X)
    area, g = p1_gradients(X, T)
    A = _scatter(T, local_stiffness(area, g), nv)
    M = _scatter(T, local_mass(area), nv)
    kappa = mesh.coarse.n_triangles
    parent = mesh.parent
    vals = area[:, None, None] * g  # (nt, 3, 2): int_K d(l_j)/dx_i
    rows = np.concatenate([T.ravel(), T.ravel() + nv])
    cols = np.concatenate([np.repeat(parent, 3), np.repeat(parent, 3)])
    data = np.concatenate([vals[:, :, 0].ravel(), vals[:, :, 1].ravel()])
    D = sp.coo_matrix((data, (rows, cols)), shape=(2 * nv, kappa)).tocsr()
    F1 = load_vector(X, T, area, f, quad_degree)
    F2 = load_vector(X, T, area, u_d, quad_degree)
    excluded = np.zeros(nv, dtype=bool)
    excluded[mesh.dirichlet_vertices] = True
    excluded[mesh.neumann_vertices] = True
    return FeSystem(
        mesh=mesh,
        A=A,
        M=M,
        D=D,
        F1=F1,
        F2=F2,
        area=area,
        grads=g,
        interior=mesh.interior_vertices,
        control=np.nonzero(~excluded)[0],
        contact=mesh.contact_vertices,
    )


@dataclass
class ContactMass:
    """Boundary integrals of hat functions over contact sides.

    Arrays are indexed like ``mesh.contact_vertices`` with two side slots
    (unused slots have zero length). ``inner`` refers to the sub-segment of
    each side of length one third adjacent to the node.
    """

    vertices: np.ndarray
    side_edges: np.ndarray
    side_length: np.ndarray
    side_other: np.ndarray

    @property
    def phi(self) -> np.ndarray:
        """int over gamma_{p,C} of phi_p."""
        return 0.5 * self.side_length.sum(axis=1)

    @property
    def inner_phi(self) -> np.ndarray:
        """int over the inner third of phi_p."""
        return 5.0 / 18.0 * self.side_length.sum(axis=1)

    @property
    def inner_phi_phi(self) -> np.ndarray:
        """int over the inner third of phi_p ** 2."""
        return 19.0 / 81.0 * self.side_length.sum(axis=1)

    @property
    def inner_phi_other(self) -> np.ndarray:
        """Per side: int over the inner third of phi_q * phi_p, q the far end."""
        return 7.0 / 162.0 * self.side_length

    def index(self, p: int) -> int:
        k = np.searchsorted(self.vertices, p)
        if k >= len(self.vertices) or self.vertices[k] != p:
            raise ValueError(f"vertex {p} is not a contact vertex")
        return int(k)

    def inner_integral(self, nodal: np.ndarray, value: float) -> np.ndarray:
        """int over the inner thirds of (value - v_h) phi_p for a P1 scalar ``nodal``."""
        own = nodal[self.vertices]
        other = np.where(self.side_length > 0, nodal[np.maximum(self.side_other, 0)], 0.0)
        return value * self.inner_phi - own * self.inner_phi_phi - (other * self.inner_phi_other).sum(axis=1)


def boundary_mass_contact(mesh: TwoGridMesh) -> ContactMass:
    verts = mesh.contact_vertices
    E = mesh.edges
    ce = mesh.contact_edges
    ends = E[ce]
    owner = np.concatenate([ends[:, 0], ends[:, 1]])
    other = np.concatenate([ends[:, 1], ends[:, 0]])
    eid = np.concatenate([ce, ce])
    keep = np.isin(owner, verts)
    owner, other, eid = owner[keep], other[keep], eid[keep]
    order = np.lexsort((eid, owner))
    owner, other, eid = owner[order], other[order], eid[order]
    pos = np.searchsorted(verts, owner)
    slot = np.zeros(len(owner), dtype=np.int64)
    slot[1:] = (pos[1:] == pos[:-1]).astype(np.int64)
    if np.any(slot > 1) or np.any(np.bincount(pos, minlength=len(verts)) > 2):
        raise AssemblyError("contact vertex with more than two contact sides")
    X = mesh.fine.vertices
    side_edges = np.full((len(verts), 2), -1, dtype=np.int64)
    side_other = np.full((len(verts), 2), -1, dtype=np.int64)
    side_length = np.zeros((len(verts), 2))
    side_edges[pos, slot] = eid
    side_other[pos, slot] = other
    side_length[pos, slot] = np.linalg.norm(X[E[eid, 1]] - X[E[eid, 0]], axis=1)
    return ContactMass(verts, side_edges, side_length, side_other)


class PointLocator:
    """Barycentric point location on a triangle mesh."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        self.vertices = vertices
        self.triangles = triangles
        self._tree = cKDTree(vertices[triangles].mean(axis=1))

    def _bary(self, pts, tids):
        c = self.vertices[self.triangles[tids]]
        x0 = c[..., 0, :]
        m = np.stack([c[..., 1, :] - x0, c[..., 2, :] - x0], axis=-1)
        rhs = pts - x0
        det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
        l1 = (rhs[..., 0] * m[..., 1, 1] - rhs[..., 1] * m[..., 0, 1]) / det
        l2 = (m[..., 0, 0] * rhs[..., 1] - m[..., 1, 0] * rhs[..., 0]) / det
        return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)

    def locate(self, points: np.ndarray, tol: float = 1e-10):
        """Element id and barycentric coordinates for each point."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        nt = len(self.triangles)
        k = min(12, nt)
        _, cand = self._tree.query(pts, k=k)
        cand = np.asarray(cand).reshape(len(pts), k)
        lam = self._bary(pts[:, None, :], cand)
        score = lam.min(axis=2)
        best = np.argmax(score, axis=1)
        rows = np.arange(len(pts))
        tid = cand[rows, best]
        bary = lam[rows, best]
        miss = np.nonzero(score[rows, best] < -tol)[0]
        for i in miss:
            lam_all = self._bary(np.broadcast_to(pts[i], (nt, 2)), np.arange(nt))
            j = int(np.argmax(lam_all.min(axis=1)))
            if lam_all[j].min() < -tol:
                raise LocationError(f"point {pts[i].tolist()} lies outside the mesh")
            tid[i], bary[i] = j, lam_all[j]
        return tid, bary


@dataclass
class DiscreteField:
    """A P1 vector field on the fine mesh or a P0 scalar on the coarse mesh."""

    kind: str
    values: np.ndarray
    mesh: TwoGridMesh

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind == "velocity_like":
            expected = 2 * self.mesh.fine.n_vertices
        elif self.kind == "pressure_like":
            expected = self.mesh.coarse.n_triangles
        else:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.values.shape != (expected,):
            raise ValueError(f"{self.kind} field needs {expected} coefficients, got {self.values.shape}")


def evaluate_field(field: DiscreteField, point, locator: PointLocator | None = None):
    """Value of ``field`` at ``point`` (or an (n, 2) array of points)."""
    pts = np.atleast_2d(np.asarray(point, dtype=float))
    if field.kind == "velocity_like":
        m = field.mesh.fine
        loc = locator or PointLocator(m.vertices, m.triangles)
        tid, lam = loc.locate(pts)
        nodes = m.triangles[tid]
        nv = m.n_vertices
        vx = np.einsum("nk,nk->n", lam, field.values[nodes])
        vy = np.einsum("nk,nk->n", lam, field.values[nodes + nv])
        out = np.column_stack([vx, vy])
    else:
        m = field.mesh.coarse
        loc = locator or PointLocator(m.vertices, m.triangles)
        tid, _ = loc.locate(pts)
        out = field.values[tid]
    return out[0] if np.ndim(point) == 1 else out


def write_coo(path, matrix) -> None:
    """Dump a sparse matrix as zero-based ``i j value`` lines."""
    c = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        for i, j, v in zip(c.row.tolist(), c.col.tolist(), c.data.tolist()):
            fh.write(f"{i} {j} {v!r}\n")
