"""Residual a posteriori estimator with contact and complementarity terms.

All terms are computed on the fine mesh. Element residuals use the P1/P0
structure: the Laplacian of a P1 field and the gradient of a P0 field vanish
elementwise, so those contributions are carried as explicit zeros.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assembly import FeSystem, boundary_mass_contact
from .mesh import CONTACT, TwoGridMesh
from .quadrature import map_points, triangle_rule

__all__ = [
    "FULL_A",
    "FULL_B",
    "SEMI_A",
    "SEMI_B",
    "INACTIVE",
    "ContactClassification",
    "EstimatorBreakdown",
    "element_gradients",
    "contact_stress",
    "lagrange_residual",
    "lagrange_residual_s",
    "complementarity_d",
    "classify",
    "compute_estimator",
    "element_indicators",
    "write_estimator_dump",
]

FULL_A, FULL_B, SEMI_A, SEMI_B, INACTIVE = "full_contact_a", "full_contact_b", "semi_contact_a", "semi_contact_b", "inactive_strict"
TOUCH_TOL = 1e-10
SIGN_TOL = 1e-12


def element_gradients(mesh: TwoGridMesh, grads: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Constant gradient of a component-blocked P1 vector field, shape (nt, 2, 2)."""
    T = mesh.fine.triangles
    nv = mesh.fine.n_vertices
    out = np.empty((len(T), 2, 2))
    for i in range(2):
        out[:, i, :] = np.einsum("tk,tkd->td", values[T + i * nv], grads)
    return out


def _edge_geometry(mesh: TwoGridMesh, edges: np.ndarray):
    """Lengths and unit normals pointing out of ``edge_elements[e, 0]``."""
    X = mesh.fine.vertices
    E = mesh.edges[edges]
    d = X[E[:, 1]] - X[E[:, 0]]
    length = np.linalg.norm(d, axis=1)
    n = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    t1 = mesh.edge_elements[edges, 0]
    cen = X[mesh.fine.triangles[t1]].mean(axis=1)
    flip = np.einsum("ed,ed->e", X[E[:, 0]] - cen, n) < 0
    n[flip] *= -1
    return length, n


def _apply(G: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Row-wise matrix-vector products, (m, 2, 2) x (m, 2)."""
    return np.einsum("mij,mj->mi", G, n)


def contact_stress(mesh: TwoGridMesh, rho: float, y, phi, r, y_d=None, edges=None, grads=None) -> np.ndarray:
    """Contact stress per contact side, shape (n_edges, 2).

    ``rho * grad(y - y_d) n - grad(phi) n - r n`` from the single adjacent
    fine element; ``y_d`` (full vertex vector) defaults to zero.
    """
    if edges is None:
        edges = mesh.contact_edges
    edges = np.asarray(edges, dtype=np.int64)
    if np.any(mesh.edge_labels[edges] != CONTACT):
        raise ValueError("contact stress requested on a non-contact side")
    if grads is None:
        from .assembly import p1_gradients

        _, grads = p1_gradients(mesh.fine.vertices, mesh.fine.triangles)
    t = mesh.edge_elements[edges, 0]
    _, n = _edge_geometry(mesh, edges)
    ctrl = y if y_d is None else y - y_d
    Gy = element_gradients(mesh, grads, ctrl)[t]
    Gphi = element_gradients(mesh, grads, phi)[t]
    rt = np.asarray(r)[mesh.parent[t]]
    return rho * _apply(Gy, n) - _apply(Gphi, n) - rt[:, None] * n


@dataclass
class ContactClassification:
    """Per contact pair ``k = c + i * n_c`` one class label; per contact side the stress."""

    labels: np.ndarray
    sigma: np.ndarray
    contact_edges: np.ndarray

    def count(self, label: str) -> int:
        return int(np.sum(self.labels == label))

    def mask(self, label: str) -> np.ndarray:
        return self.labels == label


@dataclass
class EstimatorBreakdown:
    elem_state_res: np.ndarray
    elem_adj_res: np.ndarray
    elem_div_u: np.ndarray
    elem_div_phi: np.ndarray
    edge_state_jump: np.ndarray
    edge_adj_jump: np.ndarray
    node_a: np.ndarray
    node_b: np.ndarray
    node_c: np.ndarray
    node_d: np.ndarray
    node_e: np.ndarray
    classification: ContactClassification
    s: np.ndarray
    d_a: np.ndarray
    d_b: np.ndarray

    @property
    def eta_state2(self) -> float:
        return float(self.elem_state_res.sum() + self.elem_div_u.sum() + self.edge_state_jump.sum())

    @property
    def eta_adjoint2(self) -> float:
        return float(self.elem_adj_res.sum() + self.elem_div_phi.sum() + self.edge_adj_jump.sum())

    @property
    def eta_control2(self) -> float:
        return float(self.node_a.sum() + self.node_b.sum() + self.node_c.sum() + self.node_d.sum() + self.node_e.sum())

    @property
    def eta_y_d(self) -> float:
        return float(self.node_d.sum())

    @property
    def eta_y_e(self) -> float:
        return float(self.node_e.sum())

    @property
    def eta_state(self) -> float:
        return float(np.sqrt(self.eta_state2))

    @property
    def eta_adjoint(self) -> float:
        return float(np.sqrt(self.eta_adjoint2))

    @property
    def eta_control(self) -> float:
        return float(np.sqrt(max(self.eta_control2, 0.0)))

    @property
    def total(self) -> float:
        return self.eta_state + self.eta_adjoint + self.eta_control

    @property
    def total2(self) -> float:
        return self.eta_state2 + self.eta_adjoint2 + self.eta_control2


def lagrange_residual(sys: FeSystem, sol) -> np.ndarray:
    """Discrete contact force on every control dof.

    ``a(x, phi) - b(x, r) - (u - u_d, x) - rho a(y - y_d, x)`` evaluated at
    the basis functions of the control space.
    """
    yd = sys.from_control(sol.y_d)
    full = (
        sys.A2 @ sol.phi
        + sys.D @ sol.r
        - sys.M2 @ sol.u
        + sys.F2
        - sol.rho * (sys.A2 @ (sol.y - yd))
    )
    return full[sys.ctrl_dofs]


def lagrange_residual_s(sys: FeSystem, sol, cm=None) -> np.ndarray:
    """``s_{p,i}`` for every contact pair (component-blocked over contact vertices)."""
    cm = cm or boundary_mass_contact(sys.mesh)
    denom = cm.phi
    if np.any(denom <= 0):
        raise ValueError("contact vertex without a contact side")
    lam = lagrange_residual(sys, sol)[sys.contact_pos]
    return lam / np.concatenate([denom, denom])


def complementarity_d(sys: FeSystem, sol, which: str, cm=None) -> np.ndarray:
    """Inner-third integrals ``int (bound_i - y_i) phi_p`` for every contact pair."""
    if which not in ("a", "b"):
        raise ValueError("which must be 'a' or 'b'")
    cm = cm or boundary_mass_contact(sys.mesh)
    bound = sol.bounds[0] if which == "a" else sol.bounds[1]
    nv = sys.nv
    return np.concatenate([cm.inner_integral(sol.y[i * nv : (i + 1) * nv], float(bound[i])) for i in range(2)])


def classify(sys: FeSystem, sol, sigma=None, touch_tol: float = TOUCH_TOL, sign_tol: float = SIGN_TOL) -> ContactClassification:
    mesh = sys.mesh
    ce = mesh.contact_edges
    if sigma is None:
        sigma = contact_stress(mesh, sol.rho, sol.y, sol.phi, sol.r, sol.y_d_full, ce, sys.grads)
    cm = boundary_mass_contact(mesh)
    nc = sys.n_contact
    ya, yb = (np.asarray(b, dtype=float) for b in sol.bounds)
    labels = np.full(2 * nc, INACTIVE, dtype=object)
    # side slot -> row of sigma
    slot_row = np.where(cm.side_edges >= 0, np.searchsorted(ce, np.maximum(cm.side_edges, 0)), -1)
    used = cm.side_edges >= 0
    for i in range(2):
        yi = sol.y[i * sys.nv + cm.vertices]
        sig = np.where(used, sigma[np.maximum(slot_row, 0), i], np.nan)
        nonneg = np.all(np.where(used, sig >= -sign_tol, True), axis=1)
        nonpos = np.all(np.where(used, sig <= sign_tol, True), axis=1)
        ta = np.abs(yi - ya[i]) <= touch_tol * max(1.0, abs(ya[i]))
        tb = np.abs(yi - yb[i]) <= touch_tol * max(1.0, abs(yb[i]))
        lab = np.full(nc, INACTIVE, dtype=object)
        lab[ta] = np.where(nonneg[ta], FULL_A, SEMI_A)
        lab[tb] = np.where(nonpos[tb], FULL_B, SEMI_B)
        labels[i * nc : (i + 1) * nc] = lab
    return ContactClassification(labels, sigma, ce)


def compute_estimator(sys: FeSystem, sol, f, u_d, quad_degree: int = 5) -> EstimatorBreakdown:
    """Evaluate every estimator contribution for a converged point."""
    if not getattr(sol, "converged", False):
        raise ValueError("estimator needs a converged optimality point")
    if quad_degree < 4:
        raise ValueError("data terms need quadrature degree >= 4")
    mesh = sys.mesh
    X, T = mesh.fine.vertices, mesh.fine.triangles
    nv = len(X)
    area, grads = sys.area, sys.grads
    hT = mesh.fine.diameters()
    parent = mesh.parent
    rho = sol.rho
    yd = sol.y_d_full

    # element terms
    bary, w = triangle_rule(quad_degree)
    pts = map_points(X, T, bary)
    fq = np.asarray(f(pts[..., 0], pts[..., 1]), dtype=float)
    udq = np.asarray(u_d(pts[..., 0], pts[..., 1]), dtype=float)
    u = sol.u
    uhq = np.stack([np.einsum("qk,tk->tq", bary, u[T + i * nv]) for i in range(2)])
    lap_uh = np.zeros_like(fq)  # P1 Laplacian
    grad_pH = np.zeros_like(fq)  # P0 gradient
    lap_phih = np.zeros_like(fq)
    grad_rH = np.zeros_like(fq)
    lap_yh = np.zeros_like(fq)
    res_state = fq + lap_uh - grad_pH
    res_adj = lap_phih + grad_rH + uhq - udq
    res_ctrl = -lap_phih - grad_rH - (uhq - udq) + rho * lap_yh

    def integrate(v):
        return area * np.einsum("itq,q->t", v**2, w)

    elem_state = hT**2 * integrate(res_state)
    elem_adj = hT**2 * integrate(res_adj)
    R2 = integrate(res_ctrl)
    Gu = element_gradients(mesh, grads, u)
    Gphi = element_gradients(mesh, grads, sol.phi)
    Gy = element_gradients(mesh, grads, sol.y - yd)
    div_u = area * (Gu[:, 0, 0] + Gu[:, 1, 1]) ** 2
    div_phi = area * (Gphi[:, 0, 0] + Gphi[:, 1, 1]) ** 2
    pT, rT = sol.p[parent], sol.r[parent]

    # interior and Neumann edge jumps
    ne = len(mesh.edges)
    ie = mesh.interior_edges
    hE, nE = _edge_geometry(mesh, ie)
    t1, t2 = mesh.edge_elements[ie, 0], mesh.edge_elements[ie, 1]
    Js = (pT[t1] - pT[t2])[:, None] * nE - _apply(Gu[t1] - Gu[t2], nE)
    Ja = (rT[t1] - rT[t2])[:, None] * nE + _apply(Gphi[t1] - Gphi[t2], nE)
    JI = _apply(Gphi[t1] - Gphi[t2], nE) + (rT[t1] - rT[t2])[:, None] * nE - rho * _apply(Gy[t1] - Gy[t2], nE)
    edge_state = np.zeros(ne)
    edge_adj = np.zeros(ne)
    edge_state[ie] = hE**2 * np.sum(Js**2, axis=1)
    edge_adj[ie] = hE**2 * np.sum(Ja**2, axis=1)
    nbe = mesh.neumann_edges
    if nbe.size:
        hN, nN = _edge_geometry(mesh, nbe)
        tn = mesh.edge_elements[nbe, 0]
        edge_state[nbe] = hN**2 * np.sum((pT[tn][:, None] * nN - _apply(Gu[tn], nN)) ** 2, axis=1)
        edge_adj[nbe] = hN**2 * np.sum((rT[tn][:, None] * nN + _apply(Gphi[tn], nN)) ** 2, axis=1)

    # node patch terms
    hp = mesh.patch_diameters()
    node_a = hp**2 * np.bincount(T.ravel(), weights=np.repeat(R2, 3), minlength=nv)
    jterm = hE * np.sum(JI**2, axis=1)  # |J^I|^2 integrated over the side
    opp1 = _opposite(mesh, ie, t1)
    opp2 = _opposite(mesh, ie, t2)
    E = mesh.edges[ie]
    owners = np.concatenate([E[:, 0], E[:, 1], opp1, opp2])
    node_b = hp * np.bincount(owners, weights=np.tile(jterm, 4), minlength=nv)

    ce = mesh.contact_edges
    sigma = contact_stress(mesh, rho, sol.y, sol.phi, sol.r, yd, ce, grads)
    cls = classify(sys, sol, sigma)
    cm = boundary_mass_contact(mesh)
    nc = sys.n_contact
    hC, _ = _edge_geometry(mesh, ce)
    node_c = np.zeros(nv)
    slot_row = np.where(cm.side_edges >= 0, np.searchsorted(ce, np.maximum(cm.side_edges, 0)), 0)
    used = cm.side_edges >= 0
    full = np.isin(cls.labels, [FULL_A, FULL_B])
    for i in range(2):
        per_side = np.where(used, hC[slot_row] * sigma[slot_row, i] ** 2, 0.0).sum(axis=1)
        keep = ~full[i * nc : (i + 1) * nc]
        node_c[cm.vertices] += np.where(keep, per_side, 0.0)
    node_c[cm.vertices] *= hp[cm.vertices]

    s = lagrange_residual_s(sys, sol, cm)
    d_a = complementarity_d(sys, sol, "a", cm)
    d_b = complementarity_d(sys, sol, "b", cm)
    node_d = np.zeros(nv)
    node_e = np.zeros(nv)
    verts2 = np.concatenate([cm.vertices, cm.vertices])
    sa = cls.labels == SEMI_A
    sb = cls.labels == SEMI_B
    np.add.at(node_d, verts2[sa], (s * d_a)[sa])
    np.add.at(node_e, verts2[sb], (s * d_b)[sb])

    return EstimatorBreakdown(
        elem_state_res=elem_state,
        elem_adj_res=elem_adj,
        elem_div_u=div_u,
        elem_div_phi=div_phi,
        edge_state_jump=edge_state,
        edge_adj_jump=edge_adj,
        node_a=node_a,
        node_b=node_b,
        node_c=node_c,
        node_d=node_d,
        node_e=node_e,
        classification=cls,
        s=s,
        d_a=d_a,
        d_b=d_b,
    )


def _opposite(mesh: TwoGridMesh, edges: np.ndarray, elems: np.ndarray) -> np.ndarray:
    """Vertex of ``elems`` opposite to ``edges``."""
    local = np.argmax(mesh.elem_edges[elems] == edges[:, None], axis=1)
    return mesh.fine.triangles[elems, local]


def element_indicators(breakdown: EstimatorBreakdown, mesh: TwoGridMesh, split: bool = False):
    """Squared element indicators.

    Own element terms, half of each interior edge term (all of a boundary
    edge term) and an equal share of every patch term of the element's
    vertices. With ``split`` the state, adjoint and control parts are
    returned separately.
    """
    T = mesh.fine.triangles
    nv = mesh.fine.n_vertices
    ee = mesh.elem_edges
    nb = np.where(mesh.edge_elements[:, 1] >= 0, 0.5, 1.0)
    state = breakdown.elem_state_res + breakdown.elem_div_u + np.sum((breakdown.edge_state_jump * nb)[ee], axis=1)
    adj = breakdown.elem_adj_res + breakdown.elem_div_phi + np.sum((breakdown.edge_adj_jump * nb)[ee], axis=1)
    node = breakdown.node_a + breakdown.node_b + breakdown.node_c + breakdown.node_d + breakdown.node_e
    count = np.bincount(T.ravel(), minlength=nv)
    share = node / np.maximum(count, 1)
    ctrl = share[T].sum(axis=1)
    if split:
        return state, adj, ctrl
    return state + adj + ctrl


def write_estimator_dump(path, breakdown: EstimatorBreakdown, mesh: TwoGridMesh) -> None:
    state, adj, ctrl = element_indicators(breakdown, mesh, split=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["elem_id", "eta_state2", "eta_adj2", "eta_y2", "indicator2"])
        for k in range(len(state)):
            wr.writerow([k, repr(float(state[k])), repr(float(adj[k])), repr(float(ctrl[k])), repr(float(state[k] + adj[k] + ctrl[k]))])
