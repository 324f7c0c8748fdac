"""Two-grid triangulations: a coarse mesh refined by newest vertex bisection
and its midpoint (red) refinement, plus boundary classification and the
node-patch topology used by assembly and the estimator.

Triangles are stored as ``[newest, a, b]`` with counterclockwise
orientation; the refinement (base) edge is ``(a, b)``, i.e. local edge 0.
Local edge ``k`` is always the edge opposite local vertex ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DIRICHLET",
    "CONTACT",
    "NEUMANN",
    "MeshError",
    "DomainSpec",
    "CoarseMesh",
    "TwoGridMesh",
    "NodePatch",
    "build_initial",
    "bisect_coarse",
    "node_patches",
    "write_mesh",
    "read_mesh",
    "unit_square",
    "lshape",
]

DIRICHLET, CONTACT, NEUMANN = 1, 2, 3
_LABELS = (DIRICHLET, CONTACT, NEUMANN)
MIN_ANGLE_DEG = 5.0

# local edge k = (vertex k+1, vertex k+2), opposite vertex k
_LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


class MeshError(ValueError):
    """Invalid domain or mesh input."""


def _cross(o, a, b):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])


def _segments_touch(p1, p2, q1, q2, eps=1e-14):
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if ((d1 > eps and d2 < -eps) or (d1 < -eps and d2 > eps)) and (
        (d3 > eps and d4 < -eps) or (d3 < -eps and d4 > eps)
    ):
        return True

    def on_seg(a, b, c, d):
        return abs(d) <= eps and min(a[0], b[0]) - eps <= c[0] <= max(a[0], b[0]) + eps and min(
            a[1], b[1]
        ) - eps <= c[1] <= max(a[1], b[1]) + eps

    return on_seg(q1, q2, p1, d1) or on_seg(q1, q2, p2, d2) or on_seg(p1, p2, q1, d3) or on_seg(p1, p2, q2, d4)


@dataclass(frozen=True)
class DomainSpec:
    """Polygonal domain with one boundary label per polygon segment.

    Segment ``i`` joins ``polygon[i]`` and ``polygon[(i + 1) % n]``.
    """

    polygon: np.ndarray
    boundary_labels: tuple

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=float)
        object.__setattr__(self, "polygon", poly)
        object.__setattr__(self, "boundary_labels", tuple(int(v) for v in self.boundary_labels))
        n = len(poly)
        if poly.ndim != 2 or poly.shape[1] != 2 or n < 3:
            raise MeshError("polygon must be an (n >= 3, 2) array")
        if len(self.boundary_labels) != n:
            raise MeshError(f"expected {n} boundary labels, got {len(self.boundary_labels)}")
        if any(lab not in _LABELS for lab in self.boundary_labels):
            raise MeshError("boundary labels must be 1 (Dirichlet), 2 (Contact) or 3 (Neumann)")
        if CONTACT not in self.boundary_labels:
            raise MeshError("the contact boundary must be non-empty")
        for i in range(n):
            for j in range(i + 1, n):
                if np.allclose(poly[i], poly[j]):
                    raise MeshError("polygon has repeated vertices")
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_touch(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]):
                    raise MeshError(f"polygon is not simple: segments {i} and {j} intersect")
        if self.signed_area <= 0.0:
            raise MeshError("polygon must be oriented counterclockwise")

    @property
    def signed_area(self) -> float:
        x, y = self.polygon[:, 0], self.polygon[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def unit_square(labels=(DIRICHLET, CONTACT, CONTACT, CONTACT)) -> DomainSpec:
    """(0,1)^2; segments bottom, right, top, left."""
    return DomainSpec(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), labels)


def lshape(label=CONTACT) -> DomainSpec:
    """(-1,1)^2 minus [0,1]x[-1,0], with the long sides split at their midpoints."""
    poly = np.array(
        [[-1.0, -1.0], [0.0, -1.0], [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [-1.0, 1.0], [-1.0, 0.0]]
    )
    return DomainSpec(poly, (label,) * 8)


@dataclass
class CoarseMesh:
    """Conforming triangulation with labelled boundary edges."""

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_labels: np.ndarray
    generation: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.boundary_edges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        self.boundary_labels = np.asarray(self.boundary_labels, dtype=np.int64)
        if self.generation is None:
            self.generation = np.zeros(len(self.triangles), dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def refinement_edge(self) -> np.ndarray:
        # the base edge always sits opposite the newest vertex (local index 0)
        return np.zeros(self.n_triangles, dtype=np.int64)

    def signed_areas(self) -> np.ndarray:
        c = self.vertices[self.triangles]
        return 0.5 * _cross(c[:, 0], c[:, 1], c[:, 2])

    def edge_lengths(self) -> np.ndarray:
        """Lengths of local edges, shape (nt, 3)."""
        c = self.vertices[self.triangles]
        return np.linalg.norm(c[:, _LOCAL_EDGES[:, 1]] - c[:, _LOCAL_EDGES[:, 0]], axis=2)

    def diameters(self) -> np.ndarray:
        return self.edge_lengths().max(axis=1)

    def angles(self) -> np.ndarray:
        """Interior angles in degrees, shape (nt, 3)."""
        c = self.vertices[self.triangles]
        out = np.empty((self.n_triangles, 3))
        for k in range(3):
            u = c[:, (k + 1) % 3] - c[:, k]
            v = c[:, (k + 2) % 3] - c[:, k]
            cosang = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            out[:, k] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
        return out

    def check(self) -> None:
        """Raise MeshError unless the mesh satisfies the structural invariants."""
        if np.any(self.signed_areas() <= 0.0):
            raise MeshError("mesh has non-positive triangle areas")
        if self.n_triangles and self.angles().min() <= MIN_ANGLE_DEG:
            raise MeshError("mesh violates the minimum angle bound")
        edges, elem_edges, edge_elements = edge_topology(self.triangles, self.n_vertices)
        if np.any(np.bincount(elem_edges.ravel(), minlength=len(edges)) > 2):
            raise MeshError("an edge is shared by more than two triangles")
        on_boundary = edge_elements[:, 1] < 0
        ids = _edge_lookup(edges, self.n_vertices, self.boundary_edges)
        if np.any(ids < 0):
            raise MeshError("boundary edge is not an edge of the mesh")
        covered = np.zeros(len(edges), dtype=bool)
        covered[ids] = True
        if not np.array_equal(covered, on_boundary) or len(ids) != on_boundary.sum():
            raise MeshError("boundary edges do not cover the domain boundary exactly")


def _edge_keys(pairs: np.ndarray, base: int) -> np.ndarray:
    lo = np.minimum(pairs[..., 0], pairs[..., 1]).astype(np.int64)
    hi = np.maximum(pairs[..., 0], pairs[..., 1]).astype(np.int64)
    return lo * base + hi


def _edge_lookup(edges: np.ndarray, base: int, pairs: np.ndarray) -> np.ndarray:
    """Edge ids of vertex ``pairs`` (any orientation); -1 where absent."""
    keys = _edge_keys(edges, base)
    q = _edge_keys(np.asarray(pairs).reshape(-1, 2), base)
    pos = np.searchsorted(keys, q)
    pos = np.minimum(pos, len(keys) - 1)
    return np.where(keys[pos] == q, pos, -1)


def edge_topology(triangles: np.ndarray, nv: int):
    """Unique edges, element-to-edge map and edge-to-element map.

    Returns ``edges`` (ne, 2) sorted by key with ``edges[:, 0] < edges[:, 1]``,
    ``elem_edges`` (nt, 3) where column k is the edge opposite vertex k, and
    ``edge_elements`` (ne, 2) with -1 in the second column on the boundary.
    """
    nt = len(triangles)
    local = triangles[:, _LOCAL_EDGES]  # (nt, 3, 2)
    keys = _edge_keys(local, nv).ravel()
    ukeys, inverse = np.unique(keys, return_inverse=True)
    edges = np.column_stack([ukeys // nv, ukeys % nv])
    elem_edges = inverse.reshape(nt, 3)
    edge_elements = np.full((len(ukeys), 2), -1, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    sorted_e = inverse[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_e[1:] != sorted_e[:-1]
    owners = order // 3
    edge_elements[sorted_e[first], 0] = owners[first]
    edge_elements[sorted_e[~first], 1] = owners[~first]
    return edges, elem_edges, edge_elements


def _orient(vertices: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Make triangles CCW and put the longest edge opposite local vertex 0."""
    tri = tri.copy()
    c = vertices[tri]
    neg = _cross(c[:, 0], c[:, 1], c[:, 2]) < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]
    c = vertices[tri]
    lengths = np.linalg.norm(c[:, _LOCAL_EDGES[:, 1]] - c[:, _LOCAL_EDGES[:, 0]], axis=2)
    k = np.argmax(lengths, axis=1)
    roll = (k[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(tri, roll, axis=1)


def _ear_clip(poly: np.ndarray) -> np.ndarray:
    """Triangulate a simple CCW polygon, preferring ears with large minimum angle."""
    idx = list(range(len(poly)))
    tris = []

    def min_angle(a, b, c):
        pts = poly[[a, b, c]]
        angs = []
        for k in range(3):
            u = pts[(k + 1) % 3] - pts[k]
            v = pts[(k + 2) % 3] - pts[k]
            angs.append(np.arccos(np.clip(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), -1, 1)))
        return min(angs)

    while len(idx) > 3:
        best, best_q = None, -1.0
        n = len(idx)
        for k in range(n):
            a, b, c = idx[k - 1], idx[k], idx[(k + 1) % n]
            if _cross(poly[a], poly[b], poly[c]) <= 1e-14:
                continue
            ok = True
            for j in idx:
                if j in (a, b, c):
                    continue
                p = poly[j]
                if (
                    _cross(poly[a], poly[b], p) >= -1e-14
                    and _cross(poly[b], poly[c], p) >= -1e-14
                    and _cross(poly[c], poly[a], p) >= -1e-14
                ):
                    ok = False
                    break
            if ok:
                q = min_angle(a, b, c)
                if q > best_q:
                    best, best_q = k, q
        if best is None:
            raise MeshError("ear clipping failed; polygon may be degenerate")
        n = len(idx)
        tris.append([idx[best - 1], idx[best], idx[(best + 1) % n]])
        idx.pop(best)
    tris.append(idx)
    return np.array(tris, dtype=np.int64)


def nvb_refine(mesh: CoarseMesh, marked) -> CoarseMesh:
    """Newest vertex bisection of ``marked`` triangles with conforming closure.

    Every marked triangle is bisected at least once. The closure marks the
    base edge of any triangle owning a marked edge until stable; triangles
    are then bisected on their base edge until no marked edge survives.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked, dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_triangles:
        raise MeshError("marked triangle id out of range")
    X = mesh.vertices
    nv0 = len(X)
    edges, elem_edges, _ = edge_topology(mesh.triangles, nv0)
    cut = np.zeros(len(edges), dtype=bool)
    cut[elem_edges[marked, 0]] = True
    while True:
        need = cut[elem_edges].any(axis=1) & ~cut[elem_edges[:, 0]]
        if not need.any():
            break
        cut[elem_edges[need, 0]] = True

    cut_edges = edges[cut]
    ncut = len(cut_edges)
    new_nodes = nv0 + np.arange(ncut)
    Xn = np.vstack([X, 0.5 * (X[cut_edges[:, 0]] + X[cut_edges[:, 1]])])
    base = nv0 + ncut
    cut_keys = _edge_keys(cut_edges, base)
    order = np.argsort(cut_keys)
    cut_keys = cut_keys[order]
    cut_nodes = new_nodes[order]

    def midpoint_of(pairs):
        k = _edge_keys(pairs, base)
        pos = np.minimum(np.searchsorted(cut_keys, k), len(cut_keys) - 1)
        hit = cut_keys[pos] == k
        return hit, cut_nodes[pos]

    T = mesh.triangles.copy()
    gen = mesh.generation.copy()
    while True:
        hit, mids = midpoint_of(T[:, 1:3])
        if not hit.any():
            break
        ids = np.nonzero(hit)[0]
        m = mids[ids]
        p0, p1, p2 = T[ids, 0], T[ids, 1], T[ids, 2]
        second = np.column_stack([m, p2, p0])
        T[ids] = np.column_stack([m, p0, p1])
        gen[ids] += 1
        T = np.vstack([T, second])
        gen = np.concatenate([gen, gen[ids]])

    be = mesh.boundary_edges
    hit, mids = midpoint_of(be)
    keep = be[~hit]
    lab_keep = mesh.boundary_labels[~hit]
    split = be[hit]
    m = mids[hit]
    new_be = np.vstack([keep, np.column_stack([split[:, 0], m]), np.column_stack([m, split[:, 1]])])
    new_lab = np.concatenate([lab_keep, mesh.boundary_labels[hit], mesh.boundary_labels[hit]])
    return CoarseMesh(Xn, T, new_be, new_lab, gen)


def midpoint_refine(mesh: CoarseMesh):
    """Red refinement: split every triangle into four via its edge midpoints.

    Returns the fine mesh and the (nt, 4) child map; children of triangle
    ``t`` are ``4t .. 4t+3`` with the central child last.
    """
    X = mesh.vertices
    nv = len(X)
    edges, elem_edges, _ = edge_topology(mesh.triangles, nv)
    Xf = np.vstack([X, 0.5 * (X[edges[:, 0]] + X[edges[:, 1]])])
    a, b, c = mesh.triangles.T
    mbc, mca, mab = (nv + elem_edges[:, k] for k in range(3))
    children = np.stack(
        [
            np.column_stack([a, mab, mca]),
            np.column_stack([b, mbc, mab]),
            np.column_stack([c, mca, mbc]),
            np.column_stack([mbc, mca, mab]),
        ],
        axis=1,
    ).reshape(-1, 3)
    be = mesh.boundary_edges
    m = nv + _edge_lookup(edges, nv, be)
    fine_be = np.stack([np.column_stack([be[:, 0], m]), np.column_stack([m, be[:, 1]])], axis=1).reshape(-1, 2)
    fine_lab = np.repeat(mesh.boundary_labels, 2)
    fine = CoarseMesh(Xf, children, fine_be, fine_lab, np.repeat(mesh.generation, 4))
    child_map = np.arange(4 * mesh.n_triangles).reshape(-1, 4)
    return fine, child_map


@dataclass
class TwoGridMesh:
    """Coarse mesh T_H, its midpoint refinement T_h and fine-mesh topology."""

    coarse: CoarseMesh
    fine: CoarseMesh = field(init=False)
    child_map: np.ndarray = field(init=False)
    parent: np.ndarray = field(init=False)
    edges: np.ndarray = field(init=False)
    elem_edges: np.ndarray = field(init=False)
    edge_elements: np.ndarray = field(init=False)
    edge_labels: np.ndarray = field(init=False)
    dirichlet_vertices: np.ndarray = field(init=False)
    contact_vertices: np.ndarray = field(init=False)
    neumann_vertices: np.ndarray = field(init=False)
    interior_vertices: np.ndarray = field(init=False)

    def __post_init__(self):
        self.fine, self.child_map = midpoint_refine(self.coarse)
        self.parent = np.repeat(np.arange(self.coarse.n_triangles), 4)
        f = self.fine
        nv = f.n_vertices
        self.edges, self.elem_edges, self.edge_elements = edge_topology(f.triangles, nv)
        self.edge_labels = np.zeros(len(self.edges), dtype=np.int64)
        self.edge_labels[_edge_lookup(self.edges, nv, f.boundary_edges)] = f.boundary_labels
        on = {}
        for lab in _LABELS:
            flag = np.zeros(nv, dtype=bool)
            flag[f.boundary_edges[f.boundary_labels == lab].ravel()] = True
            on[lab] = flag
        dir_v = on[DIRICHLET]
        neu_v = on[NEUMANN] & ~dir_v
        con_v = on[CONTACT] & ~dir_v & ~neu_v
        bnd = dir_v | neu_v | con_v
        self.dirichlet_vertices = np.nonzero(dir_v)[0]
        self.neumann_vertices = np.nonzero(neu_v)[0]
        self.contact_vertices = np.nonzero(con_v)[0]
        self.interior_vertices = np.nonzero(~bnd)[0]

    def _edges_with(self, label: int) -> np.ndarray:
        return np.nonzero(self.edge_labels == label)[0]

    @property
    def interior_edges(self) -> np.ndarray:
        return self._edges_with(0)

    @property
    def dirichlet_edges(self) -> np.ndarray:
        return self._edges_with(DIRICHLET)

    @property
    def contact_edges(self) -> np.ndarray:
        return self._edges_with(CONTACT)

    @property
    def neumann_edges(self) -> np.ndarray:
        return self._edges_with(NEUMANN)

    @property
    def area(self) -> float:
        return float(self.coarse.signed_areas().sum())

    def check(self) -> None:
        self.coarse.check()
        self.fine.check()
        ca = self.coarse.signed_areas()
        fa = self.fine.signed_areas()[self.child_map].sum(axis=1)
        if not np.allclose(ca, fa, rtol=1e-13, atol=0.0):
            raise MeshError("children do not tile their parent")

    def vertex_elements(self):
        """CSR (offsets, element ids) of fine elements incident to each fine vertex."""
        T = self.fine.triangles
        verts = T.ravel()
        order = np.argsort(verts, kind="stable")
        offsets = np.zeros(self.fine.n_vertices + 1, dtype=np.int64)
        np.cumsum(np.bincount(verts, minlength=self.fine.n_vertices), out=offsets[1:])
        return offsets, order // 3

    def patch_diameters(self) -> np.ndarray:
        """diam(omega_p) for every fine vertex."""
        X = self.fine.vertices
        nv = len(X)
        e = self.edges
        nbr_from = np.concatenate([e[:, 0], e[:, 1]])
        nbr_to = np.concatenate([e[:, 1], e[:, 0]])
        order = np.argsort(nbr_from, kind="stable")
        nbr_from, nbr_to = nbr_from[order], nbr_to[order]
        deg = np.bincount(nbr_from, minlength=nv)
        start = np.concatenate([[0], np.cumsum(deg)[:-1]])
        width = deg.max() + 1
        slot = np.arange(len(nbr_from)) - start[nbr_from] + 1
        pts = np.full((nv, width, 2), np.nan)
        pts[:, 0] = X
        pts[nbr_from, slot] = X[nbr_to]
        diff = pts[:, :, None, :] - pts[:, None, :, :]
        dist = np.sqrt(np.nansum(diff**2, axis=3))
        return dist.max(axis=(1, 2))


@dataclass
class NodePatch:
    node: int
    elements: np.ndarray
    interior_sides: np.ndarray
    contact_sides: np.ndarray
    dirichlet_sides: np.ndarray
    neumann_sides: np.ndarray
    h_p: float


def node_patches(mesh: TwoGridMesh) -> list:
    """One patch per fine vertex.

    ``interior_sides`` are the non-boundary edges of the closed patch (the
    spokes through the node and the rim edges separating the patch from the
    rest of the mesh). Boundary sides are those incident to the node.
    """
    offsets, elems = mesh.vertex_elements()
    hp = mesh.patch_diameters()
    E = mesh.edges
    lab = mesh.edge_labels
    out = []
    for p in range(mesh.fine.n_vertices):
        el = elems[offsets[p] : offsets[p + 1]]
        sides = np.unique(mesh.elem_edges[el].ravel())
        incident = sides[(E[sides, 0] == p) | (E[sides, 1] == p)]
        out.append(
            NodePatch(
                node=p,
                elements=el,
                interior_sides=sides[lab[sides] == 0],
                contact_sides=incident[lab[incident] == CONTACT],
                dirichlet_sides=incident[lab[incident] == DIRICHLET],
                neumann_sides=incident[lab[incident] == NEUMANN],
                h_p=float(hp[p]),
            )
        )
    return out


def build_initial(domain: DomainSpec, target_h: float) -> TwoGridMesh:
    """Triangulate ``domain`` and bisect uniformly until every coarse
    triangle has diameter at most ``target_h``."""
    if not target_h > 0:
        raise MeshError("target_h must be positive")
    poly = domain.polygon
    n = len(poly)
    tri = _orient(poly, _ear_clip(poly))
    be = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    coarse = CoarseMesh(poly.copy(), tri, be, np.array(domain.boundary_labels))
    while coarse.diameters().max() > target_h:
        coarse = nvb_refine(coarse, np.arange(coarse.n_triangles))
    mesh = TwoGridMesh(coarse)
    mesh.check()
    return mesh


def bisect_coarse(mesh: TwoGridMesh, marked) -> TwoGridMesh:
    """Refine the coarse mesh by NVB and rebuild the fine mesh."""
    marked = np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked, dtype=np.int64)
    if marked.size == 0:
        return mesh
    return TwoGridMesh(nvb_refine(mesh.coarse, marked))


def write_mesh(path, mesh: CoarseMesh) -> None:
    """Plain-text export: ``nv nt nbe`` header, then vertices, triangles,
    labelled boundary edges."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles} {len(mesh.boundary_edges)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines += [f"{i} {j} {lab}" for (i, j), lab in zip(mesh.boundary_edges.tolist(), mesh.boundary_labels.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> CoarseMesh:
    rows = Path(path).read_text().split("\n")
    nv, nt, nbe = (int(v) for v in rows[0].split())
    body = rows[1:]
    X = np.array([[float(v) for v in r.split()] for r in body[:nv]], dtype=float).reshape(-1, 2)
    T = np.array([[int(v) for v in r.split()] for r in body[nv : nv + nt]], dtype=np.int64).reshape(-1, 3)
    B = np.array([[int(v) for v in r.split()] for r in body[nv + nt : nv + nt + nbe]], dtype=np.int64).reshape(-1, 3)
    return CoarseMesh(X, T, B[:, :2], B[:, 2])
