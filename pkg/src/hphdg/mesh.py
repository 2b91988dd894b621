"""Conforming triangular meshes with element- and edge-oriented skeleton views.

Local face ``f`` of an element runs from vertex ``f`` to vertex ``(f+1) % 3``
(counter-clockwise). Interior edges carry a global direction from the lower
to the higher vertex id; ``face_sign`` records whether the local traversal
agrees with it.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .space import REF_VERTICES, evaluate_basis, face_points, triangle_quadrature

BOUNDARY_TAGS = ("slip-wall", "no-slip-adiabatic", "farfield", "dirichlet-mms")

INTERIOR, BOUNDARY = 0, 1


class MeshError(ValueError):
    """Raised for unreadable, non-triangular or non-conforming meshes."""


# ---------------------------------------------------------------------------
# Airfoil profile and boundary curves
# ---------------------------------------------------------------------------

_NACA_COEFFS = (0.2969, -0.1260, -0.3516, 0.2843, -0.1036)


def naca0012_modified(x):
    """Half thickness of the NACA 0012 profile with a closed trailing edge."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0.0) or np.any(xa > 1.0):
        raise ValueError("chordwise coordinate must lie in [0, 1]")
    a0, a1, a2, a3, a4 = _NACA_COEFFS
    y = 0.6 * (a0 * np.sqrt(xa) + a1 * xa + a2 * xa**2 + a3 * xa**3 + a4 * xa**4)
    return float(y) if np.ndim(x) == 0 else y


class NacaCurve:
    """Closed NACA 0012 (modified) surface, chord [0, 1], parameter u in [-1, 1].

    x = u**2 and y = sign(u) * thickness(x); u > 0 is the upper surface. The
    parametrization stays smooth through the leading edge.
    """

    def __init__(self, chord: float = 1.0, origin=(0.0, 0.0)):
        self.chord = chord
        self.origin = np.asarray(origin, dtype=float)

    def point(self, u):
        u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
        x = u**2
        y = np.sign(u) * naca0012_modified(x)
        return self.origin + self.chord * np.stack([x, y], axis=-1)

    def param(self, pt, hint: float | None = None) -> float:
        x, y = (np.asarray(pt, dtype=float) - self.origin) / self.chord
        u = math.sqrt(min(max(x, 0.0), 1.0))
        if abs(y) > 1e-12:
            return u if y > 0 else -u
        if hint is not None and hint < 0:
            return -u
        return u

    def points_on_edge(self, a, b, t):
        """Points at fractions ``t`` of the curve arc between vertices a and b."""
        ua = self.param(a)
        ub = self.param(b, hint=ua)
        if abs(y_of(a)) <= 1e-12:
            ua = self.param(a, hint=ub)
        t = np.asarray(t, dtype=float)
        return self.point(ua + (ub - ua) * t)


def y_of(pt):
    return float(np.asarray(pt)[1])


# ---------------------------------------------------------------------------
# Geometry maps
# ---------------------------------------------------------------------------

def _p3_reference_nodes():
    nodes = [REF_VERTICES[0], REF_VERTICES[1], REF_VERTICES[2]]
    for f in range(3):
        nodes.extend(face_points(f, [-1.0 / 3.0, 1.0 / 3.0]))
    nodes.append(REF_VERTICES.mean(axis=0))
    return np.array(nodes)


P3_NODES = _p3_reference_nodes()
_P3_VINV = np.linalg.inv(evaluate_basis(3, P3_NODES)[0].T)


def p3_shape(xi):
    """Cubic Lagrange shape functions (10, npts) and reference gradients (10, npts, 2)."""
    vals, grads = evaluate_basis(3, xi)
    N = _P3_VINV.T @ vals
    dN = np.einsum("ja,jqd->aqd", _P3_VINV, grads)
    return N, dN


def barycentric(xi):
    """Barycentric coordinates (npts, 3) of reference points."""
    xi = np.atleast_2d(xi)
    r, s = xi[:, 0], xi[:, 1]
    return np.column_stack([-(r + s) / 2.0, (1.0 + r) / 2.0, (1.0 + s) / 2.0])


def _straight_p3(corners):
    return barycentric(P3_NODES) @ corners


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    """Immutable conforming triangulation.

    Attributes
    ----------
    vertices : (V, 2)
    elements : (T, 3) vertex ids, counter-clockwise
    interior_edges : (Ni, 6) ``[v0, v1, K-, K+, f-, f+]`` with v0 < v1
    boundary_edges : (Nb, 4) ``[v0, v1, K, f]``
    boundary_tags : list of tag names, one per boundary edge
    face_kind, face_index, face_sign : (T, 3) element-oriented view of the skeleton
    geo_nodes : (T, 10, 2) cubic Lagrange geometry nodes
    geo_degree : (T,) 1 for straight elements, 3 for curved ones
    """

    vertices: np.ndarray
    elements: np.ndarray
    interior_edges: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: list
    face_kind: np.ndarray
    face_index: np.ndarray
    face_sign: np.ndarray
    geo_nodes: np.ndarray
    geo_degree: np.ndarray
    curves: dict = field(default_factory=dict)
    parent: np.ndarray | None = None
    child_slot: np.ndarray | None = None
    green_parent: np.ndarray | None = None
    green_mid: np.ndarray | None = None

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_interior_edges(self) -> int:
        return len(self.interior_edges)

    @property
    def n_boundary_edges(self) -> int:
        return len(self.boundary_edges)

    # -- construction -----------------------------------------------------
    @classmethod
    def from_arrays(cls, vertices, triangles, boundary, curves=None, *, parent=None,
                    child_slot=None, green_parent=None, green_mid=None) -> "Mesh":
        """Build connectivity from raw arrays.

        ``boundary`` is a sequence of ``(v0, v1, tag)``. Every edge that belongs
        to a single triangle must be tagged; anything else is rejected as
        non-conforming.
        """
        V = np.asarray(vertices, dtype=float).reshape(-1, 2)
        T = np.array(triangles, dtype=int).reshape(-1, 3)
        nt = len(T)
        if nt == 0:
            raise MeshError("mesh has no triangles")
        if T.min() < 0 or T.max() >= len(V):
            raise MeshError("triangle references a missing vertex")
        gp = None if green_parent is None else np.array(green_parent, dtype=int).reshape(-1, 3)
        for k in range(nt):
            a, b, c = V[T[k]]
            area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if abs(area2) <= 1e-14 * max(1.0, np.abs(V).max()) ** 2:
                raise MeshError(f"triangle {k} is degenerate")
            if area2 < 0:
                T[k] = T[k][[0, 2, 1]]

        tags = {}
        for v0, v1, tag in boundary:
            key = (min(int(v0), int(v1)), max(int(v0), int(v1)))
            tags[key] = str(tag)

        edge_map: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for k in range(nt):
            for f in range(3):
                a, b = int(T[k, f]), int(T[k, (f + 1) % 3])
                edge_map.setdefault((min(a, b), max(a, b)), []).append((k, f))

        interior, bedges, btags = [], [], []
        face_kind = np.zeros((nt, 3), dtype=int)
        face_index = np.zeros((nt, 3), dtype=int)
        face_sign = np.zeros((nt, 3), dtype=int)
        for key in sorted(edge_map):
            sides = edge_map[key]
            if len(sides) > 2:
                raise MeshError(f"edge {key} shared by {len(sides)} triangles")
            if len(sides) == 2:
                (k0, f0), (k1, f1) = sides
                if T[k0, f0] == T[k1, f1]:
                    raise MeshError(f"inconsistent orientation across edge {key}")
                idx = len(interior)
                interior.append([key[0], key[1], k0, k1, f0, f1])
                for k, f in sides:
                    face_kind[k, f] = INTERIOR
                    face_index[k, f] = idx
                    face_sign[k, f] = 1 if T[k, f] < T[k, (f + 1) % 3] else -1
                if key in tags:
                    raise MeshError(f"boundary tag on interior edge {key}")
            else:
                if key not in tags:
                    raise MeshError(f"untagged boundary edge {key} (hanging node or hole)")
                (k, f), = sides
                idx = len(bedges)
                bedges.append([key[0], key[1], k, f])
                btags.append(tags.pop(key))
                face_kind[k, f] = BOUNDARY
                face_index[k, f] = idx
                face_sign[k, f] = 1 if T[k, f] < T[k, (f + 1) % 3] else -1
        if tags:
            raise MeshError(f"tagged edge {next(iter(tags))} is not a triangle side")

        curves = dict(curves or {})
        geo_nodes = np.empty((nt, 10, 2))
        geo_degree = np.ones(nt, dtype=int)
        for k in range(nt):
            corners = V[T[k]]
            nodes = _straight_p3(corners)
            curved = False
            for f in range(3):
                if face_kind[k, f] == BOUNDARY and btags[face_index[k, f]] in curves:
                    curve = curves[btags[face_index[k, f]]]
                    a, b = corners[f], corners[(f + 1) % 3]
                    nodes[3 + 2 * f: 5 + 2 * f] = curve.points_on_edge(a, b, [1.0 / 3.0, 2.0 / 3.0])
                    curved = True
            if curved:
                nodes[9] = nodes[3:9].sum(axis=0) / 4.0 - corners.sum(axis=0) / 6.0
                geo_degree[k] = 3
            geo_nodes[k] = nodes

        def _arr(x, default, shape_tail=()):
            if x is None:
                return np.full((nt,) + shape_tail, default, dtype=int)
            return np.asarray(x, dtype=int)

        mesh = cls(
            vertices=V,
            elements=T,
            interior_edges=np.array(interior, dtype=int).reshape(-1, 6),
            boundary_edges=np.array(bedges, dtype=int).reshape(-1, 4),
            boundary_tags=btags,
            face_kind=face_kind,
            face_index=face_index,
            face_sign=face_sign,
            geo_nodes=geo_nodes,
            geo_degree=geo_degree,
            curves=curves,
            parent=_arr(parent, -1),
            child_slot=_arr(child_slot, -1),
            green_parent=gp if gp is not None else np.full((nt, 3), -1, dtype=int),
            green_mid=_arr(green_mid, -1),
        )
        mesh._check_jacobians()
        return mesh

    def _check_jacobians(self):
        curved = np.flatnonzero(self.geo_degree > 1)
        if len(curved) == 0:
            return
        q = triangle_quadrature(8)
        _, J = self.map_reference(q.points, curved)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        bad = curved[np.any(det <= 0, axis=1)]
        if len(bad):
            raise MeshError(f"curved element {bad[0]} has a non-positive Jacobian")

    # -- geometry ---------------------------------------------------------
    def map_reference(self, xi, elements=None):
        """Physical points (B, npts, 2) and Jacobians (B, npts, 2, 2) at reference points."""
        if elements is None:
            elements = np.arange(self.n_elements)
        N, dN = p3_shape(xi)
        nodes = self.geo_nodes[elements]
        x = np.einsum("aq,bad->bqd", N, nodes)
        J = np.einsum("aqr,bad->bqdr", dN, nodes)
        return x, J

    def element_areas(self) -> np.ndarray:
        q = triangle_quadrature(6)
        _, J = self.map_reference(q.points)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        return det @ q.weights

    def edge_lengths(self) -> np.ndarray:
        """Chord lengths of the three element sides, (T, 3)."""
        P = self.vertices[self.elements]
        return np.linalg.norm(np.roll(P, -1, axis=1) - P, axis=2)

    def h(self) -> np.ndarray:
        """Longest element side."""
        return self.edge_lengths().max(axis=1)

    def perimeters(self) -> np.ndarray:
        return self.edge_lengths().sum(axis=1)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)

    def outward_normals(self) -> np.ndarray:
        """Unit outward normals of the straight sides, (T, 3, 2)."""
        P = self.vertices[self.elements]
        t = np.roll(P, -1, axis=1) - P
        n = np.stack([t[..., 1], -t[..., 0]], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def boundary_loops(self) -> int:
        """Number of connected boundary components."""
        parent = {}

        def find(a):
            while parent.setdefault(a, a) != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for v0, v1, _, _ in self.boundary_edges:
            parent[find(v0)] = find(v1)
        return len({find(v) for v in parent})

    def euler_characteristic(self) -> int:
        n_edges = self.n_interior_edges + self.n_boundary_edges
        return self.n_vertices - n_edges + self.n_elements

    def element_neighbors(self) -> np.ndarray:
        """Neighbor element across each local face, -1 on the boundary."""
        nb = np.full((self.n_elements, 3), -1, dtype=int)
        for v0, v1, km, kp, fm, fp in self.interior_edges:
            nb[km, fm] = kp
            nb[kp, fp] = km
        return nb

    def info(self) -> dict:
        tags = {}
        for t in self.boundary_tags:
            tags[t] = tags.get(t, 0) + 1
        return {
            "vertices": self.n_vertices,
            "elements": self.n_elements,
            "interior_edges": self.n_interior_edges,
            "boundary_edges": self.n_boundary_edges,
            "boundary_tags": tags,
            "curved_elements": int(np.sum(self.geo_degree > 1)),
            "min_area": float(self.element_areas().min()),
        }

    def boundary_triples(self):
        return [(int(e[0]), int(e[1]), t) for e, t in zip(self.boundary_edges, self.boundary_tags)]

    def with_curves(self, curves) -> "Mesh":
        return Mesh.from_arrays(self.vertices, self.elements, self.boundary_triples(), curves,
                                parent=self.parent, child_slot=self.child_slot,
                                green_parent=self.green_parent, green_mid=self.green_mid)


# ---------------------------------------------------------------------------
# Readers / writers
# ---------------------------------------------------------------------------

def _read_native(lines):
    it = iter(enumerate(lines, start=1))

    def next_content():
        for ln, raw in it:
            s = raw.split("#", 1)[0].strip()
            if s:
                return ln, s
        raise MeshError("unexpected end of file")

    ln, header = next_content()
    if header.split() != ["ntri-mesh", "1"]:
        raise MeshError(f"line {ln}: expected header 'ntri-mesh 1'")

    def section(name):
        ln, s = next_content()
        parts = s.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshError(f"line {ln}: expected '{name} <count>'")
        try:
            return int(parts[1])
        except ValueError:
            raise MeshError(f"line {ln}: bad count") from None

    nv = section("vertices")
    verts = []
    for _ in range(nv):
        ln, s = next_content()
        try:
            x, y = map(float, s.split())
        except ValueError:
            raise MeshError(f"line {ln}: expected 'x y'") from None
        verts.append((x, y))
    nt = section("triangles")
    tris = []
    for _ in range(nt):
        ln, s = next_content()
        parts = s.split()
        if len(parts) != 3:
            raise MeshError(f"line {ln}: expected 3 vertex ids (triangles only)")
        try:
            tris.append(tuple(int(p) for p in parts))
        except ValueError:
            raise MeshError(f"line {ln}: bad vertex id") from None
    nb = section("boundary")
    bnd = []
    for _ in range(nb):
        ln, s = next_content()
        parts = s.split()
        if len(parts) != 3:
            raise MeshError(f"line {ln}: expected 'v0 v1 tag'")
        try:
            bnd.append((int(parts[0]), int(parts[1]), parts[2]))
        except ValueError:
            raise MeshError(f"line {ln}: bad vertex id") from None
    return verts, tris, bnd


def _read_gmsh2(lines):
    names = {}
    nodes = {}
    tris, lines_1d = [], []
    i = 0
    n = len(lines)

    def expect_end(tag, j):
        if j >= n or lines[j].strip() != tag:
            raise MeshError(f"line {j + 1}: expected {tag}")

    while i < n:
        s = lines[i].strip()
        if s == "$MeshFormat":
            parts = lines[i + 1].split()
            if not parts or not parts[0].startswith("2") or parts[1] != "0":
                raise MeshError(f"line {i + 2}: only MSH 2.x ASCII is supported")
            expect_end("$EndMeshFormat", i + 2)
            i += 3
        elif s == "$PhysicalNames":
            cnt = int(lines[i + 1])
            for j in range(cnt):
                m = re.match(r'\s*(\d+)\s+(\d+)\s+"(.*)"', lines[i + 2 + j])
                if not m:
                    raise MeshError(f"line {i + 3 + j}: bad physical name")
                names[int(m.group(2))] = m.group(3)
            expect_end("$EndPhysicalNames", i + 2 + cnt)
            i += cnt + 3
        elif s == "$Nodes":
            cnt = int(lines[i + 1])
            for j in range(cnt):
                parts = lines[i + 2 + j].split()
                try:
                    nodes[int(parts[0])] = (float(parts[1]), float(parts[2]))
                except (ValueError, IndexError):
                    raise MeshError(f"line {i + 3 + j}: bad node") from None
            expect_end("$EndNodes", i + 2 + cnt)
            i += cnt + 3
        elif s == "$Elements":
            cnt = int(lines[i + 1])
            for j in range(cnt):
                parts = lines[i + 2 + j].split()
                try:
                    etype, ntags = int(parts[1]), int(parts[2])
                    phys = int(parts[3]) if ntags > 0 else 0
                    conn = [int(p) for p in parts[3 + ntags:]]
                except (ValueError, IndexError):
                    raise MeshError(f"line {i + 3 + j}: bad element") from None
                if etype == 2:
                    tris.append(conn[:3])
                elif etype == 1:
                    lines_1d.append((conn[0], conn[1], names.get(phys, str(phys))))
                elif etype == 15:
                    continue
                else:
                    raise MeshError(f"line {i + 3 + j}: element type {etype} is not a triangle")
            expect_end("$EndElements", i + 2 + cnt)
            i += cnt + 3
        else:
            i += 1
    ids = sorted(nodes)
    index = {nid: k for k, nid in enumerate(ids)}
    try:
        verts = [nodes[nid] for nid in ids]
        tris = [[index[v] for v in t] for t in tris]
        bnd = [(index[a], index[b], tag) for a, b, tag in lines_1d]
    except KeyError as exc:
        raise MeshError(f"element references unknown node {exc}") from None
    return verts, tris, bnd


def load_mesh(path, format: str | None = None, curves=None) -> Mesh:
    """Read a native ``ntri-mesh`` file or a Gmsh MSH 2.2 ASCII file."""
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if format is None:
        format = "gmsh-msh2-ascii" if text.lstrip().startswith("$MeshFormat") else "native-text"
    if format == "native-text":
        verts, tris, bnd = _read_native(lines)
    elif format == "gmsh-msh2-ascii":
        verts, tris, bnd = _read_gmsh2(lines)
    else:
        raise ValueError(f"unknown mesh format {format!r}")
    return Mesh.from_arrays(verts, tris, bnd, curves)


def write_native(mesh: Mesh, path) -> None:
    out = ["ntri-mesh 1", f"vertices {mesh.n_vertices}"]
    out += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    out.append(f"triangles {mesh.n_elements}")
    out += [f"{a} {b} {c}" for a, b, c in mesh.elements]
    out.append(f"boundary {mesh.n_boundary_edges}")
    out += [f"{a} {b} {t}" for a, b, t in mesh.boundary_triples()]
    Path(path).write_text("\n".join(out) + "\n")


def square_mesh(n: int, tag: str = "dirichlet-mms", x0=0.0, x1=1.0, jitter: float = 0.0,
                rng=None) -> Mesh:
    """Structured n-by-n square split into 2 n^2 triangles (for tests and demos)."""
    xs = np.linspace(x0, x1, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    V = np.column_stack([X.ravel(), Y.ravel()])
    if jitter and n > 1:
        rng = np.random.default_rng(rng)
        h = (x1 - x0) / n
        inner = (X.ravel() > x0) & (X.ravel() < x1) & (Y.ravel() > x0) & (Y.ravel() < x1)
        V[inner] += jitter * h * rng.uniform(-1, 1, size=(inner.sum(), 2))
    vid = lambda i, j: i * (n + 1) + j  # noqa: E731
    tris = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris += [(a, b, c), (a, c, d)]
    bnd = []
    for k in range(n):
        bnd += [(vid(k, 0), vid(k + 1, 0), tag), (vid(n, k), vid(n, k + 1), tag),
                (vid(k, n), vid(k + 1, n), tag), (vid(0, k), vid(0, k + 1), tag)]
    return Mesh.from_arrays(V, tris, bnd)


def naca_ogrid(n_around: int = 40, n_radial: int = 12, radius: float = 10.0,
               wall_tag: str = "slip-wall", far_tag: str = "farfield") -> Mesh:
    """O-grid around the NACA 0012 (modified) profile, 2 n_around n_radial triangles.

    Surface points use u = cos(pi k / n_around) (clustered at both edges).
    Grid lines leave the wall tilted towards its normal and end at equally
    spaced points of a circle of ``radius`` around mid-chord; layers are
    spaced geometrically. The wall
    edges are curved by the profile.
    """
    if n_around < 8 or n_radial < 1:
        raise ValueError("need n_around >= 8 and n_radial >= 1")
    curve = NacaCurve()
    u = np.cos(np.pi * np.arange(n_around) / n_around)
    surf = curve.point(u)
    # outward normals from periodic central differences (counter-clockwise loop)
    t = np.roll(surf, -1, axis=0) - np.roll(surf, 1, axis=0)
    nrm = np.column_stack([t[:, 1], -t[:, 0]])
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    center = np.array([0.5, 0.0])
    phi = 2.0 * np.pi * np.arange(n_around) / n_around
    outer = center + radius * np.column_stack([np.cos(phi), np.sin(phi)])
    first = 0.02
    # geometric layer spacing, first layer about 0.02 chords thick
    ratio = _growth_ratio(n_radial, first / radius)
    s = np.concatenate([[0.0], np.cumsum(first / radius * ratio ** np.arange(n_radial))])
    s /= s[-1]
    sc = s[:, None, None]
    bend = radius * sc * (1.0 - sc) ** 2
    verts = ((1.0 - sc) * surf[None] + sc * outer[None] + bend * nrm[None]).reshape(-1, 2)
    vid = lambda j, k: j * n_around + (k % n_around)  # noqa: E731
    tris = []
    for j in range(n_radial):
        for k in range(n_around):
            a, b, c, d = vid(j, k), vid(j, k + 1), vid(j + 1, k + 1), vid(j + 1, k)
            if (j + k) % 2:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    bnd = [(vid(0, k), vid(0, k + 1), wall_tag) for k in range(n_around)]
    bnd += [(vid(n_radial, k), vid(n_radial, k + 1), far_tag) for k in range(n_around)]
    return Mesh.from_arrays(verts, tris, bnd, curves={wall_tag: curve})


def _growth_ratio(n: int, first: float) -> float:
    """Ratio q with first * (q^n - 1) / (q - 1) = 1 (q = 1 if first >= 1/n)."""
    if first * n >= 1.0:
        return 1.0
    lo, hi = 1.0 + 1e-12, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if first * (mid**n - 1.0) / (mid - 1.0) > 1.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Red-green refinement
# ---------------------------------------------------------------------------

@dataclass
class Transfer:
    """Map old element -> new elements covering it, plus refinement statistics."""

    children: dict
    n_red: int = 0
    n_green: int = 0
    n_untouched: int = 0
    n_ungreened: int = 0

    def __getitem__(self, k):
        return self.children[k]

    def __len__(self):
        return len(self.children)

    def origins(self, n_new: int) -> list[list[int]]:
        out = [[] for _ in range(n_new)]
        for old, new in self.children.items():
            for j in new:
                out[j].append(old)
        return out


class _Work:
    __slots__ = ("tri", "origins", "gparent", "gmid", "parent", "slot", "alive")

    def __init__(self, tri, origins, gparent=None, gmid=-1, parent=-1, slot=-1):
        self.tri = tuple(int(v) for v in tri)
        self.origins = tuple(origins)
        self.gparent = gparent
        self.gmid = gmid
        self.parent = parent
        self.slot = slot
        self.alive = True

    def edges(self):
        a, b, c = self.tri
        return [(a, b), (b, c), (c, a)]


def _key(a, b):
    return (a, b) if a < b else (b, a)


def refine(mesh: Mesh, marked, boundary_geometry=None):
    """Red-refine ``marked`` elements and close the mesh with green splits.

    Returns ``(new_mesh, transfer)``. Green children are removed and their
    parent is red-refined whenever a green child would otherwise be split.
    """
    curves = dict(mesh.curves)
    if boundary_geometry:
        curves.update(boundary_geometry)
    marked = sorted({int(k) for k in marked})
    if any(k < 0 or k >= mesh.n_elements for k in marked):
        raise IndexError("marked element out of range")
    if not marked:
        return mesh, Transfer({k: [k] for k in range(mesh.n_elements)},
                              n_untouched=mesh.n_elements)

    verts = [tuple(v) for v in mesh.vertices]
    btag = {_key(int(a), int(b)): t for a, b, t in mesh.boundary_triples()}
    work: list[_Work] = []
    for k in range(mesh.n_elements):
        gp = mesh.green_parent[k]
        work.append(_Work(mesh.elements[k], (k,),
                          gparent=tuple(int(v) for v in gp) if gp[0] >= 0 else None,
                          gmid=int(mesh.green_mid[k]),
                          parent=int(mesh.parent[k]), slot=int(mesh.child_slot[k])))
    split: dict[tuple[int, int], int] = {}
    stats = {"red": 0, "ungreened": 0}
    marked_set = set(marked)

    def midpoint(a, b):
        key = _key(a, b)
        if key in split:
            return split[key]
        tag = btag.get(key)
        if tag is not None and tag in curves:
            p = curves[tag].points_on_edge(np.array(verts[a]), np.array(verts[b]), [0.5])[0]
        else:
            p = 0.5 * (np.array(verts[a]) + np.array(verts[b]))
        verts.append(tuple(p))
        m = len(verts) - 1
        split[key] = m
        if tag is not None:
            del btag[key]
            btag[_key(a, m)] = tag
            btag[_key(m, b)] = tag
        return m

    def red(w: _Work):
        a, b, c = w.tri
        mab, mbc, mca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        w.alive = False
        stats["red"] += 1
        par = w.origins[0] if len(w.origins) == 1 else -1
        kids = [(a, mab, mca), (mab, b, mbc), (mca, mbc, c), (mab, mbc, mca)]
        for slot, t in enumerate(kids):
            work.append(_Work(t, w.origins, parent=par, slot=slot))

    def ungreen(w: _Work):
        sib = next(s for s in work if s.alive and s is not w and s.gparent == w.gparent)
        w.alive = sib.alive = False
        # green parents are stored as (u, v, o) with side (u, v) split at gmid
        u, v, _ = w.gparent
        split[_key(u, v)] = w.gmid
        stats["ungreened"] += 1
        parent_work = _Work(w.gparent, tuple(sorted(set(w.origins + sib.origins))))
        work.append(parent_work)
        red(parent_work)

    for k in marked:
        w = work[k]
        if not w.alive:
            continue
        if w.gparent is not None:
            ungreen(w)
        else:
            red(w)

    changed = True
    while changed:
        changed = False
        for w in list(work):
            if not w.alive:
                continue
            es = [_key(*e) for e in w.edges()]
            hit = [e for e in es if e in split]
            if not hit:
                continue
            deep = any(_key(e[0], split[e]) in split or _key(split[e], e[1]) in split for e in hit)
            if w.gparent is not None:
                ungreen(w)
                changed = True
            elif len(hit) >= 2 or deep:
                red(w)
                changed = True

    new_tris, origins, gpar, gmid, parent, slot = [], [], [], [], [], []
    n_green = 0
    for w in work:
        if not w.alive:
            continue
        es = w.edges()
        hit = [f for f, e in enumerate(es) if _key(*e) in split]
        if not hit:
            new_tris.append(w.tri)
            origins.append(w.origins)
            gpar.append(w.gparent if w.gparent is not None else (-1, -1, -1))
            gmid.append(w.gmid if w.gparent is not None else -1)
            parent.append(w.parent)
            slot.append(w.slot)
            continue
        f = hit[0]
        u, v = es[f]
        o = w.tri[(f + 2) % 3]
        m = split[_key(u, v)]
        n_green += 1
        par = w.origins[0] if len(w.origins) == 1 else -1
        for half, t in enumerate([(u, m, o), (m, v, o)]):
            new_tris.append(t)
            origins.append(w.origins)
            gpar.append((u, v, o))
            gmid.append(m)
            parent.append(par)
            slot.append(half)

    bnd = [(a, b, t) for (a, b), t in btag.items()]
    new_mesh = Mesh.from_arrays(np.array(verts), new_tris, bnd, curves, parent=parent,
                                child_slot=slot, green_parent=gpar, green_mid=gmid)
    children: dict[int, list[int]] = {k: [] for k in range(mesh.n_elements)}
    for j, org in enumerate(origins):
        for k in org:
            children[k].append(j)
    n_untouched = sum(1 for k, c in children.items() if len(c) == 1 and
                      len(origins[c[0]]) == 1 and np.array_equal(
                          np.sort(new_mesh.elements[c[0]]), np.sort(mesh.elements[k])))
    return new_mesh, Transfer(children, n_red=stats["red"], n_green=n_green,
                              n_untouched=n_untouched, n_ungreened=stats["ungreened"])

