"""Admissible two-point-flux meshes.

A :class:`Mesh` is immutable after construction and stores everything as flat
arrays: per-cell measures/centres and per-edge measures, distances,
transmissibilities and boundary kinds.  Fields living on a mesh are plain
arrays of cell values, optionally completed with one value per Dirichlet edge
(:class:`AugmentedField`).

Edge-local quantities use one convention everywhere: for edge ``e`` with owner
cell ``K = edge_cells[e, 0]`` the "other" value of a field is taken at
augmented index ``edge_other[e]``, which is the neighbour ``L`` for interior
edges, ``n_cells + j`` for the j-th Dirichlet edge and ``K`` itself for
Neumann edges (so every difference across a Neumann edge vanishes).
"""
from dataclasses import dataclass
import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

INTERIOR, DIRICHLET, NEUMANN = 0, 1, 2
_KIND_NAMES = {INTERIOR: "interior", DIRICHLET: "dirichlet", NEUMANN: "neumann"}

# Warn below this regularity constant (it only enters theoretical constants).
XI_WARN = 0.01


class MeshError(ValueError):
    """Raised for inconsistent, non-conforming or non-admissible meshes."""


class NotNestedError(MeshError):
    """Raised when a fine mesh is not a refinement of a coarse one."""


@dataclass(frozen=True)
class Cell:
    id: int
    measure: float
    center: tuple


@dataclass(frozen=True)
class Edge:
    id: int
    measure: float
    d_sigma: float
    tau: float
    kind: str            # "interior" | "dirichlet" | "neumann"
    cells: tuple         # (K, L) for interior edges, (K,) otherwise
    dirichlet_index: Optional[int] = None


@dataclass(frozen=True)
class AugmentedField:
    """Cell values plus one value per Dirichlet edge."""
    cell_values: np.ndarray
    dirichlet_values: np.ndarray

    @property
    def full(self):
        return np.concatenate([self.cell_values, self.dirichlet_values])


class Mesh:
    """Finite-volume mesh with two-point transmissibilities.

    Use the builders :func:`build_1d_uniform`, :func:`build_2d_rect` and
    :func:`load_triangle_mesh` rather than calling the constructor directly.
    """

    def __init__(self, dimension, cell_measure, cell_center, cell_diam,
                 edge_measure, edge_dist, edge_kind, edge_cells,
                 edge_mid, edge_vertices=None, cell_bounds=None,
                 cell_edge_dist=None, cell_polygons=None):
        self.dimension = int(dimension)
        self.cell_measure = _frozen(cell_measure, float)
        self.cell_center = _frozen(np.reshape(cell_center, (len(cell_measure), -1)), float)
        self.cell_diam = _frozen(cell_diam, float)
        self.edge_measure = _frozen(edge_measure, float)
        self.edge_dist = _frozen(edge_dist, float)
        self.edge_kind = _frozen(edge_kind, np.int8)
        self.edge_cells = _frozen(edge_cells, np.int64)
        self.edge_mid = _frozen(np.reshape(edge_mid, (len(edge_measure), -1)), float)
        self.edge_vertices = None if edge_vertices is None else _frozen(edge_vertices, float)
        self.cell_bounds = None if cell_bounds is None else _frozen(cell_bounds, float)
        self.cell_polygons = None if cell_polygons is None else _frozen(cell_polygons, float)

        n = self.n_cells
        if np.any(self.cell_measure <= 0):
            raise MeshError("cell measures must be positive")
        if np.any(self.edge_dist <= 0) or np.any(self.edge_measure <= 0):
            bad = int(np.flatnonzero((self.edge_dist <= 0) | (self.edge_measure <= 0))[0])
            raise MeshError(f"edge {bad} has non-positive measure or distance")
        self.edge_tau = _frozen(self.edge_measure / self.edge_dist, float)

        dir_edges = np.flatnonzero(self.edge_kind == DIRICHLET)
        if dir_edges.size == 0:
            raise MeshError("the Dirichlet boundary is empty")
        self.dirichlet_edges = _frozen(dir_edges, np.int64)
        edge_dir = np.full(self.n_edges, -1, dtype=np.int64)
        edge_dir[dir_edges] = np.arange(dir_edges.size)
        self.edge_dirichlet = _frozen(edge_dir, np.int64)

        other = self.edge_cells[:, 0].copy()
        inner = self.edge_kind == INTERIOR
        other[inner] = self.edge_cells[inner, 1]
        other[dir_edges] = n + np.arange(dir_edges.size)
        self.edge_other = _frozen(other, np.int64)
        if np.any(self.edge_cells[inner, 1] < 0) or np.any(self.edge_cells[inner, 0] == self.edge_cells[inner, 1]):
            raise MeshError("interior edges must join two distinct cells")

        # Non-Neumann edges: the only ones carrying fluxes.
        active = np.flatnonzero(self.edge_kind != NEUMANN)
        self.active_edges = _frozen(active, np.int64)
        self.ek = _frozen(self.edge_cells[active, 0], np.int64)
        self.eo = _frozen(self.edge_other[active], np.int64)
        self.etau = _frozen(self.edge_tau[active], float)
        self.interior_edges = _frozen(np.flatnonzero(inner), np.int64)

        adj = [[] for _ in range(n)]
        for e, (k, l) in enumerate(self.edge_cells):
            adj[k].append(e)
            if self.edge_kind[e] == INTERIOR:
                adj[l].append(e)
        self.cell_edges = tuple(np.asarray(a, dtype=np.int64) for a in adj)

        # Tridiagonal layout: interior edge i joins cells i and i+1.
        ie = self.interior_edges
        self.is_chain = bool(
            self.dimension == 1 and ie.size == n - 1
            and np.array_equal(self.edge_cells[ie, 0], np.arange(n - 1))
            and np.array_equal(self.edge_cells[ie, 1], np.arange(1, n)))

        if cell_edge_dist is None:
            cell_edge_dist = self._cell_edge_distances()
        self._cell_edge_dist = cell_edge_dist
        ratios = [d / self.cell_diam[k] for k, d in cell_edge_dist]
        self.xi = float(min(ratios))
        self.size = float(self.cell_diam.max())
        if self.xi < XI_WARN:
            logger.warning("mesh regularity constant xi=%.3g is below %.3g", self.xi, XI_WARN)

    # -- basic views ------------------------------------------------------
    @property
    def n_cells(self):
        return self.cell_measure.shape[0]

    @property
    def n_edges(self):
        return self.edge_measure.shape[0]

    @property
    def n_dirichlet(self):
        return self.dirichlet_edges.shape[0]

    @property
    def domain_measure(self):
        return float(self.cell_measure.sum())

    def cell(self, k):
        return Cell(int(k), float(self.cell_measure[k]), tuple(self.cell_center[k]))

    def edge(self, e):
        kind = int(self.edge_kind[e])
        k, l = (int(c) for c in self.edge_cells[e])
        cells = (k, l) if kind == INTERIOR else (k,)
        didx = int(self.edge_dirichlet[e]) if kind == DIRICHLET else None
        return Edge(int(e), float(self.edge_measure[e]), float(self.edge_dist[e]),
                    float(self.edge_tau[e]), _KIND_NAMES[kind], cells, didx)

    @property
    def cells(self):
        return [self.cell(k) for k in range(self.n_cells)]

    @property
    def edges(self):
        return [self.edge(e) for e in range(self.n_edges)]

    def _cell_edge_distances(self):
        """(K, d(x_K, sigma)) for every incident pair, from the stored geometry."""
        out = []
        for e in range(self.n_edges):
            for side in (0, 1):
                k = self.edge_cells[e, side]
                if side == 1 and self.edge_kind[e] != INTERIOR:
                    continue
                if self.edge_vertices is None:
                    d = abs(self.edge_mid[e, 0] - self.cell_center[k, 0])
                else:
                    d = _point_line_distance(self.cell_center[k], *self.edge_vertices[e])
                out.append((int(k), float(d)))
        return out

    # -- fields -----------------------------------------------------------
    def augment(self, cell_values, dirichlet_values=None):
        cell_values = np.asarray(cell_values, dtype=float)
        if dirichlet_values is None:
            dirichlet_values = np.zeros(self.n_dirichlet)
        dirichlet_values = np.broadcast_to(np.asarray(dirichlet_values, dtype=float),
                                           (self.n_dirichlet,)).copy()
        if cell_values.shape != (self.n_cells,):
            raise ValueError(f"expected {self.n_cells} cell values, got {cell_values.shape}")
        return AugmentedField(cell_values, dirichlet_values)

    def edge_diff(self, u_full):
        """D u_{K,sigma} on every edge, K being the edge's owner cell."""
        return u_full[self.edge_other] - u_full[self.edge_cells[:, 0]]

    def edge_trace(self, u, k, e):
        """Return ``(u_{K,sigma}, Du_{K,sigma})`` for cell ``k`` and incident edge ``e``."""
        kind = self.edge_kind[e]
        a, b = self.edge_cells[e]
        if k != a and not (kind == INTERIOR and k == b):
            raise ValueError(f"edge {e} is not incident to cell {k}")
        u_k = float(u.cell_values[k])
        if kind == INTERIOR:
            val = float(u.cell_values[b if k == a else a])
        elif kind == DIRICHLET:
            val = float(u.dirichlet_values[self.edge_dirichlet[e]])
        else:
            val = u_k
        return val, val - u_k

    def h1_seminorm_sq(self, u):
        """Discrete H1 seminorm squared: sum over edges of tau * (D_sigma u)^2."""
        full = u.full if isinstance(u, AugmentedField) else np.asarray(u, dtype=float)
        d = self.edge_diff(full)
        return float(np.dot(self.edge_tau, d * d))

    def orthogonality_residual(self):
        """Max over interior edges of |(x_L - x_K).t| / |x_L - x_K| (0 in 1D)."""
        if self.edge_vertices is None or self.interior_edges.size == 0:
            return 0.0
        ie = self.interior_edges
        dx = self.cell_center[self.edge_cells[ie, 1]] - self.cell_center[self.edge_cells[ie, 0]]
        t = self.edge_vertices[ie, 1] - self.edge_vertices[ie, 0]
        t /= np.linalg.norm(t, axis=1)[:, None]
        return float(np.max(np.abs(np.sum(dx * t, axis=1)) / np.linalg.norm(dx, axis=1)))

    def describe(self):
        kinds = np.bincount(self.edge_kind, minlength=3)
        return {
            "dimension": self.dimension,
            "cells": self.n_cells,
            "edges": self.n_edges,
            "interior_edges": int(kinds[INTERIOR]),
            "dirichlet_edges": int(kinds[DIRICHLET]),
            "neumann_edges": int(kinds[NEUMANN]),
            "domain_measure": self.domain_measure,
            "size": self.size,
            "xi": self.xi,
            "orthogonality_residual": self.orthogonality_residual(),
        }


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _point_line_distance(p, a, b):
    t = b - a
    return abs(t[0] * (p[1] - a[1]) - t[1] * (p[0] - a[0])) / math.hypot(t[0], t[1])


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def _kind_code(kind):
    k = str(kind).strip().upper()[:1]
    if k == "D":
        return DIRICHLET
    if k == "N":
        return NEUMANN
    raise ValueError(f"boundary kind must be 'D' or 'N', got {kind!r}")


def build_1d_uniform(n_cells, length=1.0, left="D", right="D"):
    """Uniform mesh of (0, length) with point edges of unit measure."""
    n_cells = int(n_cells)
    if n_cells < 2:
        raise ValueError("a 1D mesh needs at least 2 cells")
    if not length > 0:
        raise ValueError("length must be positive")
    h = length / n_cells
    nodes = np.linspace(0.0, length, n_cells + 1)
    centers = 0.5 * (nodes[:-1] + nodes[1:])
    ni = n_cells - 1
    edge_cells = np.empty((ni + 2, 2), dtype=np.int64)
    edge_cells[:ni, 0] = np.arange(ni)
    edge_cells[:ni, 1] = np.arange(1, n_cells)
    edge_cells[ni] = (0, -1)
    edge_cells[ni + 1] = (n_cells - 1, -1)
    dist = np.full(ni + 2, h)
    dist[ni:] = 0.5 * h
    kind = np.zeros(ni + 2, dtype=np.int8)
    kind[ni] = _kind_code(left)
    kind[ni + 1] = _kind_code(right)
    mid = np.concatenate([nodes[1:-1], [0.0, length]])
    return Mesh(1, np.full(n_cells, h), centers, np.full(n_cells, h),
                np.ones(ni + 2), dist, kind, edge_cells, mid,
                cell_bounds=np.column_stack([nodes[:-1], nodes[1:]]))


_SIDES = ("bottom", "top", "left", "right")


def build_2d_rect(nx, ny, Lx=1.0, Ly=1.0, boundary_spec=None):
    """Uniform rectangular mesh of (0, Lx) x (0, Ly).

    ``boundary_spec`` maps each of ``bottom``, ``top``, ``left``, ``right`` to
    ``"D"``, ``"N"`` or a list of ``(a, b)`` intervals (in the side's running
    coordinate) that are Dirichlet, the remainder of the side being Neumann.
    Interval endpoints must fall on mesh nodes.  Unlisted sides default to
    Dirichlet.
    """
    nx, ny = int(nx), int(ny)
    if nx < 2 or ny < 2:
        raise ValueError("a rectangular mesh needs nx, ny >= 2")
    if not (Lx > 0 and Ly > 0):
        raise ValueError("domain lengths must be positive")
    spec = {side: "D" for side in _SIDES}
    if boundary_spec:
        unknown = set(boundary_spec) - set(_SIDES)
        if unknown:
            raise ValueError(f"unknown boundary side(s) {sorted(unknown)}")
        spec.update(boundary_spec)

    hx, hy = Lx / nx, Ly / ny
    xs = np.linspace(0.0, Lx, nx + 1)
    ys = np.linspace(0.0, Ly, ny + 1)
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()           # cell id = j * nx + i
    cid = jj * nx + ii
    centers = np.column_stack([(ii + 0.5) * hx, (jj + 0.5) * hy])
    bounds = np.column_stack([xs[ii], xs[ii + 1], ys[jj], ys[jj + 1]])

    ec, em, ed, ek, verts = [], [], [], [], []

    def add(k, l, meas, dist, kind, a, b):
        ec.append((k, l))
        em.append(meas)
        ed.append(dist)
        ek.append(kind)
        verts.append((a, b))

    for j in range(ny):
        for i in range(nx - 1):
            add(j * nx + i, j * nx + i + 1, hy, hx, INTERIOR, (xs[i + 1], ys[j]), (xs[i + 1], ys[j + 1]))
    for j in range(ny - 1):
        for i in range(nx):
            add(j * nx + i, (j + 1) * nx + i, hx, hy, INTERIOR, (xs[i], ys[j + 1]), (xs[i + 1], ys[j + 1]))

    def side_kinds(side, nodes):
        val = spec[side]
        nseg = len(nodes) - 1
        if isinstance(val, str):
            return [_kind_code(val)] * nseg
        kinds = [NEUMANN] * nseg
        tol = 1e-12 * max(1.0, abs(nodes[-1]))
        for a, b in val:
            if not a < b:
                raise ValueError(f"empty Dirichlet interval ({a}, {b}) on side {side}")
            for p in (a, b):
                if p < nodes[0] - tol or p > nodes[-1] + tol:
                    raise ValueError(f"interval endpoint {p} outside side {side}")
                hit = np.flatnonzero(np.abs(nodes - p) <= tol)
                if hit.size == 0:
                    seg = int(np.searchsorted(nodes, p)) - 1
                    raise MeshError(
                        f"boundary interval endpoint {p} on side {side} cuts boundary edge "
                        f"{seg} [{nodes[seg]:.6g}, {nodes[seg + 1]:.6g}]; align it with mesh nodes")
            for s in range(nseg):
                if nodes[s] >= a - tol and nodes[s + 1] <= b + tol:
                    kinds[s] = DIRICHLET
        return kinds

    for i, kind in enumerate(side_kinds("bottom", xs)):
        add(i, -1, hx, 0.5 * hy, kind, (xs[i], 0.0), (xs[i + 1], 0.0))
    for i, kind in enumerate(side_kinds("top", xs)):
        add((ny - 1) * nx + i, -1, hx, 0.5 * hy, kind, (xs[i], Ly), (xs[i + 1], Ly))
    for j, kind in enumerate(side_kinds("left", ys)):
        add(j * nx, -1, hy, 0.5 * hx, kind, (0.0, ys[j]), (0.0, ys[j + 1]))
    for j, kind in enumerate(side_kinds("right", ys)):
        add(j * nx + nx - 1, -1, hy, 0.5 * hx, kind, (Lx, ys[j]), (Lx, ys[j + 1]))

    verts = np.asarray(verts, dtype=float)
    order = np.argsort(cid)
    assert np.array_equal(order, np.arange(nx * ny))
    return Mesh(2, np.full(nx * ny, hx * hy), centers, np.full(nx * ny, math.hypot(hx, hy)),
                em, ed, ek, ec, verts.mean(axis=1), edge_vertices=verts, cell_bounds=bounds)


# --------------------------------------------------------------------------
# triangle meshes
# --------------------------------------------------------------------------

def _circumcenter(a, b, c):
    d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    if d == 0.0:
        raise MeshError("degenerate triangle")
    a2, b2, c2 = a @ a, b @ b, c @ c
    ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d
    uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d
    return np.array([ux, uy])


def read_triangle_file(path):
    """Parse a ``tri-mesh v1`` file into (vertices, triangles, boundary)."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0].lower() != "tri-mesh v1":
        raise MeshError(f"{path}: missing 'tri-mesh v1' header")
    pos = 1

    def section(name):
        nonlocal pos
        head = lines[pos].split()
        if len(head) != 2 or head[0].lower() != name:
            raise MeshError(f"{path}: expected '{name} <count>' at record {pos}")
        count = int(head[1])
        rows = [ln.split() for ln in lines[pos + 1:pos + 1 + count]]
        if len(rows) != count:
            raise MeshError(f"{path}: section {name} is truncated")
        pos += 1 + count
        return rows

    verts = np.array([[float(v) for v in r[:2]] for r in section("vertices")])
    tris = np.array([[int(v) for v in r[:3]] for r in section("triangles")], dtype=np.int64)
    bnd = [(int(r[0]), int(r[1]), r[2].upper()) for r in section("boundary")]
    return verts, tris, bnd


def write_triangle_file(path, vertices, triangles, boundary):
    out = ["tri-mesh v1", f"vertices {len(vertices)}"]
    out += [f"{float(x)!r} {float(y)!r}" for x, y in vertices]
    out.append(f"triangles {len(triangles)}")
    out += [" ".join(str(int(v)) for v in t) for t in triangles]
    out.append(f"boundary {len(boundary)}")
    out += [f"{int(i)} {int(j)} {k}" for i, j, k in boundary]
    Path(path).write_text("\n".join(out) + "\n")


def load_triangle_mesh(path):
    """Load a conforming triangulation; cell centres are circumcentres."""
    verts, tris, bnd = read_triangle_file(path)
    if tris.size == 0:
        raise MeshError(f"{path}: no triangles")
    if tris.min() < 0 or tris.max() >= len(verts):
        raise MeshError(f"{path}: triangle references an unknown vertex")
    n = len(tris)
    centers = np.empty((n, 2))
    areas = np.empty(n)
    diams = np.empty(n)
    for t, (i, j, k) in enumerate(tris):
        a, b, c = verts[i], verts[j], verts[k]
        area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if abs(area) <= 1e-300:
            raise MeshError(f"triangle {t} is degenerate")
        areas[t] = abs(area)
        centers[t] = _circumcenter(a, b, c)
        diams[t] = max(np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(a - c))

    owners = {}
    for t, tri in enumerate(tris):
        for s in range(3):
            key = tuple(sorted((int(tri[s]), int(tri[(s + 1) % 3]))))
            owners.setdefault(key, []).append(t)
    bkind = {}
    for i, j, k in bnd:
        key = tuple(sorted((i, j)))
        if key in bkind:
            raise MeshError(f"{path}: boundary segment {key} listed twice")
        bkind[key] = _kind_code(k)

    ec, em, ed, ekind, ev, pair_dist = [], [], [], [], [], []
    for key, ts in owners.items():
        if len(ts) > 2:
            raise MeshError(f"non-conforming mesh: edge {key} shared by triangles {ts}")
        a, b = verts[key[0]], verts[key[1]]
        meas = float(np.linalg.norm(b - a))
        dks = []
        for t in ts:
            third = verts[[v for v in tris[t] if v not in key][0]]
            d = _signed_distance(centers[t], a, b, third)
            if d <= 0:
                raise MeshError(
                    f"triangle {t} is not admissible: its circumcentre lies on or beyond edge {key} "
                    f"(d(x_K, sigma) = {d:.3g})")
            dks.append(d)
        if len(ts) == 2:
            if key in bkind:
                raise MeshError(f"boundary segment {key} is an interior edge")
            dist = float(np.linalg.norm(centers[ts[1]] - centers[ts[0]]))
            ec.append((ts[0], ts[1]))
            ekind.append(INTERIOR)
        else:
            if key not in bkind:
                raise MeshError(f"non-conforming mesh: boundary edge {key} has no boundary marker")
            dist = dks[0]
            ec.append((ts[0], -1))
            ekind.append(bkind[key])
        em.append(meas)
        ed.append(dist)
        ev.append((a, b))
        for t, d in zip(ts, dks):
            pair_dist.append((int(t), float(d)))
    missing = set(bkind) - set(owners)
    if missing:
        raise MeshError(f"boundary segment(s) {sorted(missing)} are not triangle edges")
    ev = np.asarray(ev, dtype=float)
    mesh = Mesh(2, areas, centers, diams, em, ed, ekind, ec, ev.mean(axis=1),
                edge_vertices=ev, cell_edge_dist=pair_dist, cell_polygons=verts[tris])
    res = mesh.orthogonality_residual()
    if res > 1e-10:
        raise MeshError(f"centre segments are not orthogonal to edges (residual {res:.3g})")
    return mesh


def _signed_distance(p, a, b, inside):
    """Distance from p to line ab, positive on the side of ``inside``."""
    t = b - a
    nrm = math.hypot(t[0], t[1])
    side_p = t[0] * (p[1] - a[1]) - t[1] * (p[0] - a[0])
    side_i = t[0] * (inside[1] - a[1]) - t[1] * (inside[0] - a[0])
    return math.copysign(1.0, side_i) * side_p / nrm


# --------------------------------------------------------------------------
# projections
# --------------------------------------------------------------------------

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(5)

# 7-point degree-5 rule on the reference triangle (barycentric, weights sum to 1).
_TRI_RULE = [
    ((1 / 3, 1 / 3, 1 / 3), 0.225),
    ((0.059715871789770, 0.470142064105115, 0.470142064105115), 0.132394152788506),
    ((0.470142064105115, 0.059715871789770, 0.470142064105115), 0.132394152788506),
    ((0.470142064105115, 0.470142064105115, 0.059715871789770), 0.132394152788506),
    ((0.797426985353087, 0.101286507323456, 0.101286507323456), 0.125939180544827),
    ((0.101286507323456, 0.797426985353087, 0.101286507323456), 0.125939180544827),
    ((0.101286507323456, 0.101286507323456, 0.797426985353087), 0.125939180544827),
]


def piecewise(breaks, func):
    """Tag ``func`` with discontinuity locations used by the projections.

    ``breaks`` is a sequence of coordinates (1D) or a pair
    ``(x_breaks, y_breaks)`` of axis-aligned discontinuity lines (2D).
    """
    func.breaks = breaks
    return func


def _interval_mean(f, a, b, breaks):
    pts = [a] + [p for p in sorted(breaks) if a < p < b] + [b]
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        x = 0.5 * (lo + hi) + 0.5 * (hi - lo) * _GAUSS_X
        total += 0.5 * (hi - lo) * np.dot(_GAUSS_W, np.asarray(f(x), dtype=float) * np.ones_like(x))
    return total / (b - a)


def _box_mean(f, x0, x1, y0, y1, bx, by):
    px = [x0] + [p for p in sorted(bx) if x0 < p < x1] + [x1]
    py = [y0] + [p for p in sorted(by) if y0 < p < y1] + [y1]
    total = 0.0
    for xa, xb in zip(px[:-1], px[1:]):
        gx = 0.5 * (xa + xb) + 0.5 * (xb - xa) * _GAUSS_X
        for ya, yb in zip(py[:-1], py[1:]):
            gy = 0.5 * (ya + yb) + 0.5 * (yb - ya) * _GAUSS_X
            X, Y = np.meshgrid(gx, gy, indexing="ij")
            vals = np.asarray(f(X.ravel(), Y.ravel()), dtype=float) * np.ones(X.size)
            w = np.outer(_GAUSS_W, _GAUSS_W).ravel()
            total += 0.25 * (xb - xa) * (yb - ya) * np.dot(w, vals)
    return total / ((x1 - x0) * (y1 - y0))


def _breaks(f, dim):
    br = getattr(f, "breaks", None)
    if br is None:
        return [()] * dim
    if dim == 1:
        return [tuple(np.atleast_1d(br))]
    return [tuple(np.atleast_1d(b)) for b in br]


def project_cell_averages(mesh, f, fine_mesh=None):
    """Cell means of ``f`` on ``mesh``.

    ``f`` is either a callable of the coordinates (``f(x)`` in 1D, ``f(x, y)``
    in 2D) or, when ``fine_mesh`` is given, an array of values on a nested
    refinement of ``mesh`` (measure-weighted means).
    """
    if fine_mesh is not None:
        fine = np.asarray(f, dtype=float)
        owner = nesting_map(mesh, fine_mesh)
        num = np.bincount(owner, weights=fine * fine_mesh.cell_measure, minlength=mesh.n_cells)
        den = np.bincount(owner, weights=fine_mesh.cell_measure, minlength=mesh.n_cells)
        return num / den
    if not callable(f):
        val = np.asarray(f, dtype=float)
        return np.broadcast_to(val, (mesh.n_cells,)).copy()
    out = np.empty(mesh.n_cells)
    if mesh.cell_bounds is not None and mesh.dimension == 1:
        (br,) = _breaks(f, 1)
        for k, (a, b) in enumerate(mesh.cell_bounds):
            out[k] = _interval_mean(f, a, b, br)
    elif mesh.cell_bounds is not None:
        bx, by = _breaks(f, 2)
        for k, (x0, x1, y0, y1) in enumerate(mesh.cell_bounds):
            out[k] = _box_mean(f, x0, x1, y0, y1, bx, by)
    elif mesh.cell_polygons is not None:
        out = _triangle_means(mesh.cell_polygons, f)
    else:
        raise MeshError("mesh carries no cell geometry for projection")
    return out


def _triangle_means(polys, f):
    """Triangle means by a degree-5 rule (exact for quintic polynomials)."""
    out = np.empty(len(polys))
    for t, p in enumerate(polys):
        pts = np.array([np.dot(bc, p) for bc, _ in _TRI_RULE])
        w = np.array([wt for _, wt in _TRI_RULE])
        out[t] = np.dot(w, np.asarray(f(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(w)))
    return out


def edge_averages(mesh, f, edges=None):
    """Means of ``f`` over the given edges (default: the Dirichlet edges)."""
    edges = mesh.dirichlet_edges if edges is None else np.asarray(edges)
    if mesh.dimension == 1:
        return np.asarray(f(mesh.edge_mid[edges, 0]), dtype=float) * np.ones(len(edges))
    out = np.empty(len(edges))
    bx, by = _breaks(f, 2)
    for i, e in enumerate(edges):
        a, b = mesh.edge_vertices[e]
        # split axis-aligned edges at tagged discontinuities
        cuts = [0.0, 1.0]
        if a[1] == b[1]:
            cuts += [(p - a[0]) / (b[0] - a[0]) for p in bx if min(a[0], b[0]) < p < max(a[0], b[0])]
        elif a[0] == b[0]:
            cuts += [(p - a[1]) / (b[1] - a[1]) for p in by if min(a[1], b[1]) < p < max(a[1], b[1])]
        cuts = sorted(cuts)
        total = 0.0
        for s0, s1 in zip(cuts[:-1], cuts[1:]):
            s = 0.5 * (s0 + s1) + 0.5 * (s1 - s0) * _GAUSS_X
            pts = a[None, :] + s[:, None] * (b - a)[None, :]
            vals = np.asarray(f(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(s))
            total += 0.5 * (s1 - s0) * np.dot(_GAUSS_W, vals)
        out[i] = total
    return out


def nesting_map(coarse, fine):
    """For each fine cell, the coarse cell containing it.

    Works for meshes carrying axis-aligned cell bounds (1D and rectangular);
    raises :class:`NotNestedError` when a fine cell straddles coarse cells.
    """
    if coarse.cell_bounds is None or fine.cell_bounds is None:
        raise NotNestedError("nesting requires interval or rectangular meshes")
    if coarse.dimension != fine.dimension:
        raise NotNestedError("meshes have different dimensions")
    owner = np.empty(fine.n_cells, dtype=np.int64)
    cb, fb = coarse.cell_bounds, fine.cell_bounds
    scale = max(1.0, float(np.abs(cb).max()))
    tol = 1e-10 * scale
    if coarse.dimension == 1:
        idx = np.searchsorted(cb[:, 1], fine.cell_center[:, 0])
        idx = np.clip(idx, 0, coarse.n_cells - 1)
        ok = (fb[:, 0] >= cb[idx, 0] - tol) & (fb[:, 1] <= cb[idx, 1] + tol)
        owner[:] = idx
    else:
        xe = np.unique(cb[:, 1])
        ye = np.unique(cb[:, 3])
        ix = np.clip(np.searchsorted(xe, fine.cell_center[:, 0]), 0, len(xe) - 1)
        iy = np.clip(np.searchsorted(ye, fine.cell_center[:, 1]), 0, len(ye) - 1)
        lookup = {(round(b[1], 12), round(b[3], 12)): k for k, b in enumerate(cb)}
        for f_id in range(fine.n_cells):
            k = lookup.get((round(xe[ix[f_id]], 12), round(ye[iy[f_id]], 12)))
            if k is None:
                raise NotNestedError(f"fine cell {f_id} lies outside the coarse mesh")
            owner[f_id] = k
        ok = ((fb[:, 0] >= cb[owner, 0] - tol) & (fb[:, 1] <= cb[owner, 1] + tol)
              & (fb[:, 2] >= cb[owner, 2] - tol) & (fb[:, 3] <= cb[owner, 3] + tol))
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise NotNestedError(f"fine cell {bad} straddles coarse cells")
    if not np.allclose(np.bincount(owner, weights=fine.cell_measure, minlength=coarse.n_cells),
                       coarse.cell_measure, rtol=1e-10, atol=0):
        raise NotNestedError("fine cells do not tile the coarse cells")
    return owner
