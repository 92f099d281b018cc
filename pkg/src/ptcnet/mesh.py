"""Triangular meshes for back-step and Couette-annulus geometries.

Meshes are built from structured grids (one tensor-product grid for the
back-step, a polar grid for the annulus).  Obstacles are cut out of the
structured grid and the hole is re-triangulated locally with Delaunay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree


class ConfigurationError(ValueError):
    """Raised for geometry/mesh requests that cannot be honoured."""


class MeshFormatError(ValueError):
    pass


class BoundaryTag(str, Enum):
    INLET = "Inlet"
    OUTLET = "Outlet"
    WALL = "Wall"
    MOVING_WALL = "MovingWall"
    OBSTACLE_WALL = "ObstacleWall"


# vertex flag bits; an edge carries the highest-priority bit both ends share
_BIT = {
    BoundaryTag.OBSTACLE_WALL: 1,
    BoundaryTag.INLET: 2,
    BoundaryTag.OUTLET: 4,
    BoundaryTag.MOVING_WALL: 8,
    BoundaryTag.WALL: 16,
}
_PRIORITY = [
    BoundaryTag.OBSTACLE_WALL,
    BoundaryTag.INLET,
    BoundaryTag.OUTLET,
    BoundaryTag.MOVING_WALL,
    BoundaryTag.WALL,
]


# ---------------------------------------------------------------------------
# geometry description


@dataclass(frozen=True)
class Circle:
    radius: float


@dataclass(frozen=True)
class Ellipse:
    a: float  # semiaxis along x
    b: float  # semiaxis along y


@dataclass(frozen=True)
class Obstacle:
    shape: Circle | Ellipse
    center: tuple[float, float]

    def inside(self, pts: np.ndarray) -> np.ndarray:
        d = np.asarray(pts, dtype=float) - np.asarray(self.center)
        if isinstance(self.shape, Circle):
            return np.hypot(d[..., 0], d[..., 1]) < self.shape.radius
        return (d[..., 0] / self.shape.a) ** 2 + (d[..., 1] / self.shape.b) ** 2 < 1.0

    def boundary_points(self, spacing: float) -> np.ndarray:
        """Points on the obstacle outline, ccw, roughly ``spacing`` apart."""
        cx, cy = self.center
        if isinstance(self.shape, Circle):
            r = self.shape.radius
            n = max(8, math.ceil(2 * math.pi * r / spacing))
            t = 2 * math.pi * np.arange(n) / n
            return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])
        a, b = self.shape.a, self.shape.b
        t = np.linspace(0.0, 2 * math.pi, 4001)
        xy = np.column_stack([a * np.cos(t), b * np.sin(t)])
        arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
        n = max(8, math.ceil(arc[-1] / spacing))
        s = arc[-1] * np.arange(n) / n
        ts = np.interp(s, arc, t)
        return np.column_stack([cx + a * np.cos(ts), cy + b * np.sin(ts)])

    def clearance(self, pts: np.ndarray) -> np.ndarray:
        """Distance from each point to the obstacle outline (0 inside)."""
        pts = np.asarray(pts, dtype=float)
        if isinstance(self.shape, Circle):
            d = np.hypot(*(pts - np.asarray(self.center)).T) - self.shape.radius
        else:
            outline = self.boundary_points(min(self.shape.a, self.shape.b) / 200.0)
            d, _ = cKDTree(outline).query(pts)
        return np.where(self.inside(pts), 0.0, np.maximum(d, 0.0))


@dataclass(frozen=True)
class Transform:
    kind: str = "Identity"  # Identity | MirrorX | Rotate90CCW | Scale
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ("Identity", "MirrorX", "Rotate90CCW", "Scale"):
            raise ConfigurationError(f"unknown transform {self.kind!r}")
        if self.kind == "Scale" and not self.factor > 0:
            raise ConfigurationError("scale factor must be positive")


IDENTITY = Transform()
MIRROR_X = Transform("MirrorX")
ROTATE_90_CCW = Transform("Rotate90CCW")


def scale(factor: float) -> Transform:
    return Transform("Scale", factor)


@dataclass(frozen=True)
class GeometrySpec:
    """Back-step or annulus domain, optional obstacle, optional transform.

    Back-step layout: the inflow tunnel ``[0, L_in] x [H_out - H_in, H_out]``
    joins the outflow tunnel ``[L_in, L_in + L_out] x [0, H_out]``; the inlet
    is the left edge of the inflow tunnel.  The annulus is centred at
    ``(r_out, r_out)`` so that the whole domain lies in the positive quadrant.
    """

    kind: str  # "BackStep" | "Annulus"
    inflow: tuple[float, float] = (0.0, 0.0)  # (width, length)
    outflow: tuple[float, float] = (0.0, 0.0)  # (width, length)
    r_in: float = 0.0
    r_out: float = 0.0
    obstacle: Obstacle | None = None
    transform: Transform = IDENTITY

    def __post_init__(self):
        if self.kind == "BackStep":
            lengths = (*self.inflow, *self.outflow)
            if min(lengths) <= 0:
                raise ConfigurationError("back-step lengths must be positive")
            if self.inflow[0] >= self.outflow[0]:
                raise ConfigurationError("inflow tunnel must be narrower than outflow tunnel")
        elif self.kind == "Annulus":
            if not 0 < self.r_in < self.r_out:
                raise ConfigurationError("annulus needs 0 < r_in < r_out")
        else:
            raise ConfigurationError(f"unknown geometry kind {self.kind!r}")
        if self.obstacle is not None:
            sh = self.obstacle.shape
            dims = (sh.radius,) if isinstance(sh, Circle) else (sh.a, sh.b)
            if min(dims) <= 0:
                raise ConfigurationError("obstacle dimensions must be positive")

    def base(self) -> GeometrySpec:
        return GeometrySpec(self.kind, self.inflow, self.outflow, self.r_in, self.r_out,
                            self.obstacle, IDENTITY)

    def with_transform(self, t: Transform) -> GeometrySpec:
        return GeometrySpec(self.kind, self.inflow, self.outflow, self.r_in, self.r_out,
                            self.obstacle, t)

    def with_obstacle(self, obstacle: Obstacle | None) -> GeometrySpec:
        return GeometrySpec(self.kind, self.inflow, self.outflow, self.r_in, self.r_out,
                            obstacle, self.transform)

    @property
    def narrowest_channel(self) -> float:
        if self.kind == "BackStep":
            h_in, h_out = self.inflow[0], self.outflow[0]
            return min(h_in, h_out - h_in)
        return self.r_out - self.r_in

    @property
    def characteristic_length(self) -> float:
        """Length scale entering the Reynolds number (inlet width / gap)."""
        f = self.transform.factor if self.transform.kind == "Scale" else 1.0
        if self.kind == "BackStep":
            return self.inflow[0] * f
        return (self.r_out - self.r_in) * f

    def inside(self, pts: np.ndarray) -> np.ndarray:
        """Strict interior test of the untransformed fluid domain (without obstacle)."""
        x, y = np.asarray(pts, dtype=float).T
        if self.kind == "BackStep":
            (h_in, l_in), (h_out, l_out) = self.inflow, self.outflow
            inflow = (x > 0) & (x <= l_in) & (y > h_out - h_in) & (y < h_out)
            outflow = (x > l_in) & (x < l_in + l_out) & (y > 0) & (y < h_out)
            return inflow | outflow
        r = np.hypot(x - self.r_out, y - self.r_out)
        return (r > self.r_in) & (r < self.r_out)


# named benchmark geometries (dimensions in metres)
B1 = GeometrySpec("BackStep", inflow=(0.05, 0.25), outflow=(0.12, 1.15))
B2 = GeometrySpec("BackStep", inflow=(0.08, 0.25), outflow=(0.22, 1.15))
B1S = B1.with_transform(scale(0.1))
B2S = B2.with_transform(scale(0.1))
BM = B1.with_transform(MIRROR_X)
BR = B1.with_transform(ROTATE_90_CCW)
C = GeometrySpec("Annulus", r_in=0.2, r_out=0.4)
CS = GeometrySpec("Annulus", r_in=0.04, r_out=0.08)

GEOMETRIES = {"B1": B1, "B2": B2, "B1S": B1S, "B2S": B2S, "BM": BM, "BR": BR, "C": C, "CS": CS}


# ---------------------------------------------------------------------------
# mesh


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (N, 2)
    elements: np.ndarray  # (M, 3), counter-clockwise
    boundary_edges: np.ndarray  # (K, 2), oriented with the domain on the left
    boundary_tags: tuple[BoundaryTag, ...]
    neighbors: np.ndarray = field(init=False)  # (M, 3), ascending ids, -1 padded
    h: np.ndarray = field(init=False)  # (M,) longest edge

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        bedges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "boundary_edges", bedges)
        object.__setattr__(self, "boundary_tags", tuple(BoundaryTag(t) for t in self.boundary_tags))
        object.__setattr__(self, "neighbors", _neighbor_table(elements))
        object.__setattr__(self, "h", _longest_edges(vertices, elements))
        for arr in (self.vertices, self.elements, self.boundary_edges, self.neighbors, self.h):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.elements)

    def edge_lengths(self) -> np.ndarray:
        """(M, 3) lengths; column k is the edge opposite local vertex k."""
        p = self.vertices[self.elements]
        return np.stack([
            np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
            np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
            np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
        ], axis=1)

    def tag_vertices(self, tag: BoundaryTag) -> np.ndarray:
        """Sorted ids of vertices on edges carrying ``tag``."""
        sel = [i for i, t in enumerate(self.boundary_tags) if t == tag]
        if not sel:
            return np.empty(0, dtype=np.int64)
        return np.unique(self.boundary_edges[sel])

    @property
    def tags_present(self) -> set[BoundaryTag]:
        return set(self.boundary_tags)

    def n_edges(self) -> int:
        return len(_edge_map(self.elements))

    def check_conformity(self) -> None:
        """Raise ``AssertionError`` unless the mesh is a valid conforming triangulation."""
        assert np.all(self.areas > 0), "non-positive element area"
        counts: dict[tuple[int, int], int] = {}
        for e in _edge_map(self.elements).items():
            counts[e[0]] = len(e[1])
        assert max(counts.values()) <= 2, "edge shared by more than two elements"
        boundary = {k for k, c in counts.items() if c == 1}
        tagged = {tuple(sorted(map(int, e))) for e in self.boundary_edges}
        assert boundary == tagged, "tagged boundary does not match mesh boundary"
        assert len(tagged) == len(self.boundary_edges), "duplicate boundary edge"


def signed_areas(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = vertices[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _longest_edges(vertices, elements):
    p = vertices[elements]
    return np.max(np.stack([
        np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
        np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
        np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
    ]), axis=0) if len(elements) else np.empty(0)


def _edge_map(elements) -> dict[tuple[int, int], list[int]]:
    edges: dict[tuple[int, int], list[int]] = {}
    for e, (a, b, c) in enumerate(np.asarray(elements).tolist()):
        for i, j in ((a, b), (b, c), (c, a)):
            edges.setdefault((i, j) if i < j else (j, i), []).append(e)
    return edges


def _neighbor_table(elements) -> np.ndarray:
    table = [[] for _ in range(len(elements))]
    for owners in _edge_map(elements).values():
        if len(owners) == 2:
            a, b = owners
            table[a].append(b)
            table[b].append(a)
    out = np.full((len(elements), 3), -1, dtype=np.int64)
    for e, nb in enumerate(table):
        nb = sorted(nb)[:3]
        out[e, : len(nb)] = nb
    return out


def element_size(mesh: Mesh, e: int) -> float:
    if not 0 <= e < mesh.n_elements:
        raise IndexError(f"element {e} out of range")
    return float(mesh.h[e])


def euler_characteristic(mesh: Mesh) -> int:
    """V - E + F; equals 1 - (number of holes) for a connected planar mesh."""
    return mesh.n_vertices - mesh.n_edges() + mesh.n_elements


# ---------------------------------------------------------------------------
# transforms


def apply_transform(mesh: Mesh, t: Transform) -> Mesh:
    v = mesh.vertices
    elements = mesh.elements
    edges = mesh.boundary_edges
    if t.kind == "Identity":
        return mesh
    if t.kind == "MirrorX":
        new_v = np.column_stack([v[:, 0], -v[:, 1]])
        # reflection flips orientation
        elements = elements[:, [0, 2, 1]]
        edges = edges[:, [1, 0]]
    elif t.kind == "Rotate90CCW":
        new_v = np.column_stack([-v[:, 1], v[:, 0]])
    else:
        new_v = v * t.factor
    return Mesh(new_v, elements, edges, mesh.boundary_tags)


# ---------------------------------------------------------------------------
# generation


class _Grid:
    """Structured quadrilateral grid: nodes X[i, j], cells (i, j) -> quad."""

    def __init__(self, xy: np.ndarray, node_ok: np.ndarray, cell_ok: np.ndarray,
                 flags: np.ndarray, periodic_j: bool = False):
        self.xy = xy
        self.node_ok = node_ok
        self.cell_ok = cell_ok
        self.flags = flags
        self.periodic_j = periodic_j

    def corners(self, i, j):
        nj = self.xy.shape[1]
        jp = (j + 1) % nj if self.periodic_j else j + 1
        return [(i, j), (i + 1, j), (i + 1, jp), (i, jp)]


def _spacing_counts(length: float, d: float) -> int:
    return max(1, math.ceil(length / d - 1e-9))


def _backstep_grid(g: GeometrySpec, d: float) -> _Grid:
    (h_in, l_in), (h_out, l_out) = g.inflow, g.outflow
    ys = h_out - h_in
    nx1, nx2 = _spacing_counts(l_in, d), _spacing_counts(l_out, d)
    ny1, ny2 = _spacing_counts(ys, d), _spacing_counts(h_in, d)
    xs = np.concatenate([np.linspace(0, l_in, nx1 + 1), np.linspace(l_in, l_in + l_out, nx2 + 1)[1:]])
    yv = np.concatenate([np.linspace(0, ys, ny1 + 1), np.linspace(ys, h_out, ny2 + 1)[1:]])
    nx, ny = len(xs), len(yv)
    X, Y = np.meshgrid(xs, yv, indexing="ij")
    xy = np.stack([X, Y], axis=-1)
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    node_ok = (ii >= nx1) | (jj >= ny1)
    ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    cell_ok = (ci >= nx1) | (cj >= ny1)
    flags = np.zeros((nx, ny), dtype=np.int64)
    flags[0, :] |= np.where(jj[0] >= ny1, _BIT[BoundaryTag.INLET], 0)
    flags[-1, :] |= _BIT[BoundaryTag.OUTLET]
    wall = (
        (jj == ny - 1)
        | ((jj == 0) & (ii >= nx1))
        | ((ii == nx1) & (jj <= ny1))
        | ((jj == ny1) & (ii <= nx1))
    )
    flags |= np.where(wall & node_ok, _BIT[BoundaryTag.WALL], 0)
    flags[~node_ok] = 0
    return _Grid(xy, node_ok, cell_ok, flags)


def _annulus_grid(g: GeometrySpec, d: float) -> _Grid:
    nr = _spacing_counts(g.r_out - g.r_in, d)
    nt = max(8, math.ceil(2 * math.pi * g.r_out / d - 1e-9))
    r = np.linspace(g.r_in, g.r_out, nr + 1)
    t = 2 * math.pi * np.arange(nt) / nt
    R, T = np.meshgrid(r, t, indexing="ij")
    xy = np.stack([g.r_out + R * np.cos(T), g.r_out + R * np.sin(T)], axis=-1)
    node_ok = np.ones(R.shape, dtype=bool)
    cell_ok = np.ones((nr, nt), dtype=bool)
    flags = np.zeros(R.shape, dtype=np.int64)
    flags[0, :] = _BIT[BoundaryTag.MOVING_WALL]
    flags[-1, :] = _BIT[BoundaryTag.WALL]
    return _Grid(xy, node_ok, cell_ok, flags, periodic_j=True)


def _cell_triangles(grid: _Grid, cells) -> list[tuple]:
    tris = []
    for i, j in cells:
        a, b, c, dd = grid.corners(i, j)
        tris.append((a, b, c))
        tris.append((a, c, dd))
    return tris


def _points_in_triangles(pts, tri_xy, tol=1e-12) -> np.ndarray:
    """Boolean per point: inside (or on) any of the given triangles."""
    if len(tri_xy) == 0:
        return np.zeros(len(pts), dtype=bool)
    a, b, c = tri_xy[:, 0], tri_xy[:, 1], tri_xy[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    px = pts[:, None, 0] - a[None, :, 0]
    py = pts[:, None, 1] - a[None, :, 1]
    l1 = (px * (c[None, :, 1] - a[None, :, 1]) - py * (c[None, :, 0] - a[None, :, 0])) / det
    l2 = (py * (b[None, :, 0] - a[None, :, 0]) - px * (b[None, :, 1] - a[None, :, 1])) / det
    inside = (l1 >= -tol) & (l2 >= -tol) & (l1 + l2 <= 1 + tol)
    return inside.any(axis=1)


def _check_obstacle(g: GeometrySpec) -> None:
    obs = g.obstacle
    outline = obs.boundary_points(1e-3 * _obstacle_size(obs))
    if not np.all(g.inside(outline)):
        raise ConfigurationError("obstacle is not strictly inside the fluid domain")
    if not g.inside(np.array([obs.center]))[0]:
        raise ConfigurationError("obstacle centre lies outside the fluid domain")
    if g.kind == "BackStep":
        (h_in, l_in), (h_out, _) = g.inflow, g.outflow
        corner = np.array([[l_in, h_out - h_in]])
        if obs.inside(corner)[0]:
            raise ConfigurationError("obstacle covers the step corner")
    elif obs.inside(np.array([[g.r_out, g.r_out]]))[0]:
        raise ConfigurationError("obstacle covers the annulus centre")


def _obstacle_size(obs: Obstacle) -> float:
    sh = obs.shape
    return sh.radius if isinstance(sh, Circle) else min(sh.a, sh.b)


def _build(g: GeometrySpec, d: float) -> Mesh:
    grid = _backstep_grid(g, d) if g.kind == "BackStep" else _annulus_grid(g, d)
    ni, nj = grid.cell_ok.shape
    cells = [(i, j) for i in range(ni) for j in range(nj) if grid.cell_ok[i, j]]
    obs = g.obstacle

    removed: list[tuple[int, int]] = []
    if obs is not None:
        clear = obs.clearance(grid.xy.reshape(-1, 2)).reshape(grid.xy.shape[:2])
        kept = []
        for cell in cells:
            if min(clear[c] for c in grid.corners(*cell)) <= d:
                removed.append(cell)
            else:
                kept.append(cell)
        cells = kept

    # vertex numbering: structured nodes first (in grid order), then obstacle points
    used = set()
    for cell in cells:
        used.update(grid.corners(*cell))
    hole_pts: list[tuple[int, int]] = []
    if removed:
        kept_nodes = set(used)
        cand = set()
        for cell in removed:
            cand.update(grid.corners(*cell))
        for node in sorted(cand):
            on_boundary = grid.flags[node] != 0
            if node in kept_nodes or on_boundary or clear[node] >= 0.6 * d:
                hole_pts.append(node)
        used.update(hole_pts)
    order = sorted(used)
    index = {node: k for k, node in enumerate(order)}
    vertices = [grid.xy[node] for node in order]
    flags = [int(grid.flags[node]) for node in order]

    tris = [tuple(index[n] for n in tri) for tri in _cell_triangles(grid, cells)]

    if removed:
        ring = obs.boundary_points(0.7 * d)
        base = len(vertices)
        vertices.extend(ring)
        flags.extend([_BIT[BoundaryTag.OBSTACLE_WALL]] * len(ring))
        local_ids = [index[n] for n in hole_pts] + list(range(base, base + len(ring)))
        verts = np.asarray(vertices)
        pts = verts[local_ids]
        dl = Delaunay(pts, qhull_options="Qbb Qc Qz Q12")
        simp = np.asarray(local_ids)[dl.simplices]
        hole_xy = np.array([[grid.xy[n] for n in tri] for tri in _cell_triangles(grid, removed)])
        cent = verts[simp].mean(axis=1)
        keep = _points_in_triangles(cent, hole_xy) & ~obs.inside(cent)
        simp = simp[keep]
        area = signed_areas(verts, simp)
        simp = simp[area > 1e-14 * d * d]
        simp = np.where((signed_areas(verts, simp) > 0)[:, None], simp, simp[:, [0, 2, 1]])
        tris.extend(map(tuple, simp.tolist()))

    vertices = np.asarray(vertices, dtype=float)
    elements = np.asarray(tris, dtype=np.int64)
    # drop unused vertices
    used_v = np.unique(elements)
    remap = -np.ones(len(vertices), dtype=np.int64)
    remap[used_v] = np.arange(len(used_v))
    vertices = vertices[used_v]
    flags = np.asarray(flags)[used_v]
    elements = remap[elements]

    if removed:
        # a missing or overlapping triangle in the re-meshed hole shows up as an area defect
        all_cells = [(i, j) for i in range(ni) for j in range(nj) if grid.cell_ok[i, j]]
        full = np.array([[grid.xy[n] for n in tri] for tri in _cell_triangles(grid, all_cells)])
        expected = _tri_area(full).sum() - _polygon_area(ring)
        got = signed_areas(vertices, elements).sum()
        if abs(got - expected) > 1e-9 * expected:
            raise _Retry("re-meshed hole does not tile the cut region")

    bedges, btags = _tag_boundary(elements, flags)
    return Mesh(vertices, elements, bedges, btags)


def _tri_area(tri_xy):
    d1 = tri_xy[:, 1] - tri_xy[:, 0]
    d2 = tri_xy[:, 2] - tri_xy[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _polygon_area(xy):
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _tag_boundary(elements, flags):
    bedges, btags = [], []
    for (i, j), owners in sorted(_edge_map(elements).items()):
        if len(owners) != 1:
            continue
        common = int(flags[i]) & int(flags[j])
        tag = next((t for t in _PRIORITY if common & _BIT[t]), None)
        if tag is None:
            raise _Retry(f"untagged boundary edge ({i}, {j})")
        a, b, c = elements[owners[0]]
        # orient like the owning (ccw) element
        edge = (i, j) if (a, b) == (i, j) or (b, c) == (i, j) or (c, a) == (i, j) else (j, i)
        bedges.append(edge)
        btags.append(tag)
    return np.asarray(bedges, dtype=np.int64), btags


class _Retry(Exception):
    pass


def generate_mesh(spec: GeometrySpec, h_max: float) -> Mesh:
    """Conforming mesh of ``spec`` whose longest element edge is at most ``h_max``."""
    if not h_max > 0:
        raise ConfigurationError("h_max must be positive")
    f = spec.transform.factor if spec.transform.kind == "Scale" else 1.0
    base = spec.base()
    h = h_max / f
    d = h / math.sqrt(2.0) * (1 - 1e-9)
    if d >= base.narrowest_channel:
        raise ConfigurationError(
            f"h_max={h_max} leaves fewer than 2 elements across the narrowest channel"
        )
    if base.obstacle is not None:
        _check_obstacle(base)
    for _ in range(12):
        try:
            mesh = _build(base, d)
            mesh.check_conformity()
        except (_Retry, AssertionError):
            d *= 0.85
            continue
        if mesh.h.max() <= h * (1 + 1e-12):
            return apply_transform(mesh, spec.transform)
        d *= 0.85
    raise ConfigurationError("mesh generation failed to satisfy h_max / conformity")


# ---------------------------------------------------------------------------
# text I/O


def write_mesh(mesh: Mesh, path: str | Path) -> None:
    lines = [f"vertices {mesh.n_vertices} elements {mesh.n_elements} boundary {len(mesh.boundary_edges)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.elements.tolist()]
    lines += [f"{i} {j} {t.value}" for (i, j), t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path: str | Path) -> Mesh:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    try:
        if head[0] != "vertices" or head[2] != "elements":
            raise MeshFormatError("bad mesh header")
        nv, ne = int(head[1]), int(head[3])
        nb = int(head[5]) if len(head) >= 6 else len(lines) - 1 - nv - ne
        body = lines[1:]
        verts = np.array([[float(t) for t in ln.split()] for ln in body[:nv]])
        elems = np.array([[int(t) for t in ln.split()] for ln in body[nv:nv + ne]])
        rows = [ln.split() for ln in body[nv + ne:nv + ne + nb]]
        edges = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64)
        tags = [BoundaryTag(r[2]) for r in rows]
    except (IndexError, ValueError) as exc:
        raise MeshFormatError(f"malformed mesh file: {exc}") from exc
    return Mesh(verts.reshape(-1, 2), elems.reshape(-1, 3), edges, tags)
