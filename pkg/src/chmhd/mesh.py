"""Structured triangulations of axis-aligned rectangles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIDES = ("Bottom", "Top", "Left", "Right")


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise MeshError(f"degenerate rectangle {self}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


UNIT_SQUARE = Rect(0.0, 1.0, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh.

    ``boundary_edges`` is an ``(nb, 2)`` array of node pairs and
    ``boundary_tags`` the matching side names.
    """

    rect: Rect
    nx: int
    ny: int
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray = field(repr=False)
    boundary_tags: tuple = field(repr=False)
    h: float = 0.0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def cell_size(self) -> float:
        """Grid spacing along x, the ``h`` quoted in error tables."""
        return (self.rect.x1 - self.rect.x0) / self.nx

    @property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def side_nodes(self, side: str) -> np.ndarray:
        mask = np.array([t == side for t in self.boundary_tags], dtype=bool)
        return np.unique(self.boundary_edges[mask])

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted node pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (triangle index, barycentric coords) for each point.

        Uses the grid structure: the cell is found by index arithmetic and
        the triangle by which side of the diagonal the point falls on.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = self.rect
        dx = (r.x1 - r.x0) / self.nx
        dy = (r.y1 - r.y0) / self.ny
        sx = (pts[:, 0] - r.x0) / dx
        sy = (pts[:, 1] - r.y0) / dy
        tol = 1e-12
        outside = (sx < -tol) | (sx > self.nx + tol) | (sy < -tol) | (sy > self.ny + tol)
        if np.any(outside):
            bad = pts[np.argmax(outside)]
            raise MeshError(f"point {tuple(bad)} lies outside the mesh")
        i = np.clip(np.floor(sx).astype(int), 0, self.nx - 1)
        j = np.clip(np.floor(sy).astype(int), 0, self.ny - 1)
        fx = sx - i
        fy = sy - j
        upper = fy > fx
        tri = 2 * (j * self.nx + i) + upper.astype(int)
        p = self.nodes[self.triangles[tri]]
        lam = barycentric(p, pts)
        return tri, lam


def barycentric(verts: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ``pts[k]`` in triangle ``verts[k]``."""
    a, b, c = verts[:, 0], verts[:, 1], verts[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    l2 = ((pts[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (pts[:, 1] - a[:, 1])) / det
    l3 = ((b[:, 0] - a[:, 0]) * (pts[:, 1] - a[:, 1]) - (pts[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])) / det
    return np.column_stack([1.0 - l2 - l3, l2, l3])


def dissection_order(mesh: Mesh, leaf: int = 16) -> np.ndarray:
    """Nested dissection permutation of the nodes.

    A full grid line separates the two sides of a structured mesh, so
    each level splits the longer index range at its middle line and
    numbers the line after both halves.
    """
    idx = np.arange(mesh.n_nodes)
    gi, gj = idx % (mesh.nx + 1), idx // (mesh.nx + 1)
    out = []
    stack = [(idx, False)]
    while stack:
        ids, emit = stack.pop()
        if emit or len(ids) <= leaf:
            out.append(ids)
            continue
        I, J = gi[ids], gj[ids]
        ax = I if np.ptp(I) >= np.ptp(J) else J
        mid = (ax.min() + ax.max()) // 2
        # popped in reverse: low half, high half, then the separator
        stack += [(ids[ax == mid], True), (ids[ax > mid], False), (ids[ax < mid], False)]
    return np.concatenate(out)


def build_mesh(rect: Rect, nx: int, ny: int) -> Mesh:
    """Uniform ``nx`` by ``ny`` grid, each cell cut along its
    lower-left to upper-right diagonal."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError(f"nx and ny must be positive integers, got {nx}, {ny}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(rect.x0, rect.x1, nx + 1)
    ys = np.linspace(rect.y0, rect.y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    a = (jj * (nx + 1) + ii).ravel()
    b = a + 1
    c = a + nx + 2
    d = a + nx + 1
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([a, b, c])
    tris[1::2] = np.column_stack([a, c, d])

    h = float(np.hypot((rect.x1 - rect.x0) / nx, (rect.y1 - rect.y0) / ny))
    edges, tags = _boundary_edges(tris, nodes, rect, h)
    return Mesh(rect, nx, ny, nodes, tris, edges, tags, h)


def _boundary_edges(tris, nodes, rect, h):
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(e, axis=1)
    uniq, counts = np.unique(key, axis=0, return_counts=True)
    bnd = uniq[counts == 1]
    return bnd, classify_edges(bnd, nodes, rect, h)


def classify_edges(edges: np.ndarray, nodes: np.ndarray, rect: Rect, h: float) -> tuple:
    tol = 1e-12 * h
    tags = []
    for n0, n1 in edges:
        p, q = nodes[n0], nodes[n1]
        if abs(p[1] - rect.y0) <= tol and abs(q[1] - rect.y0) <= tol:
            tags.append("Bottom")
        elif abs(p[1] - rect.y1) <= tol and abs(q[1] - rect.y1) <= tol:
            tags.append("Top")
        elif abs(p[0] - rect.x0) <= tol and abs(q[0] - rect.x0) <= tol:
            tags.append("Left")
        elif abs(p[0] - rect.x1) <= tol and abs(q[0] - rect.x1) <= tol:
            tags.append("Right")
        else:
            raise MeshError(f"boundary edge ({n0}, {n1}) lies on no side of {rect}")
    return tuple(tags)


def classify_boundary(mesh: Mesh) -> list[tuple[int, int, str]]:
    """Tag each boundary edge with the rectangle side it lies on."""
    tags = classify_edges(mesh.boundary_edges, mesh.nodes, mesh.rect, mesh.h)
    return [(int(a), int(b), t) for (a, b), t in zip(mesh.boundary_edges, tags)]
