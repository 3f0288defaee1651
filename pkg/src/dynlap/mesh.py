"""Triangle meshes on planar rectangles and flat 2-tori.

Meshes are immutable after construction: all derived geometry (element
areas, P1 shape-function gradients, quadrature points) is precomputed
and safe to read concurrently.

Torus meshes keep one canonical node per equivalence class.  Elements
that straddle a periodic seam store their vertex coordinates in a
consistent local chart (``tri_coords``), so per-element geometry never
has to guess how to unwrap.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, cKDTree


class MeshError(ValueError):
    """Invalid mesh construction input or degenerate geometry."""


class BoundaryCondition:
    """Boundary-condition kinds for the eigenproblem."""

    NEUMANN = "neumann"
    DIRICHLET = "dirichlet"

    @staticmethod
    def validate(kind: str, mesh: "TriMesh") -> str:
        kind = kind.lower()
        if kind not in (BoundaryCondition.NEUMANN, BoundaryCondition.DIRICHLET):
            raise MeshError(f"unknown boundary condition {kind!r}")
        if kind == BoundaryCondition.DIRICHLET and len(mesh.boundary_nodes) == 0:
            raise MeshError(
                "Dirichlet conditions require a mesh with boundary nodes "
                "(torus meshes have none)"
            )
        return kind


# Duplicate-point tolerance and degeneracy threshold (relative to the
# bounding-box area) used by the Delaunay constructors.
DUPLICATE_TOL = 1e-12
DEGENERATE_AREA_REL = 1e-14


@dataclass(frozen=True)
class QuadRule:
    """Symmetric quadrature rule on the reference triangle.

    ``points`` are barycentric coordinates, ``weights`` sum to one and
    are relative to the reference-triangle area: the integral of f over
    a physical element is ``area * sum(w_q * f(x_q))``.
    """

    degree: int
    points: np.ndarray  # (Q, 3) barycentric
    weights: np.ndarray  # (Q,)


def gauss_rule(degree: int) -> QuadRule:
    """Return a triangle Gauss rule exact for polynomials of ``degree``.

    Degrees 1, 2 and 5 are tabulated (1-, 3- and 7-point symmetric
    rules).  Other degrees up to 5 are rounded up to the next tabulated
    rule with a warning; degrees above 5 are an error.
    """
    if degree < 1:
        raise MeshError(f"quadrature degree must be >= 1, got {degree}")
    if degree > 5:
        raise MeshError(f"quadrature degree {degree} not supported (max 5)")
    if degree not in (1, 2, 5):
        warnings.warn(
            f"no degree-{degree} rule tabulated; using the degree-5 rule",
            stacklevel=2,
        )
        degree = 5

    if degree == 1:
        pts = np.array([[1 / 3, 1 / 3, 1 / 3]])
        wts = np.array([1.0])
    elif degree == 2:
        pts = np.array(
            [
                [2 / 3, 1 / 6, 1 / 6],
                [1 / 6, 2 / 3, 1 / 6],
                [1 / 6, 1 / 6, 2 / 3],
            ]
        )
        wts = np.full(3, 1 / 3)
    else:
        # 7-point degree-5 rule: centroid plus two symmetric orbits.
        s = np.sqrt(15.0)
        a1 = (6.0 - s) / 21.0
        a2 = (6.0 + s) / 21.0
        w1 = (155.0 - s) / 1200.0
        w2 = (155.0 + s) / 1200.0
        pts = np.array(
            [
                [1 / 3, 1 / 3, 1 / 3],
                [1 - 2 * a1, a1, a1],
                [a1, 1 - 2 * a1, a1],
                [a1, a1, 1 - 2 * a1],
                [1 - 2 * a2, a2, a2],
                [a2, 1 - 2 * a2, a2],
                [a2, a2, 1 - 2 * a2],
            ]
        )
        wts = np.array([9 / 40, w1, w1, w1, w2, w2, w2])
    return QuadRule(degree=degree, points=pts, weights=wts)


@dataclass(frozen=True)
class TriMesh:
    """Triangulation of a rectangle [0,Lx]x[0,Ly] or a flat torus.

    Attributes
    ----------
    nodes : (N, 2) float array of canonical node coordinates.
    triangles : (T, 3) int array, counterclockwise vertex indices.
    extents : (Lx, Ly) domain extents (torus periods when periodic).
    periods : equals ``extents`` for a torus, None otherwise.
    boundary_nodes : sorted int array of nodes on the boundary
        (empty for a torus).
    tri_coords : (T, 3, 2) per-element vertex coordinates in a
        consistent local chart; differs from ``nodes[triangles]`` only
        for torus elements straddling a seam.
    periodic_map : ghost-index -> canonical-index array used during
        construction of periodic meshes (None for planar meshes).
    """

    nodes: np.ndarray
    triangles: np.ndarray
    extents: tuple[float, float]
    periods: tuple[float, float] | None = None
    boundary_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    tri_coords: np.ndarray | None = None
    periodic_map: np.ndarray | None = None

    def __post_init__(self):
        coords = self.element_coords()
        areas = _signed_areas(coords)
        if np.any(areas <= 0):
            bad = int(np.argmin(areas))
            raise MeshError(
                f"triangle {bad} has non-positive area {areas[bad]:.3e}"
            )
        object.__setattr__(self, "_areas", areas)
        e1 = coords[:, 1] - coords[:, 0]
        e2 = coords[:, 2] - coords[:, 0]
        # grad(phi_i) = perp(p_{i+2} - p_{i+1}) / (2 area), perp = rot90 ccw
        grads = np.empty((len(areas), 3, 2))
        for i in range(3):
            edge = coords[:, (i + 2) % 3] - coords[:, (i + 1) % 3]
            grads[:, i, 0] = -edge[:, 1]
            grads[:, i, 1] = edge[:, 0]
        grads /= (2.0 * areas)[:, None, None]
        object.__setattr__(self, "_grads", grads)

    # -- basic queries ---------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def is_torus(self) -> bool:
        return self.periods is not None

    @property
    def domain_area(self) -> float:
        return float(self.extents[0] * self.extents[1])

    def element_coords(self) -> np.ndarray:
        """(T, 3, 2) unwrapped vertex coordinates of every element."""
        if self.tri_coords is not None:
            return self.tri_coords
        return self.nodes[self.triangles]

    def areas(self) -> np.ndarray:
        """(T,) element areas."""
        return self._areas

    def grads(self) -> np.ndarray:
        """(T, 3, 2) constant P1 shape-function gradients per element."""
        return self._grads

    def fold(self, points: np.ndarray) -> np.ndarray:
        """Reduce points into the fundamental domain (identity if planar)."""
        if self.periods is None:
            return np.asarray(points, dtype=float)
        return np.mod(points, np.asarray(self.periods))

    def quad_points(self, rule: QuadRule) -> np.ndarray:
        """(T, Q, 2) physical quadrature points (element-chart coords)."""
        coords = self.element_coords()  # (T,3,2)
        return np.einsum("qv,tvx->tqx", rule.points, coords)

    def mesh_width(self) -> float:
        """Longest element edge; the resolution scale of the mesh."""
        coords = self.element_coords()
        edges = coords - np.roll(coords, 1, axis=1)
        return float(np.sqrt((edges**2).sum(axis=2)).max())


def element_geometry(mesh: TriMesh, t: int) -> tuple[float, np.ndarray]:
    """Area and the three constant P1 basis gradients of element ``t``.

    Torus elements are evaluated in their stored local chart, so seam
    elements behave exactly like their unwrapped copies.
    """
    if not 0 <= t < mesh.n_triangles:
        raise MeshError(f"element index {t} out of range")
    area = float(mesh.areas()[t])
    bbox_area = mesh.extents[0] * mesh.extents[1]
    if area < DEGENERATE_AREA_REL * bbox_area:
        raise MeshError(f"element {t} is degenerate (area {area:.3e})")
    return area, mesh.grads()[t]


def _signed_areas(coords: np.ndarray) -> np.ndarray:
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def grid_mesh(
    nx: int,
    ny: int,
    extents: tuple[float, float],
    periodic: bool = False,
) -> TriMesh:
    """Regular grid mesh with each cell split along a fixed diagonal.

    The fixed split is a valid Delaunay triangulation of a regular grid
    and keeps generated meshes deterministic.  ``periodic=True`` yields
    a torus with nx*ny canonical nodes; otherwise a rectangle with
    (nx+1)(ny+1) nodes and marked boundary.
    """
    if nx < 2 or ny < 2:
        raise MeshError(f"grid mesh needs nx, ny >= 2, got {nx}x{ny}")
    lx, ly = float(extents[0]), float(extents[1])
    if lx <= 0 or ly <= 0:
        raise MeshError(f"extents must be positive, got ({lx}, {ly})")

    dx, dy = lx / nx, ly / ny
    gx, gy = nx + 1, ny + 1
    ii, jj = np.meshgrid(np.arange(gx), np.arange(gy), indexing="xy")
    ghost_nodes = np.column_stack([(ii * dx).ravel(), (jj * dy).ravel()])

    def gid(i, j):
        return j * gx + i

    cells_i, cells_j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ci, cj = cells_i.ravel(), cells_j.ravel()
    lower = np.column_stack([gid(ci, cj), gid(ci + 1, cj), gid(ci + 1, cj + 1)])
    upper = np.column_stack([gid(ci, cj), gid(ci + 1, cj + 1), gid(ci, cj + 1)])
    ghost_tris = np.vstack([lower, upper])

    if not periodic:
        boundary = np.where(
            (ii.ravel() == 0) | (ii.ravel() == nx) | (jj.ravel() == 0) | (jj.ravel() == ny)
        )[0]
        return TriMesh(
            nodes=ghost_nodes,
            triangles=ghost_tris,
            extents=(lx, ly),
            boundary_nodes=np.sort(boundary),
        )

    # Torus: fold the ghost grid onto nx*ny canonical nodes but retain
    # the ghost coordinates as each element's local chart.
    fold = ((jj.ravel() % ny) * nx + (ii.ravel() % nx)).astype(int)
    canon = np.column_stack(
        [
            (np.arange(nx * ny) % nx) * dx,
            (np.arange(nx * ny) // nx) * dy,
        ]
    )
    tri_coords = ghost_nodes[ghost_tris]
    return TriMesh(
        nodes=canon,
        triangles=fold[ghost_tris],
        extents=(lx, ly),
        periods=(lx, ly),
        tri_coords=tri_coords,
        periodic_map=fold,
    )


def delaunay_mesh(
    points: np.ndarray,
    torus_periods: tuple[float, float] | None = None,
) -> TriMesh:
    """Delaunay-triangulate scattered points, planar or on a flat torus.

    Torus mode reduces the points modulo the periods, triangulates a
    3x3 tiling of periodic ghost copies, keeps the triangles whose
    centroid lies in the fundamental domain and folds ghost indices
    back to canonical ones.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise MeshError("need at least 3 two-dimensional points")

    if torus_periods is not None:
        return _delaunay_torus(pts, torus_periods)

    _check_duplicates(pts)
    try:
        tri = Delaunay(pts)
    except Exception as exc:  # QhullError on collinear input
        raise MeshError(f"Delaunay triangulation failed: {exc}") from exc
    if tri.simplices.shape[0] == 0 or len(tri.coplanar):
        raise MeshError("Delaunay triangulation failed (collinear or merged points)")
    triangles = _orient_ccw(pts, tri.simplices)
    hull = np.unique(tri.convex_hull)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    return TriMesh(
        nodes=pts,
        triangles=triangles,
        extents=(float(hi[0] - lo[0]), float(hi[1] - lo[1])),
        boundary_nodes=np.sort(hull),
    )


def _delaunay_torus(pts: np.ndarray, periods: tuple[float, float]) -> TriMesh:
    lx, ly = float(periods[0]), float(periods[1])
    if lx <= 0 or ly <= 0:
        raise MeshError(f"torus periods must be positive, got ({lx}, {ly})")
    base = np.mod(pts, [lx, ly])
    n = base.shape[0]
    _check_duplicates(base)

    offsets = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]
    ghosts = np.vstack([base + np.array([ox * lx, oy * ly]) for ox, oy in offsets])
    try:
        tri = Delaunay(ghosts)
    except Exception as exc:
        raise MeshError(f"torus Delaunay triangulation failed: {exc}") from exc

    centroids = ghosts[tri.simplices].mean(axis=1)
    keep = (
        (centroids[:, 0] >= 0)
        & (centroids[:, 0] < lx)
        & (centroids[:, 1] >= 0)
        & (centroids[:, 1] < ly)
    )
    ghost_tris = _orient_ccw(ghosts, tri.simplices[keep])
    fold = np.arange(ghosts.shape[0]) % n
    folded = fold[ghost_tris]
    if np.unique(folded).size != n:
        raise MeshError("torus triangulation dropped input points (collapsed images?)")
    return TriMesh(
        nodes=base,
        triangles=folded,
        extents=(lx, ly),
        periods=(lx, ly),
        tri_coords=ghosts[ghost_tris],
        periodic_map=fold,
    )


def _check_duplicates(pts: np.ndarray) -> None:
    pairs = cKDTree(pts).query_pairs(DUPLICATE_TOL)
    if pairs:
        i, j = next(iter(pairs))
        raise MeshError(f"duplicate points within {DUPLICATE_TOL:g}: nodes {i} and {j}")


def _orient_ccw(pts: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    tris = np.array(simplices, dtype=int)
    areas = _signed_areas(pts[tris])
    flip = areas < 0
    tris[flip, 1], tris[flip, 2] = tris[flip, 2], tris[flip, 1].copy()
    return tris
