"""Coherent-set post-processing of eigenvectors.

Level sets of the leading nontrivial eigenvector are extracted by
marching triangles, scored by the dynamic Cheeger value (mean of
interface length and its image length over the smaller side area), and
the optimal level is found by a line search.  The level-set velocity
field describes how the coherent-set boundary moves to first order in
the perturbation parameter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicsModel
from .mesh import TriMesh

# Deterministic nudge applied to vertex values that hit the level
# exactly, removing zero-measure degeneracies.
VERTEX_HIT_NUDGE = 1e-14
DEFAULT_SUBDIVISIONS = 8
DEFAULT_GRID_SIZE = 100


class LevelSetError(ValueError):
    """Degenerate field or level for the requested operation."""


@dataclass(frozen=True)
class LevelSetCurve:
    """Polyline {u = c} with its Cheeger ingredients.

    ``segments`` is (S, 2, 2): per segment two endpoints in element
    chart coordinates (torus seam elements are unwrapped, so endpoints
    can be just outside the fundamental domain).  ``areas`` holds the
    side areas (u < c, u > c); ``image_length`` is the length of the
    mapped curve with per-segment subdivision.
    """

    c: float
    segments: np.ndarray
    elements: np.ndarray
    length: float
    image_length: float
    areas: tuple[float, float]

    @property
    def is_empty(self) -> bool:
        return self.segments.shape[0] == 0


@dataclass(frozen=True)
class LevelVelocityField:
    """Nodal level-set velocity with a mask of flat-gradient nodes."""

    vectors: np.ndarray
    masked: np.ndarray
    gradient: np.ndarray


def extract_level_set(
    mesh: TriMesh,
    u: np.ndarray,
    c: float,
    model: DynamicsModel | None = None,
    subdivisions: int = DEFAULT_SUBDIVISIONS,
) -> LevelSetCurve:
    """Marching-triangles extraction of the level set {u = c}.

    Each element crossed by the level contributes one segment from
    linear interpolation along its crossing edges; side areas come from
    exact polygonal clipping of each triangle against the level line.
    A level outside the value range yields an empty curve.  When a
    ``model`` is given, the image length maps each segment through it
    with per-segment subdivision.
    """
    vals = np.asarray(u, dtype=float)
    if vals.shape != (mesh.n_nodes,):
        raise LevelSetError(
            f"field has shape {vals.shape}, expected ({mesh.n_nodes},)"
        )
    spread = float(vals.max() - vals.min())
    if spread == 0.0:
        raise LevelSetError("degenerate field: u is constant")
    vals = vals.copy()
    vals[vals == c] += VERTEX_HIT_NUDGE * spread

    tri_vals = vals[mesh.triangles]  # (T, 3)
    coords = mesh.element_coords()  # (T, 3, 2)
    areas = mesh.areas()
    below = tri_vals < c
    nbelow = below.sum(axis=1)

    area_lt = float(areas[nbelow == 3].sum())
    area_gt = float(areas[nbelow == 0].sum())

    mixed = np.where((nbelow == 1) | (nbelow == 2))[0]
    if mixed.size == 0:
        return LevelSetCurve(
            c=float(c),
            segments=np.empty((0, 2, 2)),
            elements=np.empty(0, dtype=int),
            length=0.0,
            image_length=0.0,
            areas=(area_lt, area_gt),
        )

    # The lone vertex sits alone on its side of the level; the crossing
    # points lie on its two incident edges.
    lone_below = nbelow[mixed] == 1
    lone = np.where(
        lone_below,
        np.argmax(below[mixed], axis=1),
        np.argmax(~below[mixed], axis=1),
    )
    idx = mixed
    v_a = tri_vals[idx, lone]
    v_b = tri_vals[idx, (lone + 1) % 3]
    v_c = tri_vals[idx, (lone + 2) % 3]
    p_a = coords[idx, lone]
    p_b = coords[idx, (lone + 1) % 3]
    p_c = coords[idx, (lone + 2) % 3]

    t_ab = (c - v_a) / (v_b - v_a)
    t_ac = (c - v_a) / (v_c - v_a)
    q_ab = p_a + t_ab[:, None] * (p_b - p_a)
    q_ac = p_a + t_ac[:, None] * (p_c - p_a)
    segments = np.stack([q_ab, q_ac], axis=1)
    seg_len = np.linalg.norm(q_ab - q_ac, axis=1)

    apex_area = areas[idx] * t_ab * t_ac
    area_lt += float(np.where(lone_below, apex_area, areas[idx] - apex_area).sum())
    area_gt += float(np.where(lone_below, areas[idx] - apex_area, apex_area).sum())

    image_length = float(seg_len.sum())
    if model is not None:
        image_length = _mapped_length(segments, model, subdivisions)

    return LevelSetCurve(
        c=float(c),
        segments=segments,
        elements=idx,
        length=float(seg_len.sum()),
        image_length=image_length,
        areas=(area_lt, area_gt),
    )


def _mapped_length(segments: np.ndarray, model: DynamicsModel, subdivisions: int) -> float:
    """Length of the mapped curve, each segment subdivided before mapping.

    Maps are evaluated on the universal cover (no folding), so
    consecutive image points stay close and distances are the torus
    metric automatically.
    """
    s = np.linspace(0.0, 1.0, subdivisions + 1)
    p0 = segments[:, 0][:, None, :]
    p1 = segments[:, 1][:, None, :]
    chain = p0 + s[None, :, None] * (p1 - p0)  # (S, sub+1, 2)
    flat = chain.reshape(-1, 2)
    mapped = model.map(flat).reshape(chain.shape)
    diffs = np.diff(mapped, axis=1)
    return float(np.sqrt((diffs**2).sum(axis=2)).sum())


def cheeger_value(curve: LevelSetCurve) -> float:
    """Dynamic Cheeger value: mean of the two interface lengths over
    the smaller side area."""
    smaller = min(curve.areas)
    if curve.is_empty:
        raise LevelSetError(f"level c={curve.c} does not intersect the field")
    if smaller <= 0.0:
        raise LevelSetError(f"level c={curve.c} leaves an empty side")
    return 0.5 * (curve.length + curve.image_length) / smaller


def line_search_c(
    mesh: TriMesh,
    u: np.ndarray,
    model: DynamicsModel,
    grid_size: int = DEFAULT_GRID_SIZE,
    full_range: bool = False,
    subdivisions: int = DEFAULT_SUBDIVISIONS,
) -> tuple[float, float]:
    """Grid line search for the level minimizing the Cheeger value.

    The search runs over (0, max u) by default; ``full_range=True``
    extends it to (min u, max u).  Degenerate levels (empty curve or an
    empty side) are skipped.
    """
    vals = np.asarray(u, dtype=float)
    lo = float(vals.min()) if full_range else 0.0
    hi = float(vals.max())
    if hi <= lo:
        raise LevelSetError("level search range is empty; check the field's sign")
    levels = lo + (hi - lo) * np.arange(1, grid_size + 1) / (grid_size + 1)

    best: tuple[float, float] | None = None
    for c in levels:
        curve = extract_level_set(mesh, vals, float(c), model=model, subdivisions=subdivisions)
        if curve.is_empty or min(curve.areas) <= 0.0:
            continue
        h = cheeger_value(curve)
        if best is None or h < best[1]:
            best = (float(c), h)
    if best is None:
        raise LevelSetError("all candidate levels were degenerate")
    return best


def nodal_gradient(mesh: TriMesh, u: np.ndarray) -> np.ndarray:
    """Recover nodal gradients by area-weighted element averaging."""
    vals = np.asarray(u, dtype=float)
    elem_grad = np.einsum("ti,tix->tx", vals[mesh.triangles], mesh.grads())
    weighted = mesh.areas()[:, None] * elem_grad
    num = np.zeros((mesh.n_nodes, 2))
    den = np.zeros(mesh.n_nodes)
    for v in range(3):
        np.add.at(num, mesh.triangles[:, v], weighted)
        np.add.at(den, mesh.triangles[:, v], mesh.areas())
    return num / den[:, None]


def level_velocity(
    mesh: TriMesh,
    u0: np.ndarray,
    u_dot: np.ndarray,
    grad_floor: float | None = None,
) -> LevelVelocityField:
    """Instantaneous normal velocity of the level sets of u0.

    The field moves each level set with the speed from the level-set
    equation du + s |grad u| = 0, directed along the gradient:
    v = -du * grad(u0) / |grad(u0)|^2.  Nodes where |grad(u0)| falls
    below the floor (default 1e-3 of its maximum) are masked to zero,
    since the velocity is singular at critical points of u0.
    """
    u0 = np.asarray(u0, dtype=float)
    du = np.asarray(u_dot, dtype=float)
    if u0.shape != du.shape or u0.shape != (mesh.n_nodes,):
        raise LevelSetError(
            f"mismatched field lengths {u0.shape} vs {du.shape} on {mesh.n_nodes} nodes"
        )
    grad = nodal_gradient(mesh, u0)
    gmag2 = (grad**2).sum(axis=1)
    gmag = np.sqrt(gmag2)
    floor = 1e-3 * float(gmag.max()) if grad_floor is None else float(grad_floor)
    masked = gmag < floor
    vectors = np.zeros_like(grad)
    ok = ~masked
    vectors[ok] = -du[ok, None] * grad[ok] / gmag2[ok, None]
    return LevelVelocityField(vectors=vectors, masked=masked, gradient=grad)


def curve_mean_distance(
    a: LevelSetCurve, b: LevelSetCurve, periods: tuple[float, float] | None = None
) -> float:
    """Mean distance from samples of curve a to the nearest sample of b.

    Segments are sampled at endpoints and midpoints; distances use the
    minimal-image convention on a torus.  Used to compare predicted and
    re-solved coherent-set boundaries.
    """
    pa = _curve_samples(a)
    pb = _curve_samples(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise LevelSetError("cannot compare empty curves")
    per = None if periods is None else np.asarray(periods, dtype=float)
    if per is not None:
        pa = np.mod(pa, per)
        pb = np.mod(pb, per)
    total = 0.0
    for chunk in np.array_split(pa, max(1, pa.shape[0] // 512)):
        d = chunk[:, None, :] - pb[None, :, :]
        if per is not None:
            d -= per * np.round(d / per)
        total += np.sqrt((d**2).sum(axis=2)).min(axis=1).sum()
    return total / pa.shape[0]


def _curve_samples(curve: LevelSetCurve) -> np.ndarray:
    if curve.is_empty:
        return np.empty((0, 2))
    mid = curve.segments.mean(axis=1)
    return np.vstack([curve.segments[:, 0], curve.segments[:, 1], mid])
