"""Global matrix assembly for the dynamic-Laplacian eigenproblem.

Two discretizations of the stiffness matrix are provided:

* the CG method evaluates the averaged inverse-Cauchy-Green diffusion
  tensor at element quadrature points and assembles
  K = -integral A grad(phi_j) . grad(phi_i);
* the TO method pushes the nodal basis forward through the map, builds
  a Delaunay mesh on the node images, and averages the plain Laplacian
  stiffness of the two meshes.  It needs only point evaluations of the
  map and its parameter derivative, no Jacobians.

Assembling with the derivative tensor in place of A yields the
response matrix L = dK/d_eps used by the linear-response solve.

Element loops are vectorized; the scatter into the global sparse
matrix uses integer-indexed duplicate summation, so assembly is
deterministic and safe to reproduce bit-for-bit.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp

from .dynamics import DynamicsModel
from .mesh import MeshError, QuadRule, TriMesh, delaunay_mesh

# Condition-number cap for the Cauchy-Green tensor before the
# coefficient field is declared singular at a quadrature point.
COND_LIMIT = 1e12


class AssemblyError(RuntimeError):
    """Coefficient-field or image-mesh failure during assembly."""


# -- coefficient fields ------------------------------------------------


def diffusion_from_jacobian(jac: np.ndarray, where: str = "") -> np.ndarray:
    """Diffusion tensor (I + (DT^T DT)^{-1}) / 2 from Jacobian batch."""
    jac = np.asarray(jac, dtype=float)
    single = jac.ndim == 2
    if single:
        jac = jac[None]
    cg = np.einsum("nji,njk->nik", jac, jac)  # DT^T DT, SPD
    inv = _inv_2x2_spd(cg, where)
    out = 0.5 * (np.eye(2)[None] + inv)
    return out[0] if single else out


def diffusion_rate_from_jacobians(jac: np.ndarray, jac_dot: np.ndarray, where: str = "") -> np.ndarray:
    """Parameter derivative of the diffusion tensor.

    -sym(DT^{-1} dDT DT^{-1} DT^{-T}) with sym(Q) = (Q + Q^T)/2.
    """
    jac = np.asarray(jac, dtype=float)
    jac_dot = np.asarray(jac_dot, dtype=float)
    single = jac.ndim == 2
    if single:
        jac, jac_dot = jac[None], jac_dot[None]
    inv = _inv_2x2(jac, where)
    q = np.einsum("nij,njk,nkl,nml->nim", inv, jac_dot, inv, inv)
    out = -0.5 * (q + np.transpose(q, (0, 2, 1)))
    return out[0] if single else out


def diffusion_tensor(model: DynamicsModel) -> Callable[[np.ndarray], np.ndarray]:
    """Coefficient field x -> (I + (DT(x)^T DT(x))^{-1}) / 2."""

    def field(pts: np.ndarray) -> np.ndarray:
        return diffusion_from_jacobian(model.jacobian(pts))

    return field


def diffusion_tensor_rate(model: DynamicsModel) -> Callable[[np.ndarray], np.ndarray]:
    """Coefficient field for the parameter derivative of the diffusion tensor."""

    def field(pts: np.ndarray) -> np.ndarray:
        return diffusion_rate_from_jacobians(model.jacobian(pts), model.jacobian_dot(pts))

    return field


def _inv_2x2(mats: np.ndarray, where: str = "") -> np.ndarray:
    det = mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
    if np.any(np.abs(det) < 1e-300) or not np.all(np.isfinite(det)):
        bad = int(np.argmin(np.abs(det)))
        raise AssemblyError(f"singular Jacobian at point {bad}{where} (det={det[bad]:.3e})")
    inv = np.empty_like(mats)
    inv[:, 0, 0] = mats[:, 1, 1]
    inv[:, 1, 1] = mats[:, 0, 0]
    inv[:, 0, 1] = -mats[:, 0, 1]
    inv[:, 1, 0] = -mats[:, 1, 0]
    inv /= det[:, None, None]
    return inv


def _inv_2x2_spd(mats: np.ndarray, where: str = "") -> np.ndarray:
    tr = mats[:, 0, 0] + mats[:, 1, 1]
    det = mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
    disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
    lo = 0.5 * (tr - disc)
    hi = 0.5 * (tr + disc)
    bad = (lo <= 0) | (hi > COND_LIMIT * lo)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise AssemblyError(
            f"Cauchy-Green tensor ill-conditioned at point {i}{where}: "
            f"eigenvalues ({lo[i]:.3e}, {hi[i]:.3e})"
        )
    return _inv_2x2(mats, where)


# -- global assembly ---------------------------------------------------


def _scatter(mesh_tris: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    rows = mesh_tris[:, [0, 0, 0, 1, 1, 1, 2, 2, 2]].ravel()
    cols = mesh_tris[:, [0, 1, 2, 0, 1, 2, 0, 1, 2]].ravel()
    mat = sp.coo_matrix((local.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()
    # The element blocks are symmetric analytically; symmetrizing removes
    # summation-order roundoff so downstream symmetry checks are exact.
    return (0.5 * (mat + mat.T)).tocsr()


def assemble_mass(mesh: TriMesh) -> sp.csr_matrix:
    """P1 mass matrix, exact per-element closed form."""
    base = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    local = mesh.areas()[:, None, None] * base[None]
    return _scatter(mesh.triangles, local, mesh.n_nodes)


def assemble_stiffness(
    mesh: TriMesh,
    field: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    rule: QuadRule,
) -> sp.csr_matrix:
    """CG stiffness K = -integral field grad(phi_j) . grad(phi_i).

    ``field`` maps points (n, 2) to symmetric tensors (n, 2, 2), or is
    a precomputed (T, Q, 2, 2) array matching the rule (one ODE batch
    can then feed both this matrix and the response matrix).
    """
    t = mesh.n_triangles
    q = rule.weights.shape[0]
    if callable(field):
        pts = mesh.quad_points(rule).reshape(t * q, 2)
        try:
            vals = np.asarray(field(pts), dtype=float)
        except AssemblyError as exc:
            raise AssemblyError(f"coefficient field failed: {exc}") from exc
        vals = vals.reshape(t, q, 2, 2)
    else:
        vals = np.asarray(field, dtype=float)
        if vals.shape != (t, q, 2, 2):
            raise AssemblyError(
                f"precomputed field has shape {vals.shape}, expected {(t, q, 2, 2)}"
            )
    avg = np.einsum("q,tqab->tab", rule.weights, vals)
    local = -np.einsum("t,tia,tab,tjb->tij", mesh.areas(), mesh.grads(), avg, mesh.grads())
    return _scatter(mesh.triangles, local, mesh.n_nodes)


def laplace_stiffness(mesh: TriMesh) -> sp.csr_matrix:
    """Plain (positive-semidefinite) P1 Laplacian stiffness matrix."""
    local = np.einsum("t,tia,tja->tij", mesh.areas(), mesh.grads(), mesh.grads())
    return _scatter(mesh.triangles, local, mesh.n_nodes)


def assemble_transfer_operator(
    mesh: TriMesh, model: DynamicsModel
) -> tuple[sp.csr_matrix, sp.csr_matrix, TriMesh]:
    """TO-method stiffness and response matrices.

    Builds the adaptive image mesh by Delaunay triangulation of the
    node images (torus-aware).  With distinct image points the
    pushforward of the nodal basis is represented by the identity
    matrix; image points that coincide within triangulation precision
    are merged and their basis functions push forward onto the shared
    image node (a 0/1 representation matrix).  Returns

    * K = -(K0 + K1)/2 with K0, K1 the plain Laplacian stiffness on
      the original and image meshes (K1 pulled back through the
      representation);
    * L assembled on the image mesh from the per-element velocity
      gradient G_e = sum_s dT(x_s) (x) grad(phi_s^1):
      L_e[j, k] = area_e (sym(G_e) grad(phi_j^1)) . grad(phi_k^1);
    * the (merged) image mesh itself.
    """
    images, node_dot = model.evaluate_map_and_dot(mesh.nodes)
    image_mesh, labels = _triangulate_images(images, mesh.periods)

    n = mesh.n_nodes
    n_im = image_mesh.n_nodes
    if n_im == n:
        rep = None
        w_im = node_dot
    else:
        # Pushforward representation: each merged cluster shares one
        # image node; the column weights keep the partition of unity
        # (so constants stay in the stiffness kernel).
        counts = np.bincount(labels, minlength=n_im).astype(float)
        rep = sp.csr_matrix(
            (1.0 / counts[labels], (np.arange(n), labels)), shape=(n, n_im)
        )
        w_sums = np.zeros((n_im, 2))
        np.add.at(w_sums, labels, node_dot)
        w_im = w_sums / counts[:, None]

    k0 = laplace_stiffness(mesh)
    k1 = laplace_stiffness(image_mesh)
    if rep is not None:
        k1 = (rep @ k1 @ rep.T).tocsr()
    stiffness = (-0.5 * (k0 + k1)).tocsr()

    grads = image_mesh.grads()  # (T,3,2)
    w = w_im[image_mesh.triangles]  # (T,3,2) node velocities per element
    g = np.einsum("tsa,tsb->tab", w, grads)
    gsym = 0.5 * (g + np.transpose(g, (0, 2, 1)))
    local = np.einsum("t,tja,tab,tkb->tjk", image_mesh.areas(), grads, gsym, grads)
    response = _scatter(image_mesh.triangles, local, n_im)
    if rep is not None:
        response = (rep @ response @ rep.T).tocsr()
        response = (0.5 * (response + response.T)).tocsr()
    return stiffness, response, image_mesh


def _triangulate_images(
    images: np.ndarray, periods: tuple[float, float] | None
) -> tuple[TriMesh, np.ndarray]:
    """Image mesh plus the original-node -> image-node label map.

    Near-coincident image points (for example where a flow compresses
    boundary nodes toward a stagnation corner) are merged before
    triangulation; the merge tolerance grows from triangulation
    precision until Qhull accepts every point.
    """
    scale = max(np.ptp(images[:, 0]), np.ptp(images[:, 1]), 1e-300)
    tol = 1e-7 * scale
    for _ in range(4):
        merged, labels = _merge_clusters(images, tol, periods)
        try:
            image_mesh = delaunay_mesh(merged, torus_periods=periods)
        except MeshError as exc:
            if "duplicate" in str(exc) or "merged" in str(exc) or "collapsed" in str(exc):
                tol *= 10.0
                continue
            raise AssemblyError(f"image-mesh triangulation failed: {exc}") from exc
        return image_mesh, labels
    raise AssemblyError(
        f"image points could not be separated at merge tolerance {tol:.3e}; "
        "the map collapses too many nodes"
    )


def _merge_clusters(
    points: np.ndarray, tol: float, periods: tuple[float, float] | None
) -> tuple[np.ndarray, np.ndarray]:
    from scipy.sparse.csgraph import connected_components
    from scipy.spatial import cKDTree

    n = points.shape[0]
    if periods is not None:
        base = np.mod(points, np.asarray(periods))
        offs = [
            (ox * periods[0], oy * periods[1])
            for ox in (-1, 0, 1)
            for oy in (-1, 0, 1)
        ]
        tiled = np.vstack([base + np.array(o) for o in offs])
        pairs = cKDTree(tiled).query_pairs(tol, output_type="ndarray")
        pairs = np.unique(np.sort(pairs % n, axis=1), axis=0)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        pts = base
    else:
        pts = points
        pairs = cKDTree(pts).query_pairs(tol, output_type="ndarray")
    if pairs.shape[0] == 0:
        return pts.copy(), np.arange(n)
    graph = sp.coo_matrix(
        (np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    n_comp, comp = connected_components(graph, directed=False)
    sums = np.zeros((n_comp, 2))
    counts = np.zeros(n_comp)
    np.add.at(sums, comp, pts)
    np.add.at(counts, comp, 1.0)
    return sums / counts[:, None], comp


# -- Dirichlet reduction ------------------------------------------------


def free_nodes(mesh: TriMesh) -> np.ndarray:
    """Indices of nodes kept in a Dirichlet-reduced system."""
    mask = np.ones(mesh.n_nodes, dtype=bool)
    mask[mesh.boundary_nodes] = False
    return np.where(mask)[0]


def reduce_matrix(mat: sp.spmatrix, free: np.ndarray) -> sp.csr_matrix:
    """Delete constrained rows and columns (preserves symmetry)."""
    return mat.tocsr()[free][:, free]


def expand_vector(vec: np.ndarray, free: np.ndarray, n: int) -> np.ndarray:
    """Embed a reduced coefficient vector with zeros on the boundary."""
    out = np.zeros(n, dtype=float)
    out[free] = vec
    return out


def matrix_coo_rows(mat: sp.spmatrix) -> np.ndarray:
    """(nnz, 3) array of (row, col, value) for coordinate-format dumps."""
    coo = mat.tocoo()
    order = np.lexsort((coo.col, coo.row))
    return np.column_stack([coo.row[order], coo.col[order], coo.data[order]])
