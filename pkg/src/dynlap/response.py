"""Linear response of eigenpairs: the bordered-system solve.

Differentiating K(eps) u = lambda(eps) M u at eps = 0 and appending the
M-orthogonality constraint u0^T M du = 0 gives one nonsingular linear
system for the eigenvector derivative du and eigenvalue derivative
dlambda simultaneously:

    [ K - lambda M   -M u0 ] [ du      ]   [ -L u0 ]
    [   u0^T M         0   ] [ dlambda ] = [   0   ]

with L = dK/d_eps.  The solve commits to this matrix-level convention;
the finite-difference validator arbitrates signs end to end.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .spectral import EigenPair, align_sign

RESIDUAL_TOL = 1e-8


class ResponseError(RuntimeError):
    """Bordered system singular (non-simple eigenvalue) or solve failure."""


@dataclass(frozen=True)
class ResponsePair:
    """Eigenvector derivative and eigenvalue derivative at eps = 0."""

    u_dot: np.ndarray
    lam_dot: float


@dataclass(frozen=True)
class FDCheck:
    """One central-difference comparison row from validate_fd."""

    eps: float
    lam_dot_fd: float
    lam_dot_abs_err: float
    lam_dot_rel_err: float
    u_dot_err_m: float


def solve_response(
    K: sp.spmatrix,
    M: sp.spmatrix,
    L: sp.spmatrix,
    pair: EigenPair,
    deflate: Sequence[np.ndarray] = (),
) -> ResponsePair:
    """Solve the bordered system for (du, dlambda).

    ``deflate`` takes the eigenvectors of any eigenvalues numerically
    coinciding with the target one (for instance symmetry-induced
    pairs).  Each adds a constraint w^T M du = 0 and a matching border
    column, which removes the singular directions of K - lambda M while
    leaving the solution unchanged when the perturbation respects the
    degeneracy.
    """
    n = K.shape[0]
    u0 = pair.u
    basis = np.column_stack([u0, *deflate]) if deflate else u0[:, None]
    mb = M @ basis
    bordered = sp.bmat(
        [
            [K - pair.lam * M, -mb],
            [mb.T, None],
        ],
        format="csc",
    )
    m = basis.shape[1]
    rhs = np.concatenate([-(L @ u0), np.zeros(m)])
    try:
        solution = spla.splu(bordered).solve(rhs)
    except RuntimeError as exc:
        raise ResponseError(
            f"bordered solve failed (non-simple eigenvalue?): {exc}"
        ) from exc
    if not np.all(np.isfinite(solution)):
        raise ResponseError("bordered solve produced non-finite values")

    u_dot = solution[:n]
    lam_dot = float(solution[n])
    residual = np.linalg.norm(bordered @ solution - rhs)
    scale = max(np.linalg.norm(rhs), spla.norm(K) * np.linalg.norm(u0))
    if residual > RESIDUAL_TOL * max(scale, 1.0):
        raise ResponseError(
            f"bordered residual {residual:.3e} too large relative to {scale:.3e}; "
            "the eigenvalue may not be simple"
        )
    return ResponsePair(u_dot=u_dot, lam_dot=lam_dot)


def predict(pair: EigenPair, resp: ResponsePair, eps: float) -> tuple[np.ndarray, float]:
    """First-order extrapolation (u0 + eps du, lambda0 + eps dlambda).

    The extrapolated vector is not re-normalized.
    """
    return pair.u + eps * resp.u_dot, pair.lam + eps * resp.lam_dot


def m_norm(v: np.ndarray, M: sp.spmatrix) -> float:
    """Discrete L2 norm sqrt(v^T M v)."""
    return float(np.sqrt(max(v @ (M @ v), 0.0)))


def track_eigenpair(
    pairs: Sequence[EigenPair],
    reference: EigenPair,
    M: sp.spmatrix,
    cluster_rel: float = 1e-6,
) -> EigenPair:
    """Pick the perturbed eigenpair continuing the reference one.

    Eigenvalue order can swap under perturbation, so the match
    maximizes the M-overlap with the reference eigenvector.  If the
    matched eigenvalue sits in a numerically degenerate cluster, the
    returned vector is the M-normalized projection of the reference
    onto the cluster's eigenspace (any vector in it is an eigenvector
    to the same accuracy, and the projection is the unique continuous
    continuation).  The result is sign-aligned to the reference.
    """
    mu_ref = M @ reference.u
    overlaps = [abs(p.u @ mu_ref) for p in pairs]
    best = int(np.argmax(overlaps))
    lam = pairs[best].lam
    cluster = [p for p in pairs if abs(p.lam - lam) <= cluster_rel * max(abs(lam), 1e-300)]
    if len(cluster) > 1:
        basis = np.column_stack([p.u for p in cluster])
        proj = basis @ (basis.T @ mu_ref)
        norm = m_norm(proj, M)
        if norm > 0.5:
            return EigenPair(lam=lam, u=align_sign(proj / norm, reference.u, M))
    if overlaps[best] < 0.5:
        raise ResponseError(
            f"eigenvalue tracking failed: best overlap {overlaps[best]:.3f} < 0.5 "
            "(the followed eigenvalue may have crossed another)"
        )
    chosen = pairs[best]
    return EigenPair(lam=chosen.lam, u=align_sign(chosen.u, reference.u, M))


def validate_fd(
    solve_at: Callable[[float], Sequence[EigenPair]],
    pair: EigenPair,
    resp: ResponsePair,
    M: sp.spmatrix,
    eps_list: Sequence[float],
) -> list[FDCheck]:
    """Central-difference check of the response against re-solves.

    ``solve_at(eps)`` re-runs the full pipeline (assembly + eigensolve)
    at the perturbed parameter and returns candidate eigenpairs; the
    followed eigenpair is matched by M-overlap and sign-aligned before
    differencing.  Rows are ordered as given; both error columns should
    shrink with eps until discretization noise dominates.
    """
    rows = []
    for eps in eps_list:
        plus = track_eigenpair(solve_at(eps), pair, M)
        minus = track_eigenpair(solve_at(-eps), pair, M)
        lam_fd = (plus.lam - minus.lam) / (2.0 * eps)
        u_fd = (plus.u - minus.u) / (2.0 * eps)
        abs_err = abs(resp.lam_dot - lam_fd)
        rows.append(
            FDCheck(
                eps=float(eps),
                lam_dot_fd=lam_fd,
                lam_dot_abs_err=abs_err,
                lam_dot_rel_err=abs_err / max(abs(lam_fd), 1e-300),
                u_dot_err_m=m_norm(resp.u_dot - u_fd, M),
            )
        )
    return rows
