"""Generalized symmetric eigenproblem K u = lambda M u.

The pencil has nonpositive spectrum; the eigenpairs of interest are the
algebraically largest ones (closest to zero).  Large problems use
ARPACK shift-invert with a small positive shift, which keeps the
factorized matrix nonsingular despite the constant-function kernel of
Neumann and torus problems.  Small problems fall back to a dense solve.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# Shift keeping K - sigma M nonsingular despite the constant kernel.
SIGMA = 1e-6
# Below this size a dense solve is cheaper and has no convergence risk.
DENSE_LIMIT = 2000
RESIDUAL_TOL = 1e-8
GAP_WARN_REL = 1e-6


class EigenSolveError(RuntimeError):
    """Factorization failure or non-convergence of the eigensolver."""


@dataclass(frozen=True)
class EigenPair:
    """Eigenvalue with its M-normalized coefficient vector.

    Sign convention: the entry of largest magnitude is positive.
    """

    lam: float
    u: np.ndarray


def eigs(K: sp.spmatrix, M: sp.spmatrix, k: int) -> list[EigenPair]:
    """The k algebraically largest eigenpairs of (K, M), descending.

    Eigenvectors are returned M-normalized with the sign convention
    applied; a warning is issued when the gap between the second and
    third eigenvalue is too small for linear-response theory (which
    assumes simple eigenvalues).
    """
    n = K.shape[0]
    if not 1 <= k <= n:
        raise EigenSolveError(f"requested k={k} eigenpairs of an {n}x{n} pencil")

    if n <= DENSE_LIMIT or k > n - 2:
        vals, vecs = scipy.linalg.eigh(_dense(K), _dense(M))
        vals, vecs = vals[::-1][:k], vecs[:, ::-1][:, :k]
    else:
        # Deterministic start vector so repeated runs are reproducible.
        v0 = np.random.RandomState(0).uniform(-1.0, 1.0, n)
        try:
            vals, vecs = spla.eigsh(
                K.tocsc(),
                k=k,
                M=M.tocsc(),
                sigma=SIGMA,
                which="LM",
                v0=v0,
                tol=1e-10,
                maxiter=max(10 * k, 50),
            )
        except spla.ArpackNoConvergence as exc:
            raise EigenSolveError(
                f"eigensolver did not converge: {exc} "
                f"(converged eigenvalues: {getattr(exc, 'eigenvalues', [])})"
            ) from exc
        except RuntimeError as exc:
            raise EigenSolveError(f"shift-invert factorization failed: {exc}") from exc
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]

    pairs = []
    knorm = spla.norm(K) if sp.issparse(K) else np.linalg.norm(K)
    for lam, u in zip(vals, vecs.T):
        u = u / np.sqrt(u @ (M @ u))
        imax = int(np.argmax(np.abs(u)))
        if u[imax] < 0:
            u = -u
        res = np.linalg.norm(K @ u - lam * (M @ u))
        ref = max(np.linalg.norm(K @ u), knorm * 1e-3)
        if res > RESIDUAL_TOL * ref:
            raise EigenSolveError(
                f"eigenpair residual {res:.3e} exceeds {RESIDUAL_TOL:.0e} * {ref:.3e} "
                f"for eigenvalue {lam:.6g}"
            )
        pairs.append(EigenPair(lam=float(lam), u=u))

    if len(pairs) >= 3:
        gap = abs(pairs[1].lam - pairs[2].lam)
        if gap < GAP_WARN_REL * abs(pairs[1].lam):
            warnings.warn(
                f"near-degenerate leading eigenvalues ({pairs[1].lam:.6g}, "
                f"{pairs[2].lam:.6g}); linear response assumes simple eigenvalues",
                stacklevel=2,
            )
    return pairs


def align_sign(u: np.ndarray, reference: np.ndarray, M: sp.spmatrix) -> np.ndarray:
    """Flip u so its M-inner product with the reference is nonnegative."""
    overlap = float(u @ (M @ reference))
    if overlap == 0.0:
        warnings.warn("sign alignment is ambiguous (M-orthogonal vectors)", stacklevel=2)
        return u
    return u if overlap > 0 else -u


def _dense(mat) -> np.ndarray:
    return mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)
