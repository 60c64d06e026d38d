"""Dense matrix primitives used by the merge solver.

All routines work on 2-D float64 numpy arrays.  The singular value
thresholding operator follows the convention

    svt(A, mu) = U diag((s - mu)+) V^T

which is the exact minimizer of ``||X - A||_F^2 + 2 mu ||X||_*``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

# Matrices whose smaller side is at most this size always take the dense path.
DENSE_PATH_MAX_MIN_DIM = 256


class SvdError(ArithmeticError):
    """Raised when the SVD iteration fails to converge."""


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def as_matrix(m, name: str | None = None) -> np.ndarray:
    """Return ``m`` as a finite, C-contiguous float64 matrix."""
    a = np.ascontiguousarray(m, dtype=np.float64)
    label = f" {name!r}" if name else ""
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError(f"expected a non-empty 2-D matrix{label}, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"matrix{label} contains non-finite entries")
    return a


def rank_cap(shape: tuple[int, int], fraction: float) -> int:
    """Hard rank limit ``ceil(fraction * min(shape))``, at least 1.

    A small slack keeps products such as ``0.2 * 35`` (which is
    ``7.000000000000001`` in binary) from rounding up to the next integer.
    """
    k = min(shape)
    return max(1, min(k, math.ceil(fraction * k - 1e-9)))


def svd(m, name: str | None = None) -> SvdResult:
    """Thin SVD with singular values sorted in descending order."""
    a = as_matrix(m, name)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails where the slower QR-iteration driver succeeds
        try:
            u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            label = f"{name!r} " if name else ""
            raise SvdError(
                f"SVD did not converge for matrix {label}of size {a.shape[0]}x{a.shape[1]}"
            ) from exc
    return SvdResult(u=u, singular_values=s, vt=vt)


def singular_values(m, name: str | None = None) -> np.ndarray:
    a = as_matrix(m, name)
    try:
        return np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError:
        return svd(a, name).singular_values


def _top_spectrum_gram(a: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, bool]:
    # Top-k eigenpairs of the smaller Gram matrix; returns (s, vecs, wide)
    wide = a.shape[0] < a.shape[1]
    g = a @ a.T if wide else a.T @ a
    n = g.shape[0]
    w, vecs = scipy.linalg.eigh(g, subset_by_index=[n - k, n - 1], driver="evr")
    w, vecs = w[::-1], vecs[:, ::-1]
    return np.sqrt(np.clip(w, 0.0, None)), vecs, wide


def shrink(m, mu: float, max_rank: int | None = None, name: str | None = None):
    """Soft-threshold the spectrum of ``m`` by ``mu``, optionally keeping only
    the ``max_rank`` largest shrunk singular values.

    Returns ``(matrix, kept_values)`` where ``kept_values`` are the singular
    values of the returned matrix (descending, zeros included).  With a rank
    cap the result is the exact minimizer of ``||X - m||_F^2 + 2 mu ||X||_*``
    over matrices of rank at most ``max_rank``.

    For large matrices (smaller side above ``DENSE_PATH_MAX_MIN_DIM``) and a
    cap of at most half the full rank, only the leading eigenpairs of the
    Gram matrix are computed.  Both paths are deterministic.
    """
    if mu < 0:
        raise ValueError(f"threshold must be non-negative, got {mu}")
    a = as_matrix(m, name)
    k = min(a.shape)
    if max_rank is not None:
        if max_rank < 1:
            raise ValueError(f"max_rank must be positive, got {max_rank}")
        max_rank = min(max_rank, k)

    if max_rank is not None and k > DENSE_PATH_MAX_MIN_DIM and max_rank <= k // 2:
        s, vecs, wide = _top_spectrum_gram(a, max_rank)
        kept = np.maximum(s - mu, 0.0)
        nz = int(np.count_nonzero(kept))
        # contiguous copy: the reversed eigh output would miss the BLAS path
        vecs = np.ascontiguousarray(vecs[:, :nz])
        weights = kept[:nz] / s[:nz]
        if wide:
            out = (vecs * weights) @ (vecs.T @ a)
        else:
            out = ((a @ vecs) * weights) @ vecs.T
        return out, kept

    res = svd(a, name)
    kept = np.maximum(res.singular_values - mu, 0.0)
    if max_rank is not None:
        kept[max_rank:] = 0.0
    nz = int(np.count_nonzero(kept))
    out = (res.u[:, :nz] * kept[:nz]) @ res.vt[:nz]
    return out, kept


def svt(m, mu: float) -> np.ndarray:
    """Singular value thresholding ``U diag((s - mu)+) V^T``."""
    return shrink(m, mu)[0]


def truncate_rank(m, r: int) -> np.ndarray:
    """Best rank-``r`` approximation in Frobenius norm (Eckart-Young)."""
    if r < 1:
        raise ValueError(f"rank must be positive, got {r}")
    res = svd(m)
    r = min(r, res.singular_values.size)
    return (res.u[:, :r] * res.singular_values[:r]) @ res.vt[:r]


def frobenius_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def nuclear_norm(m) -> float:
    return float(np.sum(singular_values(m)))
