"""Dense tensor conventions and the factorization kernels everything else uses.

Values are plain numpy arrays: float32 storage, C order, rank 1 to 4.
Reductions and factorizations run in float64 internally (LAPACK via
numpy.linalg) and results carry a fixed sign convention so repeated runs
on identical input bytes produce identical output bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ShapeError, ValidationError

MAX_RANK = 4


def as_tensor(data, dims=None) -> np.ndarray:
    """Coerce to the canonical value carrier: float32, contiguous, rank 1-4.

    Raises ShapeError if `dims` is given and disagrees with the data size,
    or if the rank falls outside [1, 4].
    """
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise ShapeError(f"extents must be positive, got {dims}")
        if int(np.prod(dims)) != arr.size:
            raise ShapeError(f"dims {dims} need {int(np.prod(dims))} values, got {arr.size}")
        arr = arr.reshape(dims)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise ShapeError(f"rank must be between 1 and {MAX_RANK}, got {arr.ndim}")
    return arr


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Column k of `eigenvectors` pairs with `eigenvalues[k]`.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass(frozen=True)
class Svd:
    """Singular value decomposition A = u @ diag(s) @ vt, s descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, returned as float32."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return out.astype(np.float32)


def _fix_column_signs(v: np.ndarray) -> np.ndarray:
    """Flip columns so the first non-negligible component is nonnegative.

    Makes factorization output byte-comparable across runs and platforms
    where LAPACK is free to pick either sign.
    """
    flips = np.ones(v.shape[1])
    for k in range(v.shape[1]):
        col = v[:, k]
        amax = np.max(np.abs(col))
        if amax == 0.0:
            continue
        idx = int(np.argmax(np.abs(col) > 1e-9 * amax))
        if col[idx] < 0:
            flips[k] = -1.0
    return flips


def sym_eig(a: np.ndarray, sym_tol: float = 1e-6) -> SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    The input must be square and symmetric within `sym_tol` (relative,
    Frobenius). It is symmetrized exactly before factorization so the
    result is well defined for inputs that are symmetric only to float32
    roundoff.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig expects a square matrix, got {a.shape}")
    norm = np.linalg.norm(a)
    asym = np.linalg.norm(a - a.T)
    if asym > sym_tol * max(1.0, norm):
        raise ValidationError(
            f"matrix is not symmetric: ||A - A^T|| = {asym:.3e} vs tolerance "
            f"{sym_tol:.1e} * {max(1.0, norm):.3e}"
        )
    sym = 0.5 * (a + a.T)
    try:
        w, v = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK rarely fails
        raise NumericError(f"eigendecomposition did not converge: {exc}") from exc
    order = np.argsort(w)[::-1]
    w = w[order]
    v = v[:, order]
    v = v * _fix_column_signs(v)
    return SymEig(eigenvalues=w, eigenvectors=np.ascontiguousarray(v))


def svd(a: np.ndarray) -> Svd:
    """Full SVD with descending singular values and fixed signs.

    Signs are normalized on the right singular vectors (rows of vt); the
    matching left vectors are flipped with them so u @ diag(s) @ vt still
    reconstructs the input.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got rank {a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("svd input contains non-finite entries")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"svd did not converge: {exc}") from exc
    flips = _fix_column_signs(vt.T)
    vt = vt * flips[:, None]
    u = u * flips[None, :]
    return Svd(u=np.ascontiguousarray(u), s=s, vt=np.ascontiguousarray(vt))


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value, taken from the full SVD for determinism."""
    return float(svd(a).s[0])


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def relative_keep_mask(values: np.ndarray, epsilon: float) -> np.ndarray:
    """Boolean mask of entries with value/values[0] >= epsilon, and > 0.

    `values` must be sorted descending (singular values or eigenvalues).
    With epsilon = 0 this keeps exactly the strictly positive entries.
    The leading entry is kept whenever it is positive, for any epsilon < 1.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ShapeError("relative_keep_mask expects a nonempty vector")
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"relative cut must lie in [0, 1), got {epsilon}")
    top = values[0]
    if top <= 0.0:
        return np.zeros(values.size, dtype=bool)
    return (values > 0.0) & (values >= epsilon * top)


def pseudo_inverse_from_eig(eig: SymEig, kept: int) -> np.ndarray:
    """Moore-Penrose inverse restricted to the top `kept` eigenpairs."""
    if kept < 1:
        raise DomainError("pseudo-inverse needs at least one kept eigenvalue")
    v = eig.eigenvectors[:, :kept]
    inv = v @ np.diag(1.0 / eig.eigenvalues[:kept]) @ v.T
    return inv
