"""Dense real-matrix kernel.

Matrices are plain 2-D ``numpy.float64`` arrays. Everything public here
validates shape and finiteness on the way in and never mutates its inputs.
The singular value decomposition is a one-sided Jacobi method; the rotation
sweeps run in a compiled extension when it is importable and fall back to a
vectorised numpy version otherwise (set ``CONTILORA_PURE_PYTHON=1`` to force
the fallback).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConvergenceError, DimensionError, NonFiniteError, UndefinedInputError

if os.environ.get("CONTILORA_PURE_PYTHON"):
    from ._jacobi_py import jacobi_rotate as _jacobi_rotate

    BACKEND = "python"
else:
    try:
        from ._jacobi import jacobi_rotate as _jacobi_rotate

        BACKEND = "compiled"
    except ImportError:  # extension not built
        from ._jacobi_py import jacobi_rotate as _jacobi_rotate

        BACKEND = "python"

MAX_SWEEPS = 200
OFF_DIAGONAL_TOL = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite, non-empty 2-D float64 array (copying)."""
    m = np.array(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")
    check_finite(m, name)
    return m


def check_finite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return m


def _same_shape(x: np.ndarray, y: np.ndarray, op: str) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{op}: shapes {x.shape} and {y.shape} differ")


# -- dense arithmetic ------------------------------------------------------


def product(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"product: shapes {a.shape} and {b.shape} are not aligned")
    return check_finite(a @ b, "product")


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def add(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    _same_shape(a, b, "add")
    return check_finite(a + b, "sum")


def scale(a, c: float) -> np.ndarray:
    return check_finite(as_matrix(a) * float(c), "scaled matrix")


def elementwise(a, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    out = np.asarray(fn(as_matrix(a)), dtype=np.float64)
    return check_finite(out, "elementwise result")


def frobenius_inner(x, y) -> float:
    x, y = as_matrix(x, "x"), as_matrix(y, "y")
    _same_shape(x, y, "frobenius_inner")
    return float(np.einsum("ij,ij->", x, y))


def cosine_similarity_flat(x, y) -> float:
    """Cosine of the angle between the flattened matrices."""
    x, y = as_matrix(x, "x"), as_matrix(y, "y")
    _same_shape(x, y, "cosine_similarity_flat")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise UndefinedInputError("cosine similarity is undefined for a zero matrix")
    c = float(np.einsum("ij,ij->", x, y) / (nx * ny))
    return min(1.0, max(-1.0, c))


# -- singular value decomposition -----------------------------------------


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def _complete_columns(u: np.ndarray, null: np.ndarray) -> None:
    """Replace the columns flagged in ``null`` by an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, i] for i in np.flatnonzero(~null)]
    candidates = iter(range(m))
    for col in np.flatnonzero(null):
        while True:
            e = np.zeros(m)
            e[next(candidates)] = 1.0
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-3:
                break
        u[:, col] = e / norm
        basis.append(u[:, col])


def svd(m) -> SvdResult:
    """Thin SVD ``m = u @ diag(s) @ vt`` with ``k = min(rows, cols)``.

    Singular values come back sorted non-increasing. The sign of each
    singular pair is fixed so the first nonzero entry of every left
    singular vector is positive.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    flipped = rows < cols
    # power-of-two rescale keeps squared norms in range without rounding
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    scale = float(np.ldexp(1.0, np.frexp(peak)[1])) if peak > 0.0 and np.isfinite(peak) else 1.0
    # kernel rows are the columns being orthogonalised
    g = np.ascontiguousarray((a if flipped else a.T) / scale)
    n = g.shape[0]
    j = np.eye(n)
    sweeps, off = _jacobi_rotate(g, j, OFF_DIAGONAL_TOL, MAX_SWEEPS)
    if sweeps < 0:
        raise ConvergenceError(
            f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (off-diagonal {off:.3e})",
            residual=off,
        )
    sigma = np.sqrt(np.einsum("ij,ij->i", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    left = g[order].T.copy()  # columns of the orthogonalised matrix
    right = j[order]
    null = sigma <= np.finfo(float).tiny
    left[:, ~null] /= sigma[~null]
    sigma[null] = 0.0
    sigma *= scale
    if null.any():
        _complete_columns(left, null)
    if flipped:
        u, vt = right.T.copy(), left.T.copy()
    else:
        u, vt = left, right.copy()
    for i in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, i]) > 1e-14)
        if nz.size and u[nz[0], i] < 0:
            u[:, i] *= -1.0
            vt[i] *= -1.0
    return SvdResult(u=u, singular_values=sigma, vt=vt)


def truncated_factorize(m, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced rank-``r`` factors ``b = U sqrt(S_r)``, ``a = sqrt(S_r) Vt``.

    ``b @ a`` is the best rank-``r`` approximation of ``m`` in Frobenius norm.
    """
    res = svd(m)
    return factors_from_svd(res, r)


def factors_from_svd(res: SvdResult, r: int) -> tuple[np.ndarray, np.ndarray]:
    k = res.singular_values.size
    if not 1 <= r <= k:
        raise DimensionError(f"rank {r} out of range 1..{k} for a {res.u.shape[0]}x{res.vt.shape[1]} matrix")
    root = np.sqrt(res.singular_values[:r])
    return res.u[:, :r] * root, root[:, None] * res.vt[:r]


def energy_proportion(singular_values: Sequence[float], r: int) -> float:
    """Share of squared singular values captured by the leading ``r``."""
    s = np.asarray(singular_values, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DimensionError("singular values must be a non-empty 1-D sequence")
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise UndefinedInputError("singular values must be non-negative and non-increasing")
    if r < 1:
        raise DimensionError(f"rank must be positive, got {r}")
    energy = s * s
    total = energy.sum()
    if total == 0.0:
        raise UndefinedInputError("energy proportion is undefined for an all-zero spectrum")
    return float(min(1.0, energy[:r].sum() / total))


# -- binary layout ----------------------------------------------------------

_HEADER = struct.Struct("<QQ")


def to_bytes(m) -> bytes:
    a = as_matrix(m)
    return _HEADER.pack(*a.shape) + a.astype("<f8").tobytes(order="C")


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise DimensionError("buffer too short for a matrix header")
    rows, cols = _HEADER.unpack_from(buf)
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise DimensionError(f"matrix payload is {len(buf)} bytes, expected {expected} for {rows}x{cols}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return as_matrix(data.reshape(rows, cols))


def write_matrix(path, m) -> None:
    Path(path).write_bytes(to_bytes(m))


def read_matrix(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
