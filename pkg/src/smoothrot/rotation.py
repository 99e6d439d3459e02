"""Hadamard and general orthogonal transforms, plus equivalence machinery.

Activation/weight pairs are rewritten as ``x_hat = x @ A``,
``w_hat = A^-1 @ w`` so the layer output is preserved while the quantizer
sees the transformed activations. Transforms are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import numpy as np

from . import archive
from .numerics import ShapeError, Rng, matmul

__all__ = [
    "ORTHOGONALITY_TOL",
    "OrthogonalTransform",
    "hadamard_matrix",
    "walsh_hadamard",
    "random_hadamard",
    "load_transform",
    "apply_equivalent_transform",
]

ORTHOGONALITY_TOL = 1e-6
CONDITION_LIMIT = 1e8


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hadamard_matrix(n: int) -> np.ndarray:
    """Normalized Sylvester Hadamard matrix (H = H^T = H^-1), float32.

    Requires ``n`` to be a power of two.
    """
    if not _is_pow2(n):
        raise ValueError(f"Hadamard matrix size must be a power of two, got {n}")
    h = np.ones((1, 1), dtype=np.float64)
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return (h / np.sqrt(n)).astype(np.float32)


def _fwht64(rows: np.ndarray) -> np.ndarray:
    """Normalized fast Walsh-Hadamard transform over the last axis.

    ``rows`` must be float64 and owned by the caller (mutated in place when
    contiguous); length a power of two. Callers use the returned array.
    """
    rows = np.ascontiguousarray(rows)
    n = rows.shape[-1]
    h = 1
    while h < n:
        a = rows.reshape(-1, n // (2 * h), 2, h)
        top = a[:, :, 0, :] + a[:, :, 1, :]
        bot = a[:, :, 0, :] - a[:, :, 1, :]
        a[:, :, 0, :] = top
        a[:, :, 1, :] = bot
        h *= 2
    rows *= 1.0 / np.sqrt(n)
    return rows


def walsh_hadamard(x) -> np.ndarray:
    """Normalized fast Walsh-Hadamard transform applied per row, O(n log n).

    Equals right-multiplication by the explicit normalized Hadamard matrix.
    The row length must be a power of two; other sizes need an
    explicit-matrix transform instead.
    """
    arr = np.asarray(x)
    n = arr.shape[-1]
    if not _is_pow2(n):
        raise ValueError(
            f"fast Walsh-Hadamard needs a power-of-two length, got {n}; "
            "use an explicit-matrix transform for other sizes"
        )
    out = arr.astype(np.float64).copy()
    return _fwht64(out).astype(np.float32)


class OrthogonalTransform:
    """An orthogonal matrix with an optional fast application path.

    Kinds: ``exact-hadamard`` (normalized Sylvester matrix),
    ``random-hadamard`` (sign-flipped Hadamard, seed-deterministic), and
    ``explicit`` (user-supplied matrix, validated orthogonal within
    1e-6 infinity norm).
    """

    def __init__(self, kind: str, n: int, matrix: np.ndarray, signs: np.ndarray | None = None):
        self.kind = kind
        self.n = int(n)
        self.signs = signs
        self._matrix = matrix

    @classmethod
    def exact_hadamard(cls, n: int) -> "OrthogonalTransform":
        return cls("exact-hadamard", n, hadamard_matrix(n))

    @classmethod
    def random_hadamard(cls, n: int, rng: Rng) -> "OrthogonalTransform":
        """Sign-flipped normalized Hadamard ``diag(signs) @ H``.

        Orthogonal by construction and deterministic in the RNG seed; the
        sign flip keeps the O(n log n) application path.
        """
        if not _is_pow2(n):
            raise ValueError(f"random Hadamard size must be a power of two, got {n}")
        signs = rng.signs(n)
        matrix = hadamard_matrix(n) * signs[:, None]
        return cls("random-hadamard", n, matrix, signs=signs)

    @classmethod
    def explicit(cls, matrix) -> "OrthogonalTransform":
        m = np.asarray(matrix, dtype=np.float32)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"explicit transform must be square, got {m.shape}")
        gram = np.matmul(m.T.astype(np.float64), m.astype(np.float64))
        err = float(np.max(np.abs(gram - np.eye(m.shape[0]))))
        if err > ORTHOGONALITY_TOL:
            raise ValueError(
                f"explicit matrix is not orthogonal (max |Q^T Q - I| = {err:.3g})"
            )
        return cls("explicit", m.shape[0], m)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def apply(self, x) -> np.ndarray:
        """Right-multiply rows by the transform: ``x @ Q``."""
        arr = np.asarray(x)
        if arr.shape[-1] != self.n:
            raise ShapeError(f"transform of size {self.n} applied to rows of length {arr.shape[-1]}")
        if self.kind == "exact-hadamard":
            return walsh_hadamard(arr)
        if self.kind == "random-hadamard":
            # x @ diag(signs) @ H: scale columns, then fast transform.
            scaled = arr.astype(np.float64) * self.signs.astype(np.float64)
            return _fwht64(scaled).astype(np.float32)
        return matmul(arr.reshape(-1, self.n), self._matrix).reshape(arr.shape)

    def apply_inverse(self, x) -> np.ndarray:
        """Right-multiply rows by the transpose: ``x @ Q^T``."""
        arr = np.asarray(x)
        if arr.shape[-1] != self.n:
            raise ShapeError(f"transform of size {self.n} applied to rows of length {arr.shape[-1]}")
        if self.kind == "exact-hadamard":
            return walsh_hadamard(arr)
        if self.kind == "random-hadamard":
            # x @ H @ diag(signs): fast transform, then scale columns.
            out = _fwht64(arr.astype(np.float64).copy())
            return (out * self.signs.astype(np.float64)).astype(np.float32)
        return matmul(arr.reshape(-1, self.n), self._matrix.T).reshape(arr.shape)

    def __repr__(self) -> str:  # pragma: no cover
        return f"OrthogonalTransform(kind={self.kind!r}, n={self.n})"


def random_hadamard(n: int, rng: Rng) -> OrthogonalTransform:
    """Seed-deterministic random Hadamard transform (see the class method)."""
    return OrthogonalTransform.random_hadamard(n, rng)


def load_transform(path, entry: str = "Q") -> OrthogonalTransform:
    """Load a user-supplied orthogonal matrix from a tensor archive."""
    tensors = archive.load_archive(path)
    if entry not in tensors:
        raise archive.ArchiveError(f"{path}: no entry named {entry!r}")
    return OrthogonalTransform.explicit(tensors[entry])


def apply_equivalent_transform(x, w, a) -> tuple[np.ndarray, np.ndarray]:
    """Rewrite ``y = x @ w`` as ``(x @ A) @ (A^-1 @ w)`` with output preserved.

    Args:
        x: Activations ``[tokens, c_in]``.
        w: Weights ``[c_in, c_out]``.
        a: An :class:`OrthogonalTransform`, a 1-D positive scaling vector
            ``s`` (meaning ``A = diag(s)^-1``, i.e. activations divided and
            weight rows multiplied channel-wise), or a 2-D invertible
            matrix used explicitly.

    Returns:
        ``(x_hat, w_hat)`` float32 arrays.
    """
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"expected x [m,k] and w [k,n] with matching k, got {x.shape} and {w.shape}"
        )
    if isinstance(a, OrthogonalTransform):
        if a.n != x.shape[1]:
            raise ShapeError(f"transform size {a.n} does not match {x.shape[1]} channels")
        x_hat = a.apply(x)
        # A^-1 = Q^T for orthogonal transforms, and Q^T w = (w^T Q)^T.
        w_hat = a.apply(np.ascontiguousarray(w.T)).T
        return x_hat, np.ascontiguousarray(w_hat)
    a = np.asarray(a)
    if a.ndim == 1:
        s = a.astype(np.float64)
        if s.shape[0] != x.shape[1]:
            raise ShapeError(f"scaling length {s.shape[0]} does not match {x.shape[1]} channels")
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("scaling factors must be positive and finite")
        x_hat = (x.astype(np.float64) / s[None, :]).astype(np.float32)
        w_hat = (w.astype(np.float64) * s[:, None]).astype(np.float32)
        return x_hat, w_hat
    if a.ndim == 2:
        if a.shape[0] != a.shape[1] or a.shape[0] != x.shape[1]:
            raise ShapeError(f"matrix shape {a.shape} does not match {x.shape[1]} channels")
        a64 = a.astype(np.float64)
        cond = float(np.linalg.cond(a64))
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            raise ValueError(
                f"transform matrix is singular or ill-conditioned (cond estimate {cond:.3g})"
            )
        inv = np.linalg.inv(a64)
        x_hat = np.matmul(x.astype(np.float64), a64).astype(np.float32)
        w_hat = np.matmul(inv, w.astype(np.float64)).astype(np.float32)
        return x_hat, w_hat
    raise ShapeError(f"unsupported transform operand with ndim {a.ndim}")
