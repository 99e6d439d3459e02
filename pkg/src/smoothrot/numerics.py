"""Dense float32 tensors, deterministic RNG, and reproducible matrix algebra.

Tensors are plain ``numpy.ndarray`` values: row-major, float32, with tokens
on the leading axis and channels on the trailing axis for activations.
Weights follow the layout stated by each consumer. All tensors are treated
as immutable values once handed to another module; RNG instances are
single-owner (parallel work splits by seed, never by sharing a generator).
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "ShapeError",
    "Rng",
    "as_tensor",
    "require_finite",
    "matmul",
    "rel_inf_error",
]


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


def require_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Reject NaN/Inf values; subnormals and zeros are fine."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce to a C-contiguous float32 array, validating finiteness.

    Args:
        data: Anything ``np.asarray`` accepts.
        shape: Optional shape to reshape into (must match element count).
    """
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        expected = int(np.prod(shape))
        if arr.size != expected:
            raise ShapeError(
                f"data length {arr.size} does not match shape {tuple(shape)}"
            )
        arr = arr.reshape(shape)
    require_finite(arr, "tensor")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with float64 accumulation, rounded once to float32.

    Products of float32 inputs are exact in float64, so the result equals a
    sequential triple-loop reference with a float64 accumulator; summation
    order differences stay far below the final float32 rounding step, which
    keeps results reproducible bit-for-bit on a given platform.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul shape mismatch: {a.shape} @ {b.shape} "
            f"(inner dimensions {a.shape[1]} != {b.shape[0]})"
        )
    out = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return out.astype(np.float32)


def rel_inf_error(value: np.ndarray, reference: np.ndarray) -> float:
    """Relative infinity-norm error ``max|value - reference| / max|reference|``."""
    ref = np.asarray(reference, dtype=np.float64)
    diff = np.asarray(value, dtype=np.float64) - ref
    denom = float(np.max(np.abs(ref)))
    if denom == 0.0:
        return float(np.max(np.abs(diff)))
    return float(np.max(np.abs(diff)) / denom)


def _mix_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(
        f"{seed}:{label}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic random stream backed by NumPy's PCG64.

    The same 64-bit seed yields the same stream on every platform and
    thread count. Derived streams (:meth:`derive`) are independent and
    stable in the seed/label pair, so parallel work can split by label.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, label: str) -> "Rng":
        """Independent child stream, deterministic in (seed, label)."""
        return Rng(_mix_seed(self.seed, label))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(np.float32)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(np.float32)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def signs(self, n: int) -> np.ndarray:
        """Uniform ±1 vector of length ``n`` as float32."""
        return (self._gen.integers(0, 2, size=n) * 2 - 1).astype(np.float32)

    def choice(self, n: int, size: int, replace: bool = False, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, algorithm={self.algorithm!r})"
