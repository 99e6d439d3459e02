"""Integer quantization core: step sizes, zero points, and fake quantization.

Codes are signed for the symmetric scheme (``[-(2^(b-1)-1), 2^(b-1)-1]``,
zero point 0, step ``clip * max|x| / (2^(b-1)-1)``) and unsigned for the
asymmetric scheme (``[0, 2^b-1]``). The clip ratio shrinks the calibration
range before the step size is computed; values beyond it saturate.
Rounding is half-to-even throughout. All operations are pure functions and
safe to call concurrently on distinct inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import archive
from .numerics import require_finite

__all__ = [
    "QuantSpec",
    "QuantParams",
    "QuantizedTensor",
    "compute_qparams",
    "quantize",
    "dequantize",
    "quantize_tensor",
    "fake_quant",
    "save_quantized",
    "load_quantized",
]

_SCHEMES = ("symmetric", "asymmetric")
_GRANULARITIES = ("per-tensor", "per-token", "per-channel", "per-group")


@dataclass(frozen=True)
class QuantSpec:
    """Full configuration of one quantization site.

    Attributes:
        bits: Bit width, 2..8.
        scheme: "symmetric" (signed codes, zero point 0) or "asymmetric".
        granularity: "per-tensor", "per-token" (params per leading-axis row),
            "per-channel" (params per output row of a weight), or
            "per-group" (contiguous groups along the trailing channel axis).
        group_size: Group length, required for per-group; must divide the
            channel axis length of any tensor quantized with this spec.
        clip_ratio: Multiplicative shrink of the calibration range, in (0, 1].
    """

    bits: int
    scheme: str = "symmetric"
    granularity: str = "per-tensor"
    group_size: int | None = None
    clip_ratio: float = 1.0

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.granularity not in _GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == "per-group":
            if self.group_size is None or self.group_size < 1:
                raise ValueError("per-group granularity requires a positive group_size")
        elif self.group_size is not None:
            raise ValueError("group_size is only valid with per-group granularity")
        if not 0.0 < self.clip_ratio <= 1.0:
            raise ValueError(f"clip_ratio must be in (0, 1], got {self.clip_ratio}")

    @property
    def code_min(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.scheme == "symmetric" else 0

    @property
    def code_max(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.scheme == "symmetric" else 2**self.bits - 1


@dataclass(frozen=True)
class QuantParams:
    """Step size and zero point for a single quantization group."""

    delta: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass
class QuantizedTensor:
    """Integer codes plus the per-group parameters that produced them."""

    codes: np.ndarray
    deltas: np.ndarray
    zero_points: np.ndarray
    spec: QuantSpec
    shape: tuple[int, ...]


def _grouped(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """View ``x`` as [groups, group_len] float64 per the spec's granularity."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if spec.granularity == "per-tensor":
        out = x.reshape(1, -1)
    elif spec.granularity in ("per-token", "per-channel"):
        if x.ndim < 2:
            out = x.reshape(1, -1)
        else:
            out = x.reshape(-1, x.shape[-1])
    else:  # per-group, contiguous along the channel (trailing) axis
        channels = x.shape[-1] if x.ndim >= 1 else x.size
        if channels % spec.group_size != 0:
            raise ValueError(
                f"group_size {spec.group_size} does not divide channel axis length {channels}"
            )
        out = x.reshape(-1, spec.group_size)
    return out.astype(np.float64, copy=False)


def _group_params(groups: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized step-size/zero-point computation over [G, L] groups.

    Degenerate groups (zero range) get delta 1 for all-zero content, or a
    delta that reproduces the constant exactly otherwise.
    """
    levels = 2**spec.bits - 1
    if spec.scheme == "symmetric":
        absmax = np.abs(groups).max(axis=1) * spec.clip_ratio
        qmax = 2 ** (spec.bits - 1) - 1
        deltas = np.where(absmax > 0, absmax / qmax, 1.0)
        zps = np.zeros(groups.shape[0], dtype=np.int32)
    else:
        lo = groups.min(axis=1) * spec.clip_ratio
        hi = groups.max(axis=1) * spec.clip_ratio
        span = hi - lo
        flat = span <= 0
        const = np.where(flat, hi, 0.0)
        deltas = np.where(flat, np.where(const == 0, 1.0, np.abs(const) / levels), span / levels)
        with np.errstate(invalid="ignore"):
            zps_live = np.clip(np.rint(-lo / deltas), 0, levels)
        zps_flat = np.where(const < 0, levels, 0)
        zps = np.where(flat, zps_flat, zps_live).astype(np.int32)
    deltas = deltas.astype(np.float32)
    return deltas, zps


def compute_qparams(values, spec: QuantSpec) -> QuantParams:
    """Step size and zero point for one group slice.

    Symmetric: ``delta = clip * max|x| / (2^(b-1)-1)``, zero point 0.
    Asymmetric: range ``[clip*min, clip*max]``,
    ``delta = (max-min)/(2^b-1)``, ``z = -round(min/delta)`` clamped into
    the code range. An all-zero slice yields delta 1, zero point 0.
    """
    x = np.asarray(values, dtype=np.float64).reshape(1, -1)
    if x.size == 0:
        raise ValueError("cannot compute quantization parameters for an empty slice")
    require_finite(x, "quantizer input")
    deltas, zps = _group_params(x, spec)
    return QuantParams(delta=float(deltas[0]), zero_point=int(zps[0]))


def quantize(x, params: QuantParams, spec: QuantSpec) -> QuantizedTensor:
    """Quantize a tensor with a single set of parameters.

    Codes are ``clamp(round(x/delta) + z, code_min, code_max)`` with
    half-to-even rounding.
    """
    arr = np.asarray(x)
    x64 = arr.astype(np.float64, copy=False)
    codes = np.rint(x64 / params.delta) + params.zero_point
    codes = np.clip(codes, spec.code_min, spec.code_max).astype(np.int32)
    return QuantizedTensor(
        codes=codes,
        deltas=np.asarray([params.delta], dtype=np.float32),
        zero_points=np.asarray([params.zero_point], dtype=np.int32),
        spec=spec,
        shape=tuple(arr.shape),
    )


def quantize_tensor(x, spec: QuantSpec) -> QuantizedTensor:
    """Quantize with parameters computed per group under the spec's granularity."""
    arr = np.asarray(x)
    require_finite(arr, "quantizer input")
    groups = _grouped(arr, spec)
    deltas, zps = _group_params(groups, spec)
    scaled = groups / deltas.astype(np.float64)[:, None]
    codes = np.rint(scaled) + zps[:, None]
    codes = np.clip(codes, spec.code_min, spec.code_max).astype(np.int32)
    return QuantizedTensor(
        codes=codes.reshape(arr.shape),
        deltas=deltas,
        zero_points=zps,
        spec=spec,
        shape=tuple(arr.shape),
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct ``(codes - z) * delta`` elementwise, original shape restored."""
    groups = q.codes.reshape(len(q.deltas), -1).astype(np.float64)
    out = (groups - q.zero_points[:, None]) * q.deltas.astype(np.float64)[:, None]
    return out.reshape(q.shape).astype(np.float32)


def fake_quant(x, spec: QuantSpec) -> np.ndarray:
    """Quantize-then-dequantize, simulating integer inference in float."""
    return dequantize(quantize_tensor(x, spec))


def _spec_to_dict(spec: QuantSpec) -> dict:
    return {
        "bits": spec.bits,
        "scheme": spec.scheme,
        "granularity": spec.granularity,
        "group_size": spec.group_size,
        "clip_ratio": spec.clip_ratio,
    }


def _spec_from_dict(d: dict) -> QuantSpec:
    return QuantSpec(
        bits=int(d["bits"]),
        scheme=d["scheme"],
        granularity=d["granularity"],
        group_size=None if d.get("group_size") is None else int(d["group_size"]),
        clip_ratio=float(d["clip_ratio"]),
    )


def save_quantized(q: QuantizedTensor, name: str, path) -> None:
    """Store codes as an int32 payload with spec/params carried in the header."""
    tensors = {
        f"{name}.codes": q.codes.astype(np.int32),
        f"{name}.deltas": q.deltas.astype(np.float32),
        f"{name}.zero_points": q.zero_points.astype(np.int32),
    }
    meta = {f"{name}.codes": {"spec": _spec_to_dict(q.spec), "shape": list(q.shape)}}
    archive.save_archive(tensors, path, meta=meta)


def load_quantized(name: str, path) -> QuantizedTensor:
    tensors, metas = archive.load_archive(path, with_meta=True)
    key = f"{name}.codes"
    if key not in tensors or key not in metas:
        raise archive.ArchiveError(f"{path}: no quantized entry named {name!r}")
    meta = metas[key]
    return QuantizedTensor(
        codes=tensors[key],
        deltas=tensors[f"{name}.deltas"],
        zero_points=tensors[f"{name}.zero_points"],
        spec=_spec_from_dict(meta["spec"]),
        shape=tuple(meta["shape"]),
    )
