"""Calibration-driven channel-wise scaling of down-projection inputs.

Per-channel factors ``s_j = max|X_j|^alpha / max|W_j|^(1-alpha)`` migrate
quantization difficulty from the down-projection input activations into
the weights: the up-projection output is divided by ``s`` (folded into its
columns) and the down-projection rows are multiplied by ``s``, leaving the
float output of the block unchanged. The gate path is untouched because
the gate output multiplies the up output elementwise, so scaling the up
path alone scales the product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import archive
from .model import ForwardTrace, TinyModel, FfnBlock, model_forward
from .numerics import require_finite

__all__ = [
    "CalibrationStats",
    "SmoothingFactors",
    "collect_act_stats",
    "down_weight_absmax",
    "compute_scales",
    "fuse_smoothing",
    "smooth_model",
    "alpha_search",
    "save_factors",
    "load_factors",
    "save_stats",
    "load_stats",
]

ZERO_CHANNEL_EPS = 1e-8


@dataclass
class CalibrationStats:
    """Per-channel absolute maxima of one layer's down-projection input."""

    act_absmax: np.ndarray
    token_count: int
    source: str = ""

    def __post_init__(self):
        if np.any(self.act_absmax < 0):
            raise ValueError("act_absmax entries must be non-negative")


@dataclass
class SmoothingFactors:
    """Positive per-channel scales with the migration strength that built them."""

    scales: np.ndarray
    alpha: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise ValueError("smoothing factors must be positive and finite")


def collect_act_stats(model: TinyModel, calib_tokens, *, source: str = "synthetic",
                      chunk_sequences: int = 32) -> list[CalibrationStats]:
    """Run the float forward pass and record down-projection input maxima.

    Returns one :class:`CalibrationStats` per layer (channel count equals
    the intermediate dimension). The model must still be untransformed so
    the statistics describe the activations the smoothing will divide.
    Sequences are processed in chunks to bound memory; results do not
    depend on the chunking.
    """
    if model.transform_state != "none":
        raise ValueError(
            f"calibration needs an untransformed model, got state {model.transform_state!r}"
        )
    ids = np.asarray(calib_tokens)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.size == 0:
        raise ValueError("calibration token set is empty")
    trace = ForwardTrace(track_down_absmax=True)
    for start in range(0, ids.shape[0], chunk_sequences):
        model_forward(model, ids[start : start + chunk_sequences], None, trace=trace)
    token_count = int(ids.size)
    return [
        CalibrationStats(
            act_absmax=trace.down_absmax(i).astype(np.float32),
            token_count=token_count,
            source=source,
        )
        for i in range(len(model.layers))
    ]


def down_weight_absmax(ffn: FfnBlock) -> np.ndarray:
    """Per-input-channel absolute maximum of the down-projection weight."""
    return np.abs(ffn.w_down).max(axis=1)


def compute_scales(stats: CalibrationStats, w_absmax, alpha: float) -> SmoothingFactors:
    """Apply ``s_j = max|X_j|^alpha / max|W_j|^(1-alpha)`` per channel.

    Channels where either operand is below 1e-8 fall back to ``s_j = 1``
    (the formula is undefined at zero; unit scale is the neutral choice).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    x_max = np.asarray(stats.act_absmax, dtype=np.float64)
    w_max = np.asarray(w_absmax, dtype=np.float64)
    if x_max.shape != w_max.shape:
        raise ValueError(
            f"stats length {x_max.shape} does not match weight maxima length {w_max.shape}"
        )
    degenerate = (x_max <= ZERO_CHANNEL_EPS) | (w_max <= ZERO_CHANNEL_EPS)
    safe_x = np.where(degenerate, 1.0, x_max)
    safe_w = np.where(degenerate, 1.0, w_max)
    scales = safe_x**alpha / safe_w ** (1.0 - alpha)
    scales = np.where(degenerate, 1.0, scales).astype(np.float32)
    return SmoothingFactors(scales=scales, alpha=float(alpha))


def fuse_smoothing(ffn: FfnBlock, factors: SmoothingFactors) -> FfnBlock:
    """Absorb ``diag(s)`` into the block: up columns divided, down rows multiplied.

    The float output of the block is unchanged while its down-projection
    input becomes the original input divided elementwise by ``s``.
    """
    s = np.asarray(factors.scales, dtype=np.float64)
    if s.shape[0] != ffn.intermediate_dim:
        raise ValueError(
            f"expected {ffn.intermediate_dim} factors, got {s.shape[0]}"
        )
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ValueError("smoothing factors must be positive and finite")
    ffn.w_up = (ffn.w_up.astype(np.float64) / s[None, :]).astype(np.float32)
    ffn.w_down = (ffn.w_down.astype(np.float64) * s[:, None]).astype(np.float32)
    require_finite(ffn.w_up, "smoothed up-projection")
    require_finite(ffn.w_down, "smoothed down-projection")
    return ffn


def smooth_model(model: TinyModel, stats: list[CalibrationStats],
                 alpha: float) -> list[SmoothingFactors]:
    """Compute and fuse per-layer smoothing factors; state becomes "smoothed"."""
    if model.transform_state != "none":
        raise ValueError(
            f"smoothing must precede rotation; model state is {model.transform_state!r}"
        )
    if len(stats) != len(model.layers):
        raise ValueError(f"expected stats for {len(model.layers)} layers, got {len(stats)}")
    factors = []
    for layer, layer_stats in zip(model.layers, stats):
        f = compute_scales(layer_stats, down_weight_absmax(layer.ffn), alpha)
        fuse_smoothing(layer.ffn, f)
        factors.append(f)
    model.transform_state = "smoothed"
    return factors


def alpha_search(model: TinyModel, calib_tokens, grid, metric) -> tuple[float, list[tuple[float, float]]]:
    """Evaluate smoothing strength over a grid, returning the argmin and table.

    Args:
        model: Untransformed model; each grid point works on a fresh copy.
        calib_tokens: Calibration token ids for the statistics pass.
        grid: Migration strengths to try, each in [0, 1].
        metric: Callable taking a smoothed model copy and returning a float
            score to minimize (e.g. quantized-vs-float logit MSE after the
            rest of the pipeline; see ``harness.sweep_alpha``).

    Ties break toward smaller alpha. Metric failures propagate with the
    offending alpha attached.
    """
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("alpha grid is empty")
    for a in grid:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
    stats = collect_act_stats(model, calib_tokens)
    table: list[tuple[float, float]] = []
    best_alpha, best_value = None, None
    for a in grid:
        candidate = model.copy()
        smooth_model(candidate, stats, a)
        try:
            value = float(metric(candidate))
        except Exception as exc:
            raise RuntimeError(f"metric evaluation failed at alpha={a}") from exc
        table.append((a, value))
        if best_value is None or value < best_value:
            best_alpha, best_value = a, value
    return best_alpha, table


def save_factors(factors, path, *, source: str = "", token_count: int = 0) -> None:
    """Serialize factors to a tensor archive.

    A single :class:`SmoothingFactors` is stored under entry ``s``; a
    per-layer list under ``s.layer{i}``. Alpha and provenance ride in the
    entry metadata.
    """
    if isinstance(factors, SmoothingFactors):
        named = {"s": factors}
    else:
        named = {f"s.layer{i}": f for i, f in enumerate(factors)}
    tensors = {name: f.scales.astype(np.float32) for name, f in named.items()}
    meta = {
        name: {"alpha": f.alpha, "source": source, "token_count": token_count}
        for name, f in named.items()
    }
    archive.save_archive(tensors, path, meta=meta)


def load_factors(path):
    """Inverse of :func:`save_factors`; returns one factors object or a list."""
    tensors, metas = archive.load_archive(path, with_meta=True)
    if "s" in tensors:
        return SmoothingFactors(scales=tensors["s"], alpha=float(metas["s"]["alpha"]))
    out = []
    for i in range(len(tensors)):
        name = f"s.layer{i}"
        if name not in tensors:
            raise archive.ArchiveError(f"{path}: missing smoothing entry {name!r}")
        out.append(SmoothingFactors(scales=tensors[name], alpha=float(metas[name]["alpha"])))
    return out


def save_stats(stats: list[CalibrationStats], path) -> None:
    """Serialize per-layer calibration statistics to a tensor archive."""
    tensors = {
        f"act_absmax.layer{i}": s.act_absmax.astype(np.float32) for i, s in enumerate(stats)
    }
    meta = {
        f"act_absmax.layer{i}": {"token_count": s.token_count, "source": s.source}
        for i, s in enumerate(stats)
    }
    archive.save_archive(tensors, path, meta=meta)


def load_stats(path) -> list[CalibrationStats]:
    tensors, metas = archive.load_archive(path, with_meta=True)
    out = []
    for i in range(len(tensors)):
        name = f"act_absmax.layer{i}"
        if name not in tensors:
            raise archive.ArchiveError(f"{path}: missing stats entry {name!r}")
        m = metas.get(name, {})
        out.append(
            CalibrationStats(
                act_absmax=tensors[name],
                token_count=int(m.get("token_count", 0)),
                source=str(m.get("source", "archive")),
            )
        )
    return out
