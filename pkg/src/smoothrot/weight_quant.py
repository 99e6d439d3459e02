"""Weight quantization backends: RTN with clip-ratio search, and GPTQ.

Both backends take weights as ``[out_features, in_features]`` (one output
channel per row, matching per-channel granularity) and run in float64, so
identical inputs and configuration give bit-identical results. Per-layer
jobs are independent and may run in parallel on weight copies.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import ForwardTrace, QuantConfig, TinyModel, model_forward
from .quantizer import QuantSpec, QuantizedTensor, dequantize, quantize_tensor
from .numerics import require_finite

__all__ = [
    "ClipSearchConfig",
    "GptqConfig",
    "rtn_quantize_weight",
    "gptq_quantize_weight",
    "proxy_loss",
    "quantize_model_weights",
]

_DEFAULT_GRID = tuple(round(1.0 - 0.01 * i, 2) for i in range(51))  # 1.00 .. 0.50


@dataclass(frozen=True)
class ClipSearchConfig:
    """Descending clip-ratio grid searched per output channel.

    The objective is squared reconstruction error; ties keep the larger
    ratio (first hit in the descending grid).
    """

    grid: tuple[float, ...] = _DEFAULT_GRID

    def __post_init__(self):
        if not self.grid:
            raise ValueError("clip-search grid is empty")
        for r in self.grid:
            if not 0.0 < r <= 1.0:
                raise ValueError(f"clip ratio {r} outside (0, 1]")
        if any(later >= earlier for later, earlier in zip(self.grid[1:], self.grid)):
            raise ValueError("clip-search grid must be strictly descending")


@dataclass
class GptqConfig:
    """Calibration inputs and numerical knobs for GPTQ.

    ``damping`` is the fraction of the mean Hessian diagonal added before
    factorization; it escalates tenfold (three retries) on failure.
    """

    calib_inputs: np.ndarray
    damping: float = 0.01
    block_size: int = 128
    act_order: bool = False

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError("damping must be positive")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")
        x = np.asarray(self.calib_inputs)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("calib_inputs must be [tokens, in_features] with >= 1 token")


def rtn_quantize_weight(w, spec: QuantSpec, clip_cfg: ClipSearchConfig | None = None
                        ) -> tuple[QuantizedTensor, np.ndarray]:
    """Round-to-nearest with a per-channel clip-ratio search.

    Args:
        w: Weight ``[out_features, in_features]``.
        spec: Weight quantization spec (per-channel granularity expected).
        clip_cfg: Ratio grid; defaults to 1.00 down to 0.50, step 0.01.

    Returns:
        The quantized weight and the chosen ratio per output channel.
    """
    clip_cfg = clip_cfg or ClipSearchConfig()
    arr = np.asarray(w, dtype=np.float32)
    require_finite(arr, "weight")
    if arr.ndim != 2:
        raise ValueError(f"weight must be [out_features, in_features], got shape {arr.shape}")
    if spec.granularity != "per-channel":
        raise ValueError("clip search selects a ratio per output channel; use per-channel granularity")
    w64 = arr.astype(np.float64)
    out_ch = arr.shape[0]

    best_err = np.full(out_ch, np.inf)
    best_ratio = np.zeros(out_ch)
    best_codes = None
    best_deltas = None
    best_zps = None
    for ratio in clip_cfg.grid:
        qt = quantize_tensor(arr, replace(spec, clip_ratio=ratio))
        deq = dequantize(qt).astype(np.float64)
        err = ((deq - w64) ** 2).reshape(out_ch, -1).sum(axis=1)
        improve = err < best_err
        if best_codes is None:
            best_codes = qt.codes.copy()
            best_deltas = qt.deltas.copy()
            best_zps = qt.zero_points.copy()
            best_err = err
            best_ratio[:] = ratio
        elif np.any(improve):
            best_codes[improve] = qt.codes[improve]
            best_deltas[improve] = qt.deltas[improve]
            best_zps[improve] = qt.zero_points[improve]
            best_err[improve] = err[improve]
            best_ratio[improve] = ratio
    result = QuantizedTensor(
        codes=best_codes,
        deltas=best_deltas,
        zero_points=best_zps,
        spec=spec,
        shape=tuple(arr.shape),
    )
    return result, best_ratio


def _invert_hessian(h: np.ndarray, damping: float) -> tuple[np.ndarray, float]:
    """Upper Cholesky factor of the damped inverse Hessian.

    Damping escalates tenfold up to three retries before giving up.
    """
    n = h.shape[0]
    mean_diag = float(np.mean(np.diag(h)))
    if mean_diag <= 0:
        mean_diag = 1.0
    damp = damping
    for attempt in range(4):
        try:
            damped = h + (damp * mean_diag) * np.eye(n)
            np.linalg.cholesky(damped)
            hinv = np.linalg.inv(damped)
            hinv = (hinv + hinv.T) / 2.0
            upper = np.linalg.cholesky(hinv).T
            return upper, damp
        except np.linalg.LinAlgError:
            damp *= 10.0
    raise RuntimeError(
        f"Hessian factorization failed after damping escalation to {damp / 10.0:g}"
    )


def _channel_params(arr: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-channel step sizes and zero points from the raw weight."""
    per_channel = replace(spec, granularity="per-channel", group_size=None)
    qt = quantize_tensor(arr, per_channel)
    return qt.deltas.astype(np.float64), qt.zero_points.astype(np.float64)


def gptq_quantize_weight(w, spec: QuantSpec, cfg: GptqConfig) -> QuantizedTensor:
    """Column-by-column quantization with Hessian-guided error feedback.

    Each column is rounded to its per-channel grid and the residual is
    propagated into the not-yet-quantized columns through the inverse
    Hessian factor (damped Cholesky). With a diagonal Hessian there is no
    cross-column correction and the result equals plain RTN.
    """
    arr = np.asarray(w, dtype=np.float32)
    require_finite(arr, "weight")
    x = np.asarray(cfg.calib_inputs, dtype=np.float64)
    n_out, n_in = arr.shape
    if x.shape[1] != n_in:
        raise ValueError(
            f"calibration inputs have {x.shape[1]} channels, weight expects {n_in}"
        )
    require_finite(x, "calibration inputs")

    work = arr.astype(np.float64)
    hessian = x.T @ x
    dead = np.diag(hessian) == 0
    if np.any(dead):
        hessian[dead, dead] = 1.0
        work[:, dead] = 0.0

    perm = None
    if cfg.act_order:
        perm = np.argsort(-np.diag(hessian), kind="stable")
        work = work[:, perm]
        hessian = hessian[np.ix_(perm, perm)]

    upper, _ = _invert_hessian(hessian, cfg.damping)
    deltas, zps = _channel_params(arr, spec)

    lo, hi = spec.code_min, spec.code_max
    codes = np.zeros((n_out, n_in), dtype=np.int32)
    for i1 in range(0, n_in, cfg.block_size):
        i2 = min(i1 + cfg.block_size, n_in)
        errs = np.zeros((n_out, i2 - i1))
        for j in range(i1, i2):
            col = work[:, j]
            c = np.clip(np.rint(col / deltas) + zps, lo, hi)
            codes[:, j] = c.astype(np.int32)
            deq = (c - zps) * deltas
            err = (col - deq) / upper[j, j]
            if j + 1 < i2:
                work[:, j + 1 : i2] -= err[:, None] * upper[j, j + 1 : i2][None, :]
            errs[:, j - i1] = err
        if i2 < n_in:
            work[:, i2:] -= errs @ upper[i1:i2, i2:]

    if perm is not None:
        inv = np.argsort(perm)
        codes = codes[:, inv]
    return QuantizedTensor(
        codes=codes,
        deltas=deltas.astype(np.float32),
        zero_points=zps.astype(np.int32),
        spec=spec,
        shape=(n_out, n_in),
    )


def proxy_loss(w, w_hat, calib_inputs, damping: float = 0.01) -> float:
    """``tr((W - W_hat) H (W - W_hat)^T)`` with the damped Hessian.

    ``H = X^T X + damping * mean(diag(X^T X)) * I`` matches the Hessian the
    GPTQ sweep actually uses, so RTN and GPTQ are compared on one scale.
    """
    x = np.asarray(calib_inputs, dtype=np.float64)
    h = x.T @ x
    mean_diag = float(np.mean(np.diag(h)))
    if mean_diag <= 0:
        mean_diag = 1.0
    h = h + damping * mean_diag * np.eye(h.shape[0])
    err = np.asarray(w, dtype=np.float64) - np.asarray(w_hat, dtype=np.float64)
    return float(np.sum((err @ h) * err))


_WEIGHT_SITES = (
    ("attn", "w_q", "qkv_in"),
    ("attn", "w_k", "qkv_in"),
    ("attn", "w_v", "qkv_in"),
    ("attn", "w_o", "o_in"),
    ("ffn", "w_gate", "ffn_in"),
    ("ffn", "w_up", "ffn_in"),
    ("ffn", "w_down", "down_in"),
)


def quantize_model_weights(model: TinyModel, config: QuantConfig, *,
                           clip_cfg: ClipSearchConfig | None = None,
                           calib_tokens=None, damping: float = 0.01,
                           block_size: int = 128, act_order: bool = False) -> list[dict]:
    """Replace every projection weight with its fake-quantized version.

    Runs after the transform surgery is final. The RTN backend searches
    clip ratios per channel; the GPTQ backend additionally needs
    ``calib_tokens``, from which per-site layer inputs are captured with
    one traced float forward pass of the transformed model.

    Returns a per-weight report: layer, backend, bits, clip ratio(s), mse,
    and proxy loss (GPTQ only). Disabled weight quantization returns an
    empty report and leaves the model unchanged.
    """
    if config.weight_spec is None:
        return []
    spec = config.weight_spec
    method = config.weight_method

    site_inputs: dict[tuple[int, str], np.ndarray] = {}
    if method == "gptq":
        if calib_tokens is None:
            raise ValueError("GPTQ weight quantization requires calib_tokens")
        trace = ForwardTrace(store_proj_inputs=True)
        model_forward(model, calib_tokens, None, trace=trace)
        for i in range(len(model.layers)):
            for _, _, site in _WEIGHT_SITES:
                site_inputs[(i, site)] = trace.proj_input(i, site)

    report: list[dict] = []
    for i, layer in enumerate(model.layers):
        for block_name, weight_name, site in _WEIGHT_SITES:
            block = getattr(layer, block_name)
            w = getattr(block, weight_name)  # stored [in, out]
            w_t = np.ascontiguousarray(w.T)  # backend wants [out, in]
            entry = {
                "layer": i,
                "weight": f"{block_name}.{weight_name}",
                "backend": method,
                "bits": spec.bits,
            }
            if method == "rtn":
                qt, ratios = rtn_quantize_weight(w_t, spec, clip_cfg)
                deq = dequantize(qt)
                entry["clip_ratios"] = [float(r) for r in np.unique(ratios)]
            else:
                cfg = GptqConfig(
                    calib_inputs=site_inputs[(i, site)],
                    damping=damping,
                    block_size=block_size,
                    act_order=act_order,
                )
                qt = gptq_quantize_weight(w_t, spec, cfg)
                deq = dequantize(qt)
                entry["clip_ratios"] = [spec.clip_ratio]
                entry["proxy_loss"] = proxy_loss(w_t, deq, cfg.calib_inputs, damping)
            entry["mse"] = float(np.mean((deq.astype(np.float64) - w_t.astype(np.float64)) ** 2))
            setattr(block, weight_name, np.ascontiguousarray(deq.T))
            report.append(entry)
    return report
