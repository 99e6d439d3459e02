"""Synthesis and detection of massive activation outliers.

A massive outlier is an entry whose magnitude exceeds 100 and is more than
1000 times the median magnitude of the tensor it lives in. The generator
plants such spikes in synthetic activations; the circuit injector rewrites
a model's feed-forward weights so its down-projection inputs exhibit them
on ordinary tokens.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .model import ForwardTrace, TinyModel, model_forward
from .numerics import Rng

__all__ = [
    "OutlierProfile",
    "gen_outlier_activations",
    "detect_massive",
    "inject_outlier_circuit",
    "magnitude_report",
    "write_magnitude_csv",
]

MAGNITUDE_THRESHOLD = 100.0
MEDIAN_RATIO = 1000.0
# Median of |N(0, 1)|; calibrates the noise floor to a target typical scale.
_MEDIAN_ABS_NORMAL = 0.6744897501960817


@dataclass(frozen=True)
class OutlierProfile:
    """Where and how hard to plant spikes.

    Attributes:
        channel_indices: Channels that carry spikes (empty means no-op).
        token_fraction: Fraction of tokens spiked in those channels.
        spike_magnitude: Target absolute spike value.
        base_scale: Typical magnitude of non-outlier entries.
    """

    channel_indices: tuple[int, ...]
    token_fraction: float = 0.02
    spike_magnitude: float = 1400.0
    base_scale: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.token_fraction <= 1.0:
            raise ValueError(f"token_fraction must be in (0, 1], got {self.token_fraction}")
        if self.spike_magnitude <= 0 or self.base_scale <= 0:
            raise ValueError("spike_magnitude and base_scale must be positive")


def gen_outlier_activations(shape, profile: OutlierProfile, rng: Rng) -> np.ndarray:
    """Gaussian floor at ``base_scale`` with ±spikes at planted positions.

    Spiked tokens are a seeded sample of ``round(token_fraction * tokens)``
    rows (at least one); each carries ``±spike_magnitude`` exactly in every
    profile channel. An empty profile yields plain noise with a warning.
    """
    tokens, channels = shape
    x = rng.normal((tokens, channels), profile.base_scale)
    if not profile.channel_indices:
        warnings.warn("empty outlier profile: returning plain noise", stacklevel=2)
        return x
    idx = np.asarray(profile.channel_indices)
    if np.any(idx < 0) or np.any(idx >= channels):
        raise ValueError(f"channel indices {profile.channel_indices} outside [0, {channels})")
    n_spiked = max(1, int(round(profile.token_fraction * tokens)))
    rows = np.sort(rng.choice(tokens, size=n_spiked, replace=False))
    signs = rng.signs(n_spiked * len(idx)).reshape(n_spiked, len(idx))
    x[rows[:, None], idx[None, :]] = (signs * profile.spike_magnitude).astype(np.float32)
    return x


def detect_massive(x) -> list[tuple[int, int, float]]:
    """Entries with ``|v| > 100`` and ``|v| > 1000 * median(|x|)``.

    The median is taken over the whole tensor. Results are sorted by
    magnitude, largest first.
    """
    arr = np.asarray(x)
    if arr.size == 0:
        raise ValueError("cannot scan an empty tensor")
    mag = np.abs(arr.astype(np.float64))
    med = float(np.median(mag))
    mask = (mag > MAGNITUDE_THRESHOLD) & (mag > MEDIAN_RATIO * med)
    hits = np.argwhere(mask)
    order = np.argsort(-mag[mask], kind="stable")
    return [
        (int(t), int(c), float(arr[t, c]))
        for t, c in hits[order]
    ]


def inject_outlier_circuit(model: TinyModel, profile: OutlierProfile, rng: Rng, *,
                           layer_indices=None, probe_tokens=None) -> TinyModel:
    """Rewire feed-forward weights so down-projection inputs carry spikes.

    A probe forward pass measures each layer's down-projection input; the
    planted channels' up-projection columns are then scaled to hit the
    target spike magnitude and the remaining columns rescaled so the noise
    floor sits at ``base_scale``. Matching inverse scales go into the
    down-projection rows, so the model function is preserved and every
    subsequent transform sees the spikes as real model behavior: large
    activations paired with small weight rows.
    """
    if not profile.channel_indices:
        warnings.warn("empty outlier profile: model left unchanged", stacklevel=2)
        return model
    if model.transform_state != "none" or model.rmsnorm_fused:
        raise ValueError("outlier injection requires an untransformed model")
    m = model.intermediate_dim
    idx = np.asarray(profile.channel_indices)
    if np.any(idx < 0) or np.any(idx >= m):
        raise ValueError(f"channel indices {profile.channel_indices} outside [0, {m})")
    if probe_tokens is None:
        probe_tokens = rng.integers(0, model.vocab_size, (4, 128))

    trace = ForwardTrace(store_down_inputs=True)
    model_forward(model, probe_tokens, None, trace=trace)
    targets = range(len(model.layers)) if layer_indices is None else layer_indices

    for li in targets:
        z = trace.down_input(li).astype(np.float64)
        med = float(np.median(np.abs(z)))
        if med <= 0:
            raise ValueError(f"layer {li}: degenerate probe activations, cannot calibrate floor")
        mult = np.full(m, _MEDIAN_ABS_NORMAL * profile.base_scale / med)
        peaks = np.abs(z[:, idx]).max(axis=0)
        if np.any(peaks <= 0):
            raise ValueError(f"layer {li}: zero response in channels {profile.channel_indices}")
        mult[idx] = profile.spike_magnitude / peaks
        if not np.all(np.isfinite(mult)):
            raise ValueError("requested spike magnitude unattainable within float range")

        predicted = z * mult[None, :]
        hit_channels = {c for _, c, _ in detect_massive(predicted)}
        missing = [int(c) for c in idx if int(c) not in hit_channels]
        if missing:
            raise ValueError(
                f"layer {li}: channels {missing} would not register as massive outliers "
                "(spike_magnitude too small for the floor?)"
            )

        ffn = model.layers[li].ffn
        ffn.w_up = (ffn.w_up.astype(np.float64) * mult[None, :]).astype(np.float32)
        ffn.w_down = (ffn.w_down.astype(np.float64) / mult[:, None]).astype(np.float32)
        if not (np.all(np.isfinite(ffn.w_up)) and np.all(np.isfinite(ffn.w_down))):
            raise ValueError("requested spike magnitude unattainable within float range")
    return model


def magnitude_report(x, top_k: int = 10) -> dict:
    """Summary of activation magnitudes for surface plots and tables.

    Reports the global max and median magnitude, the per-channel maximum
    over all tokens, and the top-k entries as (token, channel, value).
    """
    arr = np.asarray(x)
    if arr.size == 0:
        raise ValueError("cannot summarize an empty tensor")
    flat = arr.reshape(-1, arr.shape[-1])
    mag = np.abs(flat.astype(np.float64))
    k = min(top_k, mag.size)
    top_flat = np.argsort(-mag, axis=None, kind="stable")[:k]
    tks, chs = np.unravel_index(top_flat, mag.shape)
    return {
        "max_abs": float(mag.max()),
        "median_abs": float(np.median(mag)),
        "per_channel_max": [float(v) for v in mag.max(axis=0)],
        "top": [
            {"token": int(t), "channel": int(c), "value": float(flat[t, c])}
            for t, c in zip(tks, chs)
        ],
    }


def write_magnitude_csv(x, path) -> None:
    """Dump (token, channel, |value|) rows for every entry, surface-plot ready."""
    arr = np.asarray(x)
    flat = arr.reshape(-1, arr.shape[-1])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "channel", "abs_value"])
        mag = np.abs(flat)
        for t in range(flat.shape[0]):
            for c in range(flat.shape[1]):
                writer.writerow([t, c, repr(float(mag[t, c]))])
