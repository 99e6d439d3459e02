"""Experiment orchestration: pipeline variants, metrics, and reports.

A run builds a seeded model (optionally with an injected outlier circuit),
calibrates when smoothing is requested, applies the surgery in order
(smooth, then fuse norms, then rotate), quantizes weights, and evaluates
quantized logits against the float model on held-out tokens. Everything is
derived from the experiment seed, so identical configs produce
byte-identical reports apart from timing. Independent runs (distinct seeds
or variants) may execute in parallel; nothing mutable is shared.
"""

from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_echo
from .model import (
    ForwardTrace,
    ModelConfig,
    QuantConfig,
    TinyModel,
    build_model,
    fuse_rmsnorm,
    model_forward,
    rotate_model,
)
from .numerics import Rng, rel_inf_error
from .outliers import OutlierProfile, inject_outlier_circuit
from .quantizer import QuantSpec
from .rotation import load_transform, random_hadamard
from .smoothing import collect_act_stats, load_stats, smooth_model
from .weight_quant import ClipSearchConfig, quantize_model_weights

__all__ = [
    "ExperimentError",
    "RunReport",
    "run_experiment",
    "compare_variants",
    "sweep_alpha",
    "calib_source_ablation",
    "write_report",
    "report_without_timing",
    "DEFAULT_ALPHA_GRID",
]

DEFAULT_ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))  # 0.05 .. 0.95
# Random models stay within 1e-5 relative; injected spikes force catastrophic
# cancellation against float32-rounded rotated weights, so the self-check
# bound on outlier models is an order looser.
INVARIANCE_TOL = 1e-4


class ExperimentError(RuntimeError):
    """A pipeline stage failed; carries the stage name and partial report."""

    def __init__(self, stage: str, cause: Exception, report: "RunReport"):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.report = report


@dataclass
class RunReport:
    """Metrics and provenance for one pipeline run."""

    config: dict
    pipeline: str
    alpha: float | None
    metrics: dict
    down_proj: dict
    act_quant_mse: dict
    weight_report: list
    versions: dict
    timing: dict
    partial: bool = False
    error: dict | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "pipeline": self.pipeline,
            "alpha": self.alpha,
            "metrics": self.metrics,
            "down_proj": self.down_proj,
            "act_quant_mse": self.act_quant_mse,
            "weight_report": self.weight_report,
            "versions": self.versions,
            "timing": self.timing,
            "partial": self.partial,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**{k: d.get(k) for k in (
            "config", "pipeline", "alpha", "metrics", "down_proj", "act_quant_mse",
            "weight_report", "versions", "timing", "partial", "error")})


def _versions() -> dict:
    return {
        "smoothrot": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def _token_probs(vocab: int) -> np.ndarray:
    # Zipf-flavored distribution stands in for text-like token statistics.
    ranks = np.arange(vocab, dtype=np.float64)
    probs = 1.0 / (ranks + 3.0) ** 1.1
    return probs / probs.sum()


def sample_tokens(rng: Rng, sequences: int, seq_len: int, vocab: int,
                  source: str = "synthetic") -> np.ndarray:
    """Seeded token streams: Zipf-like for "synthetic", uniform for "random-tokens"."""
    if source == "synthetic":
        flat = rng.choice(vocab, size=sequences * seq_len, replace=True, p=_token_probs(vocab))
        return flat.reshape(sequences, seq_len)
    if source == "random-tokens":
        return rng.integers(0, vocab, (sequences, seq_len))
    raise ValueError(f"unknown token source {source!r}")


def forward_quant_config(cfg: ExperimentConfig) -> QuantConfig | None:
    """Activation/KV fake-quant sites for the forward pass, or None if all off."""
    act = (
        QuantSpec(cfg.act_bits, "symmetric", "per-token", clip_ratio=cfg.act_clip)
        if cfg.quantize_activations
        else None
    )
    kv = (
        QuantSpec(cfg.kv_bits, "asymmetric", "per-group",
                  group_size=min(cfg.kv_group, cfg.hidden_dim), clip_ratio=cfg.kv_clip)
        if cfg.quantize_kv
        else None
    )
    if act is None and kv is None:
        return None
    return QuantConfig(act_spec=act, kv_spec=kv)


def weight_quant_config(cfg: ExperimentConfig) -> QuantConfig:
    spec = (
        QuantSpec(cfg.weight_bits, "symmetric", "per-channel")
        if cfg.quantize_weights
        else None
    )
    return QuantConfig(weight_spec=spec, weight_method=cfg.weight_method)


def build_experiment_model(cfg: ExperimentConfig) -> TinyModel:
    """Seeded model with the configured outlier circuit injected."""
    rng = Rng(cfg.seed)
    model = build_model(
        ModelConfig(
            vocab_size=cfg.vocab_size,
            hidden_dim=cfg.hidden_dim,
            intermediate_dim=cfg.intermediate_dim,
            n_layers=cfg.n_layers,
            n_heads=cfg.n_heads,
        ),
        rng.derive("model"),
    )
    if cfg.inject_outliers and cfg.outlier_channels > 0:
        out_rng = rng.derive("outliers")
        channels = tuple(
            sorted(int(c) for c in out_rng.choice(cfg.intermediate_dim, cfg.outlier_channels))
        )
        profile = OutlierProfile(
            channel_indices=channels,
            token_fraction=cfg.outlier_token_fraction,
            spike_magnitude=cfg.spike_magnitude,
            base_scale=cfg.outlier_base_scale,
        )
        probe = sample_tokens(rng.derive("probe"), 4, 128, cfg.vocab_size)
        inject_outlier_circuit(model, profile, out_rng, probe_tokens=probe)
    return model


def calibration_stats(cfg: ExperimentConfig, model: TinyModel):
    if cfg.calib_source == "archive":
        return load_stats(cfg.calib_archive)
    tokens = sample_tokens(
        Rng(cfg.seed).derive(f"calib:{cfg.calib_source}"),
        cfg.calib_sequences,
        cfg.calib_seq_len,
        cfg.vocab_size,
        cfg.calib_source,
    )
    return collect_act_stats(model, tokens, source=cfg.calib_source)


def rotation_transform(cfg: ExperimentConfig, hidden_dim: int | None = None):
    if cfg.rotation_source == "archive":
        return load_transform(cfg.rotation_archive)
    return random_hadamard(hidden_dim or cfg.hidden_dim, Rng(cfg.seed).derive("rotation"))


def apply_pipeline(model: TinyModel, cfg: ExperimentConfig, stats=None,
                   alpha: float | None = None) -> TinyModel:
    """Apply the configured variant's surgery in order: smooth, fuse, rotate."""
    if cfg.smoothing_enabled:
        if stats is None:
            stats = calibration_stats(cfg, model)
        smooth_model(model, stats, cfg.alpha if alpha is None else alpha)
    if cfg.rotation_enabled:
        fuse_rmsnorm(model)
        rotate_model(model, rotation_transform(cfg))
    return model


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logit_metrics(variant_logits: np.ndarray, float_logits: np.ndarray) -> dict:
    """End-to-end fidelity of a variant's logits against the float model."""
    a = variant_logits.astype(np.float64)
    b = float_logits.astype(np.float64)
    mse = float(np.mean((a - b) ** 2))
    p = _softmax64(float_logits)
    q = _softmax64(variant_logits)
    kl = float(np.mean(np.sum(p * (np.log(p + 1e-12) - np.log(q + 1e-12)), axis=-1)))
    return {
        "logit_mse": mse,
        "logit_rel_inf": rel_inf_error(variant_logits, float_logits),
        "softmax_kl": kl,
    }


def _down_proj_summary(model: TinyModel, eval_tokens: np.ndarray) -> tuple[dict, dict]:
    """Float-mode down-projection input stats per layer (max, median) and taps."""
    trace = ForwardTrace(store_down_inputs=True)
    model_forward(model, eval_tokens, None, trace=trace)
    per_layer: dict[str, dict] = {}
    taps = {}
    overall_max = 0.0
    for i in range(len(model.layers)):
        z = trace.down_input(i)
        taps[i] = z
        mag = np.abs(z.astype(np.float64))
        per_layer[str(i)] = {
            "max": float(mag.max()),
            "median": float(np.median(mag)),
            "per_channel_max": [float(v) for v in mag.max(axis=0)],
        }
        overall_max = max(overall_max, float(mag.max()))
    per_layer["overall"] = {"max": overall_max}
    return per_layer, taps


def run_experiment(cfg: ExperimentConfig, *, keep_models: bool = False):
    """Execute one full pipeline run and return its :class:`RunReport`.

    With ``keep_models=True`` returns ``(report, reference, transformed)``
    for callers that reuse the models. Stage failures raise
    :class:`ExperimentError` carrying a partial report flagged with the
    stage name.
    """
    timing: dict[str, float] = {}
    report = RunReport(
        config=config_echo(cfg),
        pipeline=cfg.pipeline,
        alpha=cfg.alpha if cfg.smoothing_enabled else None,
        metrics={},
        down_proj={},
        act_quant_mse={},
        weight_report=[],
        versions=_versions(),
        timing=timing,
        partial=True,
    )
    stage = "build"
    t_start = time.perf_counter()
    try:
        t0 = time.perf_counter()
        model = build_experiment_model(cfg)
        reference = model.copy()
        timing["build_s"] = time.perf_counter() - t0

        stage = "calibrate"
        t0 = time.perf_counter()
        stats = calibration_stats(cfg, model) if cfg.smoothing_enabled else None
        timing["calibrate_s"] = time.perf_counter() - t0

        stage = "transform"
        t0 = time.perf_counter()
        apply_pipeline(model, cfg, stats=stats)
        timing["transform_s"] = time.perf_counter() - t0

        stage = "evaluate-float"
        t0 = time.perf_counter()
        eval_tokens = sample_tokens(
            Rng(cfg.seed).derive("eval"), cfg.eval_sequences, cfg.eval_seq_len, cfg.vocab_size
        )
        float_logits = model_forward(reference, eval_tokens, None)
        transformed_logits = model_forward(model, eval_tokens, None)
        report.metrics["float_invariance_rel_inf"] = rel_inf_error(
            transformed_logits, float_logits
        )
        report.down_proj, _ = _down_proj_summary(model, eval_tokens)
        timing["evaluate_float_s"] = time.perf_counter() - t0

        stage = "quantize-weights"
        t0 = time.perf_counter()
        wq_cfg = weight_quant_config(cfg)
        if wq_cfg.weight_spec is not None:
            gptq_tokens = None
            if cfg.weight_method == "gptq":
                gptq_tokens = sample_tokens(
                    Rng(cfg.seed).derive("gptq"), cfg.gptq_sequences, cfg.gptq_seq_len,
                    cfg.vocab_size,
                )
            report.weight_report = quantize_model_weights(
                model,
                wq_cfg,
                clip_cfg=ClipSearchConfig(),
                calib_tokens=gptq_tokens,
                damping=cfg.gptq_damping,
                block_size=cfg.gptq_block_size,
            )
        timing["quantize_weights_s"] = time.perf_counter() - t0

        stage = "evaluate-quantized"
        t0 = time.perf_counter()
        fwd_quant = forward_quant_config(cfg)
        trace = ForwardTrace(track_quant_mse=True)
        quant_logits = model_forward(model, eval_tokens, fwd_quant, trace=trace)
        report.metrics.update(logit_metrics(quant_logits, float_logits))
        report.act_quant_mse = {
            f"{layer}.{site}": mse for (layer, site), mse in sorted(trace.quant_mse().items())
        }
        timing["evaluate_quantized_s"] = time.perf_counter() - t0
    except Exception as exc:
        report.error = {"stage": stage, "message": str(exc)}
        timing["total_s"] = time.perf_counter() - t_start
        raise ExperimentError(stage, exc, report) from exc

    report.partial = False
    timing["total_s"] = time.perf_counter() - t_start
    if keep_models:
        return report, reference, model
    return report


_COMPARE_IGNORED_KEYS = {"pipeline", "alpha", "alpha_grid", "output_dir"}


def compare_variants(reports: list[RunReport]) -> dict:
    """Metric deltas and gap closure across pipeline variants of one setup.

    Gap closure between rotate and smoothrot is
    ``(m_rot - m_srot) / (m_rot - m_float)`` with the float-path metric
    taken as 0 for metrics measured against the float model, making it the
    relative reduction. Reports must share every config field except the
    pipeline/alpha selection.
    """
    if not reports:
        raise ValueError("no reports to compare")
    base_cfg = reports[0].config
    for other in reports[1:]:
        diffs = [
            key
            for key in base_cfg
            if key not in _COMPARE_IGNORED_KEYS and other.config.get(key) != base_cfg[key]
        ]
        if diffs:
            raise ValueError(f"reports differ in config fields: {sorted(diffs)}")

    by_pipeline = {r.pipeline: r for r in reports}
    metric_names = sorted({name for r in reports for name in r.metrics})
    table: dict = {
        "variants": sorted(by_pipeline),
        "metrics": {
            name: {p: by_pipeline[p].metrics.get(name) for p in sorted(by_pipeline)}
            for name in metric_names
        },
    }
    if "rotate" in by_pipeline and "smoothrot" in by_pipeline:
        closures = {}
        for name in ("logit_mse", "softmax_kl"):
            m_rot = by_pipeline["rotate"].metrics.get(name)
            m_srot = by_pipeline["smoothrot"].metrics.get(name)
            if m_rot is None or m_srot is None or m_rot == 0:
                continue
            closures[name] = (m_rot - m_srot) / m_rot
        table["gap_closure"] = closures
    return table


def sweep_alpha(cfg: ExperimentConfig) -> dict:
    """Evaluate the smoothing pipeline across the alpha grid.

    The model, calibration statistics, and evaluation stream are shared
    across grid points (they do not depend on alpha), and the rotate-only
    metric rides along as a constant reference column.
    """
    if not cfg.smoothing_enabled:
        raise ValueError("alpha sweep needs a smoothing pipeline (smooth or smoothrot)")
    grid = cfg.alpha_grid or DEFAULT_ALPHA_GRID
    base = build_experiment_model(cfg)
    stats = calibration_stats(cfg, base)
    eval_tokens = sample_tokens(
        Rng(cfg.seed).derive("eval"), cfg.eval_sequences, cfg.eval_seq_len, cfg.vocab_size
    )
    float_logits = model_forward(base, eval_tokens, None)
    fwd_quant = forward_quant_config(cfg)
    wq_cfg = weight_quant_config(cfg)

    def evaluate(model: TinyModel) -> float:
        if wq_cfg.weight_spec is not None:
            quantize_model_weights(model, wq_cfg, clip_cfg=ClipSearchConfig())
        logits = model_forward(model, eval_tokens, fwd_quant)
        return float(np.mean((logits.astype(np.float64) - float_logits.astype(np.float64)) ** 2))

    # Rotation-only run as the constant reference column, whatever the
    # candidate pipeline is.
    rotate_only = base.copy()
    fuse_rmsnorm(rotate_only)
    rotate_model(rotate_only, rotation_transform(cfg))
    rotate_metric = evaluate(rotate_only)

    rows = []
    best_alpha, best_metric = None, None
    for a in grid:
        candidate = base.copy()
        smooth_model(candidate, stats, float(a))
        if cfg.rotation_enabled:
            fuse_rmsnorm(candidate)
            rotate_model(candidate, rotation_transform(cfg))
        value = evaluate(candidate)
        rows.append({"alpha": float(a), "logit_mse": value, "rotate_logit_mse": rotate_metric})
        if best_metric is None or value < best_metric:
            best_alpha, best_metric = float(a), value
    return {
        "rows": rows,
        "best_alpha": best_alpha,
        "best_metric": best_metric,
        "rotate_metric": rotate_metric,
    }


def calib_source_ablation(cfg: ExperimentConfig, sources: list[str]) -> dict:
    """Smoothing-pipeline metric per calibration source vs the rotate-only baseline."""
    if not cfg.smoothing_enabled:
        raise ValueError("calibration ablation needs a smoothing pipeline")
    if len(sources) < 2:
        raise ValueError("need at least two calibration sources to compare")
    rotate_report = run_experiment(replace(cfg, pipeline="rotate"))
    baseline_metric = rotate_report.metrics["logit_mse"]
    rows = []
    for source in sources:
        src_cfg = replace(cfg, calib_source=source)
        report = run_experiment(src_cfg)
        metric = report.metrics["logit_mse"]
        rows.append(
            {
                "source": source,
                "logit_mse": metric,
                "rotate_logit_mse": baseline_metric,
                "beats_baseline": bool(metric < baseline_metric),
            }
        )
    return {"rows": rows, "rotate_metric": baseline_metric}


def report_without_timing(report_dict: dict) -> dict:
    """Copy of a report dict with volatile timing fields removed."""
    out = dict(report_dict)
    out.pop("timing", None)
    return out


def write_report(report: RunReport, out_dir) -> Path:
    """Write report.json (canonical key order) plus a plot-ready channel CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    csv_path = out / "down_channel_max.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "channel", "max_abs"])
        for layer, stats in report.down_proj.items():
            if layer == "overall":
                continue
            for channel, value in enumerate(stats.get("per_channel_max", [])):
                writer.writerow([layer, channel, repr(float(value))])
    return path


def write_sweep_csv(sweep: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["alpha", "logit_mse", "rotate_logit_mse"])
        writer.writeheader()
        for row in sweep["rows"]:
            writer.writerow(row)
