"""Experiment command line.

Subcommands: ``gen`` (build + outlier injection -> model archive),
``calibrate`` (-> stats archive), ``transform``, ``quantize``, ``eval``,
``run`` (end-to-end from a config file), ``sweep-alpha``, ``ablate-calib``,
and ``report`` (merge/compare). Exit codes: 0 success, 1 config error,
2 runtime error, 3 acceptance-check failure (``run --check``).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, build_config, parse_config_file
from .harness import (
    INVARIANCE_TOL,
    ExperimentError,
    RunReport,
    calib_source_ablation,
    compare_variants,
    forward_quant_config,
    logit_metrics,
    rotation_transform,
    run_experiment,
    sample_tokens,
    sweep_alpha,
    weight_quant_config,
    write_report,
    write_sweep_csv,
)
from .model import fuse_rmsnorm, load_model, model_forward, rotate_model, save_model
from .harness import build_experiment_model
from .numerics import Rng
from .smoothing import collect_act_stats, load_stats, save_stats, smooth_model
from .weight_quant import ClipSearchConfig, quantize_model_weights


class CheckFailure(RuntimeError):
    """An acceptance check requested via ``run --check`` did not hold."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise ConfigError(message)


def _load_config(args, **forced):
    overrides = parse_config_file(args.config) if args.config else {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for key, value in forced.items():
        if value is not None:
            overrides[key] = value
    return build_config(overrides)


def _write_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _cmd_gen(args) -> int:
    cfg = _load_config(args)
    model = build_experiment_model(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "model.tarc"
    save_model(model, path)
    print(f"wrote {path}")
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    model = load_model(args.model)
    tokens = sample_tokens(
        Rng(cfg.seed).derive(f"calib:{cfg.calib_source}"),
        cfg.calib_sequences,
        cfg.calib_seq_len,
        model.vocab_size,
        cfg.calib_source if cfg.calib_source != "archive" else "synthetic",
    )
    stats = collect_act_stats(model, tokens, source=cfg.calib_source)
    save_stats(stats, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_transform(args) -> int:
    cfg = _load_config(args, pipeline=args.pipeline, alpha=args.alpha)
    model = load_model(args.model)
    if cfg.smoothing_enabled:
        if args.calib:
            stats = load_stats(args.calib)
        else:
            tokens = sample_tokens(
                Rng(cfg.seed).derive(f"calib:{cfg.calib_source}"),
                cfg.calib_sequences,
                cfg.calib_seq_len,
                model.vocab_size,
                cfg.calib_source,
            )
            stats = collect_act_stats(model, tokens, source=cfg.calib_source)
        smooth_model(model, stats, cfg.alpha)
    if cfg.rotation_enabled:
        fuse_rmsnorm(model)
        rotate_model(model, rotation_transform(cfg, hidden_dim=model.hidden_dim))
    save_model(model, args.out)
    print(f"wrote {args.out} (state {model.transform_state})")
    return 0


def _cmd_quantize(args) -> int:
    cfg = _load_config(args, weight_method=args.weights, weight_bits=args.bits)
    model = load_model(args.model)
    wq = weight_quant_config(cfg)
    calib_tokens = None
    if cfg.weight_method == "gptq":
        calib_tokens = sample_tokens(
            Rng(cfg.seed).derive("gptq"), cfg.gptq_sequences, cfg.gptq_seq_len,
            model.vocab_size,
        )
    report = quantize_model_weights(
        model,
        wq,
        clip_cfg=ClipSearchConfig(),
        calib_tokens=calib_tokens,
        damping=cfg.gptq_damping,
        block_size=cfg.gptq_block_size,
    )
    save_model(model, args.out)
    report_path = Path(str(args.out) + ".quant.json")
    _write_json({"weights": report}, report_path)
    print(f"wrote {args.out} and {report_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = load_model(args.model)
    reference = load_model(args.reference)
    tokens = sample_tokens(
        Rng(cfg.seed).derive("eval"), cfg.eval_sequences, cfg.eval_seq_len,
        model.vocab_size,
    )
    float_logits = model_forward(reference, tokens, None)
    quant_logits = model_forward(model, tokens, forward_quant_config(cfg))
    metrics = logit_metrics(quant_logits, float_logits)
    _write_json({"metrics": metrics}, Path(args.out))
    print(f"wrote {args.out}")
    return 0


def _run_checks(report: RunReport) -> None:
    inv = report.metrics.get("float_invariance_rel_inf")
    if inv is None:
        raise CheckFailure("missing float_invariance_rel_inf metric")
    if inv > INVARIANCE_TOL:
        raise CheckFailure(
            f"float-mode invariance violated: rel-inf error {inv:.3g} > {INVARIANCE_TOL}"
        )
    for name in ("logit_mse", "logit_rel_inf", "softmax_kl"):
        if name not in report.metrics:
            raise CheckFailure(f"metric {name} missing from report")
    if report.partial:
        raise CheckFailure("report is partial")


def _cmd_run(args) -> int:
    cfg = _load_config(args, pipeline=args.pipeline, alpha=args.alpha)
    out_dir = args.out or cfg.output_dir
    try:
        report = run_experiment(cfg)
    except ExperimentError as exc:
        if out_dir:
            write_report(exc.report, out_dir)
        raise
    if out_dir:
        path = write_report(report, out_dir)
        print(f"wrote {path}")
    print(
        f"pipeline={report.pipeline} logit_mse={report.metrics['logit_mse']:.6g} "
        f"invariance={report.metrics['float_invariance_rel_inf']:.3g}"
    )
    if args.check:
        _run_checks(report)
        print("checks passed")
    return 0


def _cmd_sweep_alpha(args) -> int:
    cfg = _load_config(args)
    if cfg.pipeline not in ("smooth", "smoothrot"):
        cfg = replace(cfg, pipeline="smoothrot")
    sweep = sweep_alpha(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(sweep, out / "alpha_sweep.json")
    write_sweep_csv(sweep, out / "alpha_sweep.csv")
    print(f"best_alpha={sweep['best_alpha']} (metric {sweep['best_metric']:.6g}, "
          f"rotate {sweep['rotate_metric']:.6g}); wrote {out / 'alpha_sweep.csv'}")
    return 0


def _cmd_ablate_calib(args) -> int:
    cfg = _load_config(args)
    if cfg.pipeline not in ("smooth", "smoothrot"):
        cfg = replace(cfg, pipeline="smoothrot")
    sources = [s.strip() for s in args.sources.split(",") if s.strip()]
    table = calib_source_ablation(cfg, sources)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(table, out / "calib_ablation.json")
    for row in table["rows"]:
        print(
            f"source={row['source']} logit_mse={row['logit_mse']:.6g} "
            f"beats_rotate={row['beats_baseline']}"
        )
    return 0


def _cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        payload = json.loads(Path(path).read_text())
        reports.append(RunReport.from_dict(payload))
    table = compare_variants(reports)
    if args.out:
        _write_json(table, Path(args.out))
        print(f"wrote {args.out}")
    else:
        print(json.dumps(table, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smoothrot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.set_defaults(func=func)
        return p

    p = add("gen", _cmd_gen, help="build a model (with outlier circuit) and archive it")
    p.add_argument("--out", required=True, help="output directory")

    p = add("calibrate", _cmd_calibrate, help="collect per-channel activation maxima")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="stats archive path")

    p = add("transform", _cmd_transform, help="apply a pipeline variant to a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pipeline", choices=["baseline", "smooth", "rotate", "smoothrot"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--calib", help="stats archive from `calibrate`")

    p = add("quantize", _cmd_quantize, help="quantize projection weights in place")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", choices=["rtn", "gptq"])
    p.add_argument("--bits", type=int)

    p = add("eval", _cmd_eval, help="compare a model against a float reference")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)

    p = add("run", _cmd_run, help="end-to-end experiment from a config file")
    p.add_argument("--out", help="report directory (defaults to config output_dir)")
    p.add_argument("--pipeline", choices=["baseline", "smooth", "rotate", "smoothrot"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--check", action="store_true", help="fail (exit 3) on invariance violations")

    p = add("sweep-alpha", _cmd_sweep_alpha, help="migration-strength sweep with rotate baseline")
    p.add_argument("--out", required=True)

    p = add("ablate-calib", _cmd_ablate_calib, help="compare calibration sources")
    p.add_argument("--sources", default="synthetic,random-tokens")
    p.add_argument("--out", required=True)

    p = add("report", _cmd_report, help="merge/compare run reports")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 3
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
