"""Command line entry point: ``mmlc <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import SynthSpec, enumerate_samples, load_price_csv, load_synth_spec, split_dataset, synth_series, write_price_csv
from .encoders import downsample, encode_sample, export_matrix
from .errors import ConfigError, InputFormatError, NumericError
from .labeling import (
    LabelRuleConfig,
    apply_label_patch,
    class_distribution,
    label_samples,
    write_disagreement_report,
    write_label_file,
)


EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios need exactly three values")
    return parts


def _series_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="price CSV with header date,close")
    p.add_argument("--n", type=int, default=30, help="history length")
    p.add_argument("--horizon", type=int, default=10, help="prediction horizon H")


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="mmlc", description="Trend images, label correction and multi-task meta training.")
    root.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    root.add_argument("--config", help="experiment config JSON (train/eval/compare)")
    root.add_argument("--seed", type=int, help="override the training seed")
    root.add_argument("--threads", type=int, default=1, help="worker threads for per-task inner loops")
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split a series into noisy/clean/test segments")
    _series_args(p)
    p.add_argument("--ratios", type=_ratios, default=(0.6, 0.2, 0.2))
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic price series")
    p.add_argument("--spec", help="SynthSpec JSON (defaults if omitted)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("encode", help="write one image per sample")
    _series_args(p)
    p.add_argument("--encoder", choices=("sgaf", "srp", "gaf", "rp", "rrp"), default="sgaf")
    p.add_argument("--side", type=int, help="downsample to side x side before export")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")

    p = sub.add_parser("label", help="rule labels, clean-label agreement and disagreement report")
    _series_args(p)
    p.add_argument("--omega", type=float, default=1.0)
    p.add_argument("--theta", type=float, default=0.02)
    p.add_argument("--out", required=True, help="label file (k,label,agreed,source)")
    p.add_argument("--report", help="disagreement report CSV")
    p.add_argument("--patch", help="human overrides (k,label) applied to disagreements")

    p = sub.add_parser("train", help="run MMLC training and write report, checkpoint and history")
    p.add_argument("--tasks", type=_int_list, help="horizons, e.g. 10,13,15")
    p.add_argument("--encoder", choices=("sgaf", "srp"))
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write metrics JSON here instead of stdout")

    p = sub.add_parser("compare", help="MMLC against a noisy-label baseline")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--configs", type=int, default=20, help="random network configurations per check")
    return root


def _load_experiment(args):
    from .harness import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if getattr(args, "tasks", None):
        cfg.horizons = list(args.tasks)
    if getattr(args, "encoder", None):
        cfg.encoder = args.encoder
    cfg.__post_init__()
    return cfg


def cmd_split(args) -> int:
    series = load_price_csv(args.input)
    split = split_dataset(series, args.n, args.horizon, args.ratios)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bounds = (0, *split.boundaries, len(series))
    summary = {"ticker": series.ticker, "length": len(series), "boundaries": list(split.boundaries), "segments": {}}
    for name, lo, hi in zip(("noisy", "clean", "test"), bounds, bounds[1:]):
        part = dataclasses.replace(series, dates=series.dates[lo:hi], closes=series.closes[lo:hi])
        write_price_csv(part, out / f"{name}.csv")
        summary["segments"][name] = {"start": lo, "stop": hi, "samples": len(getattr(split, name))}
    (out / "split.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary["segments"]))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    series = synth_series(spec)
    write_price_csv(series, args.out)
    print(f"wrote {len(series)} prices to {args.out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    series = load_price_csv(args.input)
    samples = enumerate_samples(series, args.n, args.horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = encode_sample(s, args.encoder)
        if args.side:
            img = downsample(img, args.side)
        export_matrix(img, out / f"{series.ticker}_{args.encoder}_{s.k}.{args.format}", args.format)
    print(f"wrote {len(samples)} {args.encoder} images to {out}")
    return EXIT_OK


def cmd_label(args) -> int:
    series = load_price_csv(args.input)
    cfg = LabelRuleConfig(omega=args.omega, theta=args.theta)
    samples = enumerate_samples(series, args.n, args.horizon)
    mean_labels, barrier_labels, outcomes = label_samples(samples, cfg, args.horizon)
    ks = [s.k for s in samples]
    if args.patch:
        outcomes = apply_label_patch(ks, outcomes, args.patch)
    write_label_file(args.out, ks, outcomes)
    dist = class_distribution([o.label for o in outcomes])
    agreed = sum(o.agreed for o in outcomes)
    msg = {"samples": len(samples), "agreed": agreed, "counts": list(dist.counts)}
    if args.report:
        msg["disagreements"] = write_disagreement_report(args.report, ks, mean_labels, barrier_labels)
    print(json.dumps(msg))
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import run_experiment

    cfg = _load_experiment(args)
    report = run_experiment(cfg, args.out, threads=args.threads)
    for t in report["tasks"]:
        m = t["metrics"]
        print(f"H={t['horizon']:3d}  accuracy {m['accuracy']:.4f}  precision {m['precision_macro']:.4f}  f1 {m['f1_macro']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import evaluate_checkpoint

    cfg = _load_experiment(args)
    result = evaluate_checkpoint(cfg, args.checkpoint)
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    from .harness import compare_baseline

    cfg = _load_experiment(args)
    report = compare_baseline(cfg, args.out, threads=args.threads)
    for t in report["tasks"]:
        print(
            f"H={t['horizon']:3d}  baseline {t['baseline']['accuracy']:.4f}  "
            f"mmlc {t['mmlc']['accuracy']:.4f}  delta {t['delta']['accuracy']:+.4f}"
        )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    rows = run_suite(args.configs, seed=args.seed or 0)
    print(format_table(rows))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


COMMANDS = {
    "split": cmd_split,
    "synth": cmd_synth,
    "encode": cmd_encode,
    "label": cmd_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, InputFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # invalid domain values that reach a pure function (too-short series, bad ratios, ...)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
