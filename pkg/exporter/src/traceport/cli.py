"""Command line entry point.

One command, one job: point it at a checkpoint and a manifest and it writes
the trace. Options can come from a JSON config file, from flags, or both;
flags win. Exit codes follow the consuming toolkit's convention: 0 success,
1 usage error, 2 unusable input data, 3 unexpected failure.
"""

import argparse
import json
import sys
from pathlib import Path

from .errors import ExportDataError, ExportError, ExportUsageError
from .export import _CONFIG_KEYS, ExportConfig, ExportStats, export


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ExportUsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(
        prog="traceport",
        description="Run a torch detector checkpoint over a dataset manifest "
        "and write a detection trace with per-detection features.",
    )
    p.add_argument("--config", help="JSON file with any of the option keys; flags override it")
    p.add_argument("--checkpoint", help="TorchScript archive or pickled torch module")
    p.add_argument("--manifest", help="dataset manifest (jsonl)")
    p.add_argument("--out", help="trace file to write (jsonl)")
    p.add_argument(
        "--feature-point",
        help="where detection features come from: 'output.<key>' or 'module:<name>'",
    )
    p.add_argument("--model-name", help="model identifier for the trace header "
                   "(default: checkpoint file stem)")
    p.add_argument("--batch-size", type=int, help="images per inference batch (default 8)")
    p.add_argument("--device", help="torch device string (default cpu)")
    p.add_argument(
        "--feature-dim",
        type=int,
        help="feature width for the header when the export yields zero detections",
    )
    return p


def _load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ExportDataError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ExportDataError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ExportDataError(f"config {path} must hold a JSON object")
    unknown = sorted(set(obj) - _CONFIG_KEYS)
    if unknown:
        raise ExportDataError(f"config {path} has unknown keys: {', '.join(unknown)}")
    return obj


def _merge(args: argparse.Namespace) -> ExportConfig:
    merged: dict = {}
    if args.config:
        merged.update(_load_config_file(args.config))
    overrides = {
        "checkpoint": args.checkpoint,
        "manifest": args.manifest,
        "out": args.out,
        "feature_point": args.feature_point,
        "model_name": args.model_name,
        "batch_size": args.batch_size,
        "device": args.device,
        "feature_dim": args.feature_dim,
    }
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    missing = sorted(
        k for k in ("checkpoint", "manifest", "out", "feature_point") if k not in merged
    )
    if missing:
        raise ExportUsageError(
            "missing required options (flag or config): " + ", ".join(missing)
        )
    return ExportConfig(**merged)


def _print_stats(stats: ExportStats, out_path: str) -> None:
    print(f"model\t{stats.model}")
    print(f"samples\t{stats.samples}")
    print(f"detections\t{stats.detections}")
    print(f"feature_dim\t{stats.feature_dim}")
    print(f"wrote\t{out_path}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _merge(args)
        stats = export(cfg)
    except ExportUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ExportDataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - safety net for bug reports
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    _print_stats(stats, cfg.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
