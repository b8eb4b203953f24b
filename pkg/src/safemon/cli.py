"""Command-line interface.

Subcommands cover the full workflow: gen (synthetic dataset + stub trace),
corrupt (degraded copies of a dataset), fit-ood and fit-oms (train the two
learned monitors), calibrate (confidence threshold), evaluate (run monitors
plus model over a dataset), and report (human- and machine-readable tables
from an evaluation summary).

A JSON run file passed as --config supplies per-command defaults; explicit
flags override it. Outputs carry the resolved configuration, including every
seed, and contain no timestamps, so re-running a command reproduces its
output files byte for byte.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import detect, metrics, oms, ood, pipeline, synth, traceio
from .errors import DataError
from .fsio import atomic_write_text, canonical_json
from .imaging import CORRUPTION_KINDS, SEVERITIES, Corruption, compute_meta_properties
from .odd import default_approach_cone, load_odd_spec


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path, command: str) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config {path}: top level must be an object")
    section = cfg.get(command, {})
    if not isinstance(section, dict):
        raise DataError(f"config {path}: section {command!r} must be an object")
    return section


class Options:
    """Flag values with config-file fallback: flags win, then the config
    section for this command, then the built-in default."""

    def __init__(self, args: argparse.Namespace, command: str):
        self.args = args
        self.section = _load_config(getattr(args, "config", None), command)

    def get(self, key: str, default=None):
        v = getattr(self.args, key, None)
        if v is not None:
            return v
        if key in self.section:
            return self.section[key]
        return default

    def require(self, key: str):
        v = self.get(key)
        if v is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
        return v


def _tuple_fields(cls) -> set[str]:
    return {
        f.name
        for f in dataclasses.fields(cls)
        if "tuple" in str(f.type)
    }


def _config_from_json(cls, data: dict, what: str):
    if not isinstance(data, dict):
        raise DataError(f"{what} config must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(cls)} - {"cone"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise DataError(f"{what} config has unknown keys: {', '.join(unknown)}")
    kwargs = {}
    tuples = _tuple_fields(cls)
    for k, v in data.items():
        kwargs[k] = tuple(v) if k in tuples and isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad {what} config: {exc}") from exc


def _load_json_file(path, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{what} file {path} not found")
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} file {path}: invalid JSON: {exc}") from exc


def _scene_config(opts: Options) -> tuple[synth.SceneConfig, dict]:
    path = opts.get("scene")
    data = _load_json_file(path, "scene") if path else {}
    cfg = _config_from_json(synth.SceneConfig, data, "scene")
    echo = dataclasses.asdict(cfg)
    echo.pop("cone")
    return cfg, echo


def _stub_config(opts: Options) -> tuple[synth.StubDetectorConfig, dict]:
    path = opts.get("stub")
    data = _load_json_file(path, "stub") if path else {}
    cfg = _config_from_json(synth.StubDetectorConfig, data, "stub")
    return cfg, dataclasses.asdict(cfg)


def _write_run_config(out_dir: Path, payload: dict) -> None:
    atomic_write_text(out_dir / "run.json", canonical_json(payload) + "\n")


def _cmd_gen(opts: Options) -> int:
    out_dir = Path(opts.require("out"))
    n = int(opts.require("n"))
    seed = int(opts.require("seed"))
    name = str(opts.get("name", "synth"))
    image_format = str(opts.get("image_format", "ppm"))
    stub_seed = int(opts.get("stub_seed", seed))
    model_name = str(opts.get("model_name", "stub"))
    scene_cfg, scene_echo = _scene_config(opts)
    stub_cfg, stub_echo = _stub_config(opts)

    samples = synth.generate_dataset(scene_cfg, n, seed, name=name)
    synth.export_dataset(samples, out_dir, name, image_format=image_format)
    trace = synth.build_trace(samples, stub_cfg, stub_seed, model=model_name)
    traceio.write_trace(trace, out_dir / "trace.jsonl")
    _write_run_config(
        out_dir,
        {
            "command": "gen",
            "n": n,
            "seed": seed,
            "name": name,
            "image_format": image_format,
            "stub_seed": stub_seed,
            "model_name": model_name,
            "scene": scene_echo,
            "stub": stub_echo,
        },
    )
    print(f"generated {n} samples in {out_dir}")
    return 0


def _cmd_corrupt(opts: Options) -> int:
    manifest_path = Path(opts.require("manifest"))
    kind = str(opts.require("kind"))
    severity = int(opts.require("severity"))
    seed = int(opts.require("seed"))
    out_dir = Path(opts.require("out"))
    image_format = str(opts.get("image_format", "ppm"))

    manifest = traceio.load_manifest(manifest_path)
    corruption = Corruption(kind=kind, severity=severity)
    synth.corrupt_manifest(manifest, corruption, seed, out_dir, image_format=image_format)
    _write_run_config(
        out_dir,
        {
            "command": "corrupt",
            "manifest": str(manifest_path),
            "kind": kind,
            "severity": severity,
            "seed": seed,
            "image_format": image_format,
        },
    )
    print(f"corrupted {len(manifest.entries)} images into {out_dir}")
    return 0


def _property_matrix(manifest: traceio.Manifest) -> np.ndarray:
    samples = pipeline.samples_from_manifest(manifest)
    rows = [compute_meta_properties(s.load_image()).as_array() for s in samples]
    return np.stack(rows)


def _cmd_fit_ood(opts: Options) -> int:
    manifest_path = Path(opts.require("manifest"))
    q = float(opts.get("q", 0.01))
    out = Path(opts.require("out"))
    manifest = traceio.load_manifest(manifest_path)
    model = ood.fit_ood(_property_matrix(manifest), q)
    ood.save_ood_model(model, out)
    print(f"fitted ood model on {len(manifest.entries)} samples -> {out}")
    return 0


def _paired_traces(manifest: traceio.Manifest, trace: traceio.TraceFile):
    missing = traceio.trace_coverage(manifest, trace)
    if missing:
        from .errors import MissingTraceError

        raise MissingTraceError(missing)
    return [
        (trace.by_id(e.sample_id).pairs(), list(e.gt_boxes)) for e in manifest.entries
    ]


def _cmd_fit_oms(opts: Options) -> int:
    manifest_path = Path(opts.require("manifest"))
    trace_path = Path(opts.require("trace"))
    tau_iou = float(opts.get("tau_iou", 0.7))
    tau_conf = float(opts.get("tau_conf", 0.0))
    k = int(opts.get("k", 8))
    epsilon = float(opts.get("epsilon", 0.0))
    seed = int(opts.require("seed"))
    out = Path(opts.require("out"))

    manifest = traceio.load_manifest(manifest_path)
    trace = traceio.load_trace(trace_path)
    abstraction = oms.fit_oms(
        _paired_traces(manifest, trace), tau_iou, k, epsilon, seed, tau_conf=tau_conf
    )
    oms.save_abstraction(abstraction, out)
    print(f"fitted {abstraction.k} boxes in {abstraction.dim}-d feature space -> {out}")
    return 0


def _cmd_calibrate(opts: Options) -> int:
    manifest_path = Path(opts.require("manifest"))
    trace_path = Path(opts.require("trace"))
    tau_iou = float(opts.get("tau_iou", 0.7))
    out = Path(opts.require("out"))

    manifest = traceio.load_manifest(manifest_path)
    trace = traceio.load_trace(trace_path)
    validation = []
    for e in manifest.entries:
        if e.sample_id not in trace:
            from .errors import MissingTraceError

            raise MissingTraceError([e.sample_id])
        validation.append((list(trace.by_id(e.sample_id).detections), list(e.gt_boxes)))
    result = detect.calibrate_conf_threshold(validation, tau_iou)
    if result.no_detections:
        print("warning: validation trace has no detections; threshold is 0", file=sys.stderr)
    payload = {
        "tau_conf": result.threshold,
        "f1": result.f1,
        "tau_iou": tau_iou,
        "no_detections": result.no_detections,
    }
    atomic_write_text(out, canonical_json(payload) + "\n")
    print(f"calibrated tau_conf={result.threshold:.6g} (f1={result.f1:.4f}) -> {out}")
    return 0


def _resolve_tau_conf(opts: Options) -> float:
    calib = opts.get("calibration")
    tau_conf = opts.get("tau_conf")
    if calib is not None and tau_conf is not None:
        raise UsageError("--tau-conf and --calibration are mutually exclusive")
    if calib is not None:
        data = _load_json_file(calib, "calibration")
        if "tau_conf" not in data:
            raise DataError(f"calibration file {calib} lacks tau_conf")
        return float(data["tau_conf"])
    if tau_conf is not None:
        return float(tau_conf)
    return 0.0


def _cmd_evaluate(opts: Options) -> int:
    manifest_path = Path(opts.require("manifest"))
    out_dir = Path(opts.require("out"))
    mode = str(opts.get("mode", "serial"))
    if mode not in ("serial", "combinations", "attribution"):
        raise UsageError(f"unknown mode {mode!r}")
    tau_iou = float(opts.get("tau_iou", 0.7))
    tau_conf = _resolve_tau_conf(opts)
    workers = int(opts.get("workers", 1))

    trace_path = opts.get("trace")
    stub_path = opts.get("stub")
    if (trace_path is None) == (stub_path is None):
        raise UsageError("need exactly one detector source: --trace or --stub")

    manifest = traceio.load_manifest(manifest_path)
    samples = pipeline.samples_from_manifest(manifest)

    config_echo = {
        "command": "evaluate",
        "manifest": str(manifest_path),
        "mode": mode,
        "tau_iou": tau_iou,
        "tau_conf": tau_conf,
        "workers": workers,
    }
    if trace_path is not None:
        detector = pipeline.TraceDetector(traceio.load_trace(Path(trace_path)))
        config_echo["trace"] = str(trace_path)
    else:
        stub_seed = int(opts.require("stub_seed"))
        stub_cfg, stub_echo = _stub_config(opts)
        detector = synth.StubDetector(stub_cfg, stub_seed)
        config_echo["stub"] = stub_echo
        config_echo["stub_seed"] = stub_seed

    odd_path = opts.get("odd_spec")
    odd_spec = load_odd_spec(odd_path) if odd_path else default_approach_cone()
    config_echo["odd_spec"] = str(odd_path) if odd_path else "builtin:approach_cone"
    ood_model = ood.load_ood_model(Path(opts.require("ood_model")))
    config_echo["ood_model"] = str(opts.get("ood_model"))
    abstraction = oms.load_abstraction(Path(opts.require("oms_model")))
    config_echo["oms_model"] = str(opts.get("oms_model"))

    evaluation = pipeline.run_dataset(
        samples, odd_spec, ood_model, detector, abstraction, tau_iou, tau_conf, workers=workers
    )
    pipeline.write_results(evaluation.results, out_dir / "results.jsonl")
    summary = {
        "config": config_echo,
        "serial": evaluation.serial_report.as_dict(),
        "attribution": [c.as_dict() for c in evaluation.attribution],
    }
    if mode == "combinations":
        summary["combinations"] = [
            {"monitors": list(subset), **report.as_dict()}
            for subset, report in evaluation.combinations
        ]
    atomic_write_text(out_dir / "summary.json", canonical_json(summary) + "\n")
    r = evaluation.serial_report
    print(
        f"evaluated n={r.n}: SG={r.safety_gain:.4f} RH={r.residual_hazard:.4f} "
        f"AC={r.availability_cost:.4f}"
    )
    return 0


def _cmd_report(opts: Options) -> int:
    summary_path = Path(opts.require("summary"))
    out_dir = Path(opts.require("out"))
    sep = {"tsv": "\t", "csv": ","}[str(opts.get("table_format", "tsv"))]
    summary = _load_json_file(summary_path, "summary")
    for key in ("serial", "attribution"):
        if key not in summary:
            raise DataError(f"summary file lacks section {key!r}")

    report_doc = {"serial": summary["serial"], "attribution": summary["attribution"]}

    contribs = [
        metrics.StageContribution(
            stage=c["stage"],
            caught=c["caught"],
            false_alarms=c["false_alarms"],
            n=summary["serial"]["n"],
        )
        for c in summary["attribution"]
    ]
    attribution_text = metrics.format_attribution(contribs, sep)
    ext = "tsv" if sep == "\t" else "csv"
    atomic_write_text(out_dir / f"attribution.{ext}", attribution_text)
    sys.stdout.write(attribution_text)

    if "combinations" in summary:
        table = [
            (
                tuple(row["monitors"]),
                metrics.SafetyReport(
                    n=row["n"],
                    caught=row["caught"],
                    missed=row["missed"],
                    false_alarms=row["false_alarms"],
                ),
            )
            for row in summary["combinations"]
        ]
        table_text = metrics.format_combination_table(table, sep)
        atomic_write_text(out_dir / f"combination_table.{ext}", table_text)
        sys.stdout.write(table_text)
        report_doc["combination_table"] = [
            {"monitors": metrics.subset_label(subset), **report.as_dict()}
            for subset, report in table
        ]

    atomic_write_text(out_dir / "report.json", canonical_json(report_doc) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safemon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run file with per-command defaults")
        return p

    p = add("gen", "generate a synthetic dataset, manifest and stub trace")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--name")
    p.add_argument("--image-format", dest="image_format", choices=("ppm", "png"))
    p.add_argument("--scene", help="JSON file with scene config overrides")
    p.add_argument("--stub", help="JSON file with stub detector config")
    p.add_argument("--stub-seed", dest="stub_seed", type=int)
    p.add_argument("--model-name", dest="model_name")

    p = add("corrupt", "apply a corruption to every image of a dataset")
    p.add_argument("--manifest")
    p.add_argument("--kind", choices=CORRUPTION_KINDS)
    p.add_argument("--severity", type=int, choices=SEVERITIES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--image-format", dest="image_format", choices=("ppm", "png"))

    p = add("fit-ood", "fit the appearance monitor from a dataset")
    p.add_argument("--manifest")
    p.add_argument("--q", type=float)
    p.add_argument("--out")

    p = add("fit-oms", "fit the output-feature monitor from a dataset and trace")
    p.add_argument("--manifest")
    p.add_argument("--trace")
    p.add_argument("--tau-iou", dest="tau_iou", type=float)
    p.add_argument("--tau-conf", dest="tau_conf", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("calibrate", "pick the confidence threshold maximizing F1")
    p.add_argument("--manifest")
    p.add_argument("--trace")
    p.add_argument("--tau-iou", dest="tau_iou", type=float)
    p.add_argument("--out")

    p = add("evaluate", "run monitors and model over a dataset")
    p.add_argument("--manifest")
    p.add_argument("--trace")
    p.add_argument("--stub", help="JSON file with stub detector config")
    p.add_argument("--stub-seed", dest="stub_seed", type=int)
    p.add_argument("--odd-spec", dest="odd_spec")
    p.add_argument("--ood-model", dest="ood_model")
    p.add_argument("--oms-model", dest="oms_model")
    p.add_argument("--tau-iou", dest="tau_iou", type=float)
    p.add_argument("--tau-conf", dest="tau_conf", type=float)
    p.add_argument("--calibration", help="calibration JSON from the calibrate command")
    p.add_argument("--mode", choices=("serial", "combinations", "attribution"))
    p.add_argument("--workers", type=int)
    p.add_argument("--out")

    p = add("report", "format tables from an evaluation summary")
    p.add_argument("--summary")
    p.add_argument("--out")
    p.add_argument("--table-format", dest="table_format", choices=("tsv", "csv"))

    return parser


_COMMANDS = {
    "gen": _cmd_gen,
    "corrupt": _cmd_corrupt,
    "fit-ood": _cmd_fit_ood,
    "fit-oms": _cmd_fit_oms,
    "calibrate": _cmd_calibrate,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = Options(args, args.command)
        return _COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"safemon: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"safemon: data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"safemon: internal error: {exc!r}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
