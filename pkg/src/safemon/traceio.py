"""Dataset manifests and detection traces on disk.

Both files are JSON-lines: a header line identifying format and version,
then one record per line in canonical JSON (sorted keys, no extra spaces),
so rewriting a loaded file reproduces it byte for byte.

Manifest: per-sample image path (relative to the manifest's directory,
forward slashes), flight metadata, ground-truth boxes, and optional threat
tag and corruption record.

Trace: per-sample detector outputs, each detection carrying its box, raw
confidence (no threshold applied at export time), integer label, and the
feature vector used by output monitoring.

Loaders validate everything and raise TraceIoError carrying the complete
list of violations rather than stopping at the first.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

import numpy as np

from .detect import BBox, Detection
from .errors import TraceIoError
from .fsio import atomic_write_text, canonical_json
from .imaging import CORRUPTION_KINDS, SEVERITIES, Corruption
from .odd import FlightMetadata

MANIFEST_FORMAT = "safemon.manifest"
TRACE_FORMAT = "safemon.trace"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class CorruptionRecord:
    """A corruption applied to a stored image, with the seed that produced it."""

    kind: str
    severity: int
    seed: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be one of {SEVERITIES}, got {self.severity}")

    @property
    def corruption(self) -> Corruption:
        return Corruption(kind=self.kind, severity=self.severity)


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    image: str
    metadata: FlightMetadata
    gt_boxes: tuple[BBox, ...]
    threat: str | None = None
    corruption: CorruptionRecord | None = None


@dataclass(frozen=True, eq=False)
class Manifest:
    name: str
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        index = {}
        for e in self.entries:
            if e.sample_id in index:
                raise ValueError(f"duplicate sample id {e.sample_id!r}")
            index[e.sample_id] = e
        object.__setattr__(self, "_index", index)

    def by_id(self, sample_id: str) -> ManifestEntry:
        return self._index[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / Path(PurePosixPath(entry.image))


@dataclass(frozen=True, eq=False)
class TraceRecord:
    sample_id: str
    detections: tuple[Detection, ...]
    features: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.detections) != len(self.features):
            raise ValueError(
                f"{self.sample_id}: {len(self.detections)} detections vs "
                f"{len(self.features)} features"
            )

    def pairs(self) -> list[tuple[Detection, np.ndarray]]:
        return list(zip(self.detections, self.features))


@dataclass(frozen=True, eq=False)
class TraceFile:
    model: str
    feature_dim: int
    records: tuple[TraceRecord, ...]

    def __post_init__(self):
        index = {}
        for r in self.records:
            if r.sample_id in index:
                raise ValueError(f"duplicate sample id {r.sample_id!r}")
            for f in r.features:
                if f.shape != (self.feature_dim,):
                    raise ValueError(
                        f"{r.sample_id}: feature shape {f.shape} does not match "
                        f"feature_dim {self.feature_dim}"
                    )
            index[r.sample_id] = r
        object.__setattr__(self, "_index", index)

    def by_id(self, sample_id: str) -> TraceRecord:
        return self._index[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index


def _read_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read().splitlines()


def _parse_header(lines, expected_format, violations):
    if not lines:
        violations.append("file is empty")
        return None
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        violations.append(f"line 1: invalid JSON header: {exc}")
        return None
    if not isinstance(header, dict) or header.get("format") != expected_format:
        violations.append(f"line 1: expected format {expected_format!r}")
        return None
    if header.get("version") != FORMAT_VERSION:
        violations.append(
            f"line 1: unsupported version {header.get('version')!r} "
            f"(supported: {FORMAT_VERSION})"
        )
        return None
    return header


def _check_keys(obj, required, optional, where, violations) -> bool:
    missing = sorted(required - obj.keys())
    unknown = sorted(obj.keys() - required - optional)
    if missing:
        violations.append(f"{where}: missing keys {', '.join(missing)}")
    if unknown:
        violations.append(f"{where}: unknown keys {', '.join(unknown)}")
    return not missing and not unknown


def _parse_bbox(raw, where, violations) -> BBox | None:
    if (
        not isinstance(raw, list)
        or len(raw) != 4
        or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in raw)
    ):
        violations.append(f"{where}: box must be [x_min, y_min, x_max, y_max]")
        return None
    try:
        return BBox(*(float(v) for v in raw))
    except ValueError as exc:
        violations.append(f"{where}: {exc}")
        return None


def load_manifest(path, check_images: bool = True) -> Manifest:
    path = Path(path)
    lines = _read_lines(path)
    violations: list[str] = []
    header = _parse_header(lines, MANIFEST_FORMAT, violations)
    if header is None:
        raise TraceIoError(violations)

    entries = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"line {lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            violations.append(f"{where}: invalid JSON: {exc}")
            continue
        if not isinstance(obj, dict):
            violations.append(f"{where}: record must be a JSON object")
            continue
        if not _check_keys(
            obj,
            {"id", "image", "metadata", "gt_boxes"},
            {"threat", "corruption"},
            where,
            violations,
        ):
            continue
        sample_id = obj["id"]
        if not isinstance(sample_id, str) or not sample_id:
            violations.append(f"{where}: id must be a non-empty string")
            continue
        where = f"line {lineno} (id {sample_id})"
        if sample_id in seen:
            violations.append(f"{where}: duplicate sample id")
            continue
        seen.add(sample_id)
        ok = True
        if not isinstance(obj["image"], str) or not obj["image"]:
            violations.append(f"{where}: image must be a non-empty path string")
            ok = False
        try:
            meta = FlightMetadata.from_mapping(obj["metadata"])
        except (TypeError, ValueError) as exc:
            violations.append(f"{where}: bad metadata: {exc}")
            ok = False
        boxes = []
        if not isinstance(obj["gt_boxes"], list):
            violations.append(f"{where}: gt_boxes must be a list")
            ok = False
        else:
            for bi, raw in enumerate(obj["gt_boxes"]):
                box = _parse_bbox(raw, f"{where} gt_boxes[{bi}]", violations)
                if box is None:
                    ok = False
                else:
                    boxes.append(box)
        threat = obj.get("threat")
        if threat is not None and (not isinstance(threat, str) or not threat):
            violations.append(f"{where}: threat must be a non-empty string")
            ok = False
        corr = None
        if "corruption" in obj:
            raw = obj["corruption"]
            if (
                not isinstance(raw, dict)
                or set(raw) != {"kind", "severity", "seed"}
            ):
                violations.append(f"{where}: corruption must have kind, severity, seed")
                ok = False
            else:
                try:
                    corr = CorruptionRecord(
                        kind=raw["kind"], severity=raw["severity"], seed=int(raw["seed"])
                    )
                except (TypeError, ValueError) as exc:
                    violations.append(f"{where}: bad corruption: {exc}")
                    ok = False
        if not ok:
            continue
        entry = ManifestEntry(
            sample_id=sample_id,
            image=obj["image"],
            metadata=meta,
            gt_boxes=tuple(boxes),
            threat=threat,
            corruption=corr,
        )
        if check_images and not (path.parent / Path(PurePosixPath(entry.image))).is_file():
            violations.append(f"{where}: image file {entry.image!r} not found")
            continue
        entries.append(entry)

    count = header.get("count")
    if isinstance(count, int) and not violations and count != len(entries):
        violations.append(f"header count {count} but {len(entries)} records present")
    if violations:
        raise TraceIoError(violations)
    return Manifest(name=str(header.get("name", "")), entries=tuple(entries), root=path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    lines = [
        canonical_json(
            {
                "format": MANIFEST_FORMAT,
                "version": FORMAT_VERSION,
                "name": manifest.name,
                "count": len(manifest.entries),
            }
        )
    ]
    for e in manifest.entries:
        obj = {
            "id": e.sample_id,
            "image": e.image,
            "metadata": e.metadata.to_mapping(),
            "gt_boxes": [b.as_list() for b in e.gt_boxes],
        }
        if e.threat is not None:
            obj["threat"] = e.threat
        if e.corruption is not None:
            obj["corruption"] = {
                "kind": e.corruption.kind,
                "severity": e.corruption.severity,
                "seed": e.corruption.seed,
            }
        lines.append(canonical_json(obj))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_trace(path) -> TraceFile:
    path = Path(path)
    lines = _read_lines(path)
    violations: list[str] = []
    header = _parse_header(lines, TRACE_FORMAT, violations)
    if header is None:
        raise TraceIoError(violations)
    feature_dim = header.get("feature_dim")
    if not isinstance(feature_dim, int) or feature_dim < 1:
        violations.append("line 1: feature_dim must be a positive integer")
        raise TraceIoError(violations)

    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"line {lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            violations.append(f"{where}: invalid JSON: {exc}")
            continue
        if not isinstance(obj, dict) or not _check_keys(
            obj, {"id", "detections"}, set(), where, violations
        ):
            continue
        sample_id = obj["id"]
        if not isinstance(sample_id, str) or not sample_id:
            violations.append(f"{where}: id must be a non-empty string")
            continue
        where = f"line {lineno} (id {sample_id})"
        if sample_id in seen:
            violations.append(f"{where}: duplicate sample id")
            continue
        seen.add(sample_id)
        if not isinstance(obj["detections"], list):
            violations.append(f"{where}: detections must be a list")
            continue
        dets = []
        feats = []
        ok = True
        for di, raw in enumerate(obj["detections"]):
            dwhere = f"{where} detections[{di}]"
            if not isinstance(raw, dict) or not _check_keys(
                raw, {"bbox", "conf", "label", "feature"}, set(), dwhere, violations
            ):
                ok = False
                continue
            box = _parse_bbox(raw["bbox"], dwhere, violations)
            if box is None:
                ok = False
                continue
            conf = raw["conf"]
            if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
                violations.append(f"{dwhere}: conf must be a number in [0, 1]")
                ok = False
                continue
            if not isinstance(raw["label"], int) or isinstance(raw["label"], bool):
                violations.append(f"{dwhere}: label must be an integer")
                ok = False
                continue
            feat = raw["feature"]
            if (
                not isinstance(feat, list)
                or len(feat) != feature_dim
                or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in feat)
            ):
                violations.append(
                    f"{dwhere}: feature must be a list of {feature_dim} finite numbers"
                )
                ok = False
                continue
            dets.append(Detection(bbox=box, confidence=float(conf), label=raw["label"]))
            feats.append(np.asarray(feat, dtype=np.float64))
        if not ok:
            continue
        records.append(
            TraceRecord(sample_id=sample_id, detections=tuple(dets), features=tuple(feats))
        )

    count = header.get("count")
    if isinstance(count, int) and not violations and count != len(records):
        violations.append(f"header count {count} but {len(records)} records present")
    if violations:
        raise TraceIoError(violations)
    return TraceFile(
        model=str(header.get("model", "")), feature_dim=feature_dim, records=tuple(records)
    )


def write_trace(trace: TraceFile, path) -> None:
    lines = [
        canonical_json(
            {
                "format": TRACE_FORMAT,
                "version": FORMAT_VERSION,
                "model": trace.model,
                "feature_dim": trace.feature_dim,
                "count": len(trace.records),
            }
        )
    ]
    for r in trace.records:
        dets = []
        for det, feat in zip(r.detections, r.features):
            dets.append(
                {
                    "bbox": det.bbox.as_list(),
                    "conf": det.confidence,
                    "label": det.label,
                    "feature": [float(v) for v in feat],
                }
            )
        lines.append(canonical_json({"id": r.sample_id, "detections": dets}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def trace_coverage(manifest: Manifest, trace: TraceFile) -> list[str]:
    """Sample ids present in the manifest but absent from the trace."""
    return [e.sample_id for e in manifest.entries if e.sample_id not in trace]
