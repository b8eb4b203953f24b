"""Trace file writing.

Produces the same on-disk form the evaluation toolkit reads: one JSON object
per line with sorted keys and compact separators, a header line carrying the
model identifier, feature dimension and record count, then one record per
sample in manifest order. Writes go through a temp file and rename so a
crashed export never leaves a truncated trace behind.
"""

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TRACE_FORMAT = "safemon.trace"
TRACE_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


@dataclass(frozen=True)
class ExportedDetection:
    """One detection with its feature row, ready for serialization."""

    bbox: tuple[float, float, float, float]
    conf: float
    label: int
    feature: tuple[float, ...]


@dataclass(frozen=True)
class ExportedRecord:
    sample_id: str
    detections: tuple[ExportedDetection, ...]


def write_trace(
    path: str | Path,
    model: str,
    feature_dim: int,
    records: list[ExportedRecord],
) -> None:
    lines = [
        canonical_json(
            {
                "format": TRACE_FORMAT,
                "version": TRACE_VERSION,
                "model": model,
                "feature_dim": feature_dim,
                "count": len(records),
            }
        )
    ]
    for rec in records:
        dets = []
        for det in rec.detections:
            dets.append(
                {
                    "bbox": [float(v) for v in det.bbox],
                    "conf": float(det.conf),
                    "label": int(det.label),
                    "feature": [float(v) for v in det.feature],
                }
            )
        lines.append(canonical_json({"id": rec.sample_id, "detections": dets}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def check_finite(values: np.ndarray, what: str, sample_id: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"sample {sample_id!r}: {what} contains non-finite values")
