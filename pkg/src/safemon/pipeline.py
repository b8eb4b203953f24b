"""Serial monitoring pipeline and whole-dataset evaluation.

Deployment semantics (run_sample): monitors run in ODD, OOD, OMS order and
the first rejection stops processing. The two input monitors run before the
model, so a frame they reject never invokes the detector; output monitoring
runs on the detections the system would actually pass downstream (those at
or above the confidence threshold).

Analysis semantics (run_dataset): every monitor's individual decision and
the model's correctness are computed for every sample, which is what the
monitor-combination table and stage attribution need. The serial view is
assembled from the same decisions; by construction it matches what
run_sample would have decided frame by frame.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import metrics
from .detect import BBox, Detection, image_correct
from .errors import MissingTraceError
from .fsio import atomic_write_text, canonical_json
from .imaging import compute_meta_properties, read_image
from .odd import FlightMetadata, OddSpec, check_odd
from .oms import BoxAbstraction, check_oms
from .ood import OodModel, check_ood
from .traceio import CorruptionRecord, Manifest, TraceFile
from .verdict import Verdict

RESULTS_FORMAT = "safemon.results"
RESULTS_VERSION = 1


@dataclass(frozen=True, eq=False)
class Sample:
    """One evaluation frame: image (in memory or on disk), metadata, truth."""

    sample_id: str
    metadata: FlightMetadata
    gt_boxes: tuple[BBox, ...]
    threat: str | None = None
    corruption: CorruptionRecord | None = None
    image: np.ndarray | None = None
    image_path: Path | None = None

    def __post_init__(self):
        if not self.sample_id:
            raise ValueError("sample_id must be non-empty")
        if self.image is None and self.image_path is None:
            raise ValueError(f"{self.sample_id}: sample needs an image or an image path")

    def load_image(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        return read_image(self.image_path)


class Detector(Protocol):
    def detect(self, sample: Sample) -> list[tuple[Detection, np.ndarray]]: ...


class TraceDetector:
    """Replays recorded detections instead of running a model."""

    def __init__(self, trace: TraceFile):
        self.trace = trace

    def verify_coverage(self, samples: Sequence[Sample]) -> None:
        missing = [s.sample_id for s in samples if s.sample_id not in self.trace]
        if missing:
            raise MissingTraceError(missing)

    def detect(self, sample: Sample) -> list[tuple[Detection, np.ndarray]]:
        if sample.sample_id not in self.trace:
            raise MissingTraceError([sample.sample_id])
        return self.trace.by_id(sample.sample_id).pairs()


def samples_from_manifest(manifest: Manifest) -> list[Sample]:
    """Samples referencing manifest images by path; images load lazily."""
    return [
        Sample(
            sample_id=e.sample_id,
            metadata=e.metadata,
            gt_boxes=e.gt_boxes,
            threat=e.threat,
            corruption=e.corruption,
            image_path=manifest.image_path(e),
        )
        for e in manifest.entries
    ]


@dataclass(frozen=True)
class PipelineResult:
    """Serial outcome for one frame. verdicts holds only the stages that
    actually ran, in order. model_correct is None when an input monitor
    rejected the frame before the model was reached."""

    sample_id: str
    rejected: bool
    rejecting_stage: str | None
    verdicts: tuple[Verdict, ...]
    model_correct: bool | None
    detections: int | None


def _serial_result(
    sample_id: str,
    odd_v: Verdict,
    ood_v: Verdict | None,
    oms_v: Verdict | None,
    model_correct: bool | None,
    n_detections: int | None,
) -> PipelineResult:
    verdicts = [odd_v]
    if odd_v.rejected:
        return PipelineResult(sample_id, True, "ODD", tuple(verdicts), None, None)
    verdicts.append(ood_v)
    if ood_v.rejected:
        return PipelineResult(sample_id, True, "OOD", tuple(verdicts), None, None)
    verdicts.append(oms_v)
    if oms_v.rejected:
        return PipelineResult(sample_id, True, "OMS", tuple(verdicts), model_correct, n_detections)
    return PipelineResult(sample_id, False, None, tuple(verdicts), model_correct, n_detections)


def run_sample(
    sample: Sample,
    odd_spec: OddSpec,
    ood_model: OodModel,
    detector: Detector,
    abstraction: BoxAbstraction,
    tau_iou: float,
    tau_conf: float,
) -> PipelineResult:
    """Serial monitored inference on one frame, stopping at the first
    rejection. The detector is invoked only when both input monitors accept."""
    odd_v = check_odd(odd_spec, sample.metadata)
    if odd_v.rejected:
        return _serial_result(sample.sample_id, odd_v, None, None, None, None)
    ood_v = check_ood(ood_model, compute_meta_properties(sample.load_image()))
    if ood_v.rejected:
        return _serial_result(sample.sample_id, odd_v, ood_v, None, None, None)
    pairs = detector.detect(sample)
    kept = [(d, f) for d, f in pairs if d.confidence >= tau_conf]
    correct = image_correct([d for d, _ in kept], sample.gt_boxes, tau_iou, tau_conf)
    oms_v = check_oms(abstraction, kept)
    return _serial_result(sample.sample_id, odd_v, ood_v, oms_v, correct, len(kept))


@dataclass(frozen=True, eq=False)
class DatasetEvaluation:
    """Joint product of one evaluation run, ordered by sample id."""

    results: tuple[PipelineResult, ...]
    decisions: tuple[metrics.MonitorDecisions, ...]
    serial_report: metrics.SafetyReport
    combinations: list
    attribution: list

    def serial_rows(self) -> list[metrics.OutcomeRow]:
        return metrics.serial_rows(self.decisions)


def _evaluate_one(sample, odd_spec, ood_model, detector, abstraction, tau_iou, tau_conf):
    odd_v = check_odd(odd_spec, sample.metadata)
    ood_v = check_ood(ood_model, compute_meta_properties(sample.load_image()))
    pairs = detector.detect(sample)
    kept = [(d, f) for d, f in pairs if d.confidence >= tau_conf]
    correct = image_correct([d for d, _ in kept], sample.gt_boxes, tau_iou, tau_conf)
    oms_v = check_oms(abstraction, kept)
    return odd_v, ood_v, oms_v, correct, len(kept)


def run_dataset(
    samples: Sequence[Sample],
    odd_spec: OddSpec,
    ood_model: OodModel,
    detector: Detector,
    abstraction: BoxAbstraction,
    tau_iou: float,
    tau_conf: float,
    workers: int = 1,
) -> DatasetEvaluation:
    """Evaluate monitors and model on every sample.

    Unlike run_sample, all three monitor decisions and the model outcome are
    computed for each frame regardless of what the serial pipeline would
    short-circuit, because combination and attribution analyses need them.
    """
    samples = sorted(samples, key=lambda s: s.sample_id)
    if not samples:
        raise ValueError("cannot evaluate an empty sample list")
    verify = getattr(detector, "verify_coverage", None)
    if verify is not None:
        verify(samples)

    def one(sample):
        return _evaluate_one(
            sample, odd_spec, ood_model, detector, abstraction, tau_iou, tau_conf
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            evaluated = list(pool.map(one, samples))
    else:
        evaluated = [one(s) for s in samples]

    results = []
    decisions = []
    for sample, (odd_v, ood_v, oms_v, correct, n_kept) in zip(samples, evaluated):
        results.append(
            _serial_result(sample.sample_id, odd_v, ood_v, oms_v, correct, n_kept)
        )
        decisions.append(
            metrics.MonitorDecisions(
                sample_id=sample.sample_id,
                model_correct=correct,
                odd=odd_v.rejected,
                ood=ood_v.rejected,
                oms=oms_v.rejected,
            )
        )
    rows = metrics.serial_rows(decisions)
    return DatasetEvaluation(
        results=tuple(results),
        decisions=tuple(decisions),
        serial_report=metrics.evaluate(rows),
        combinations=metrics.combination_table(decisions),
        attribution=metrics.stage_attribution(rows),
    )


def write_results(results: Sequence[PipelineResult], path) -> None:
    """Per-sample results log (JSON lines, canonical form)."""
    lines = [
        canonical_json(
            {"format": RESULTS_FORMAT, "version": RESULTS_VERSION, "count": len(results)}
        )
    ]
    for r in results:
        obj = {
            "id": r.sample_id,
            "rejected": r.rejected,
            "stage": r.rejecting_stage,
            "model_correct": r.model_correct,
            "detections": r.detections,
            "verdicts": [
                {"stage": v.stage, "rejected": v.rejected, "reasons": list(v.reasons)}
                for v in r.verdicts
            ],
        }
        lines.append(canonical_json(obj))
    atomic_write_text(path, "\n".join(lines) + "\n")
