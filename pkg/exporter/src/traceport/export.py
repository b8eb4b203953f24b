"""Run a detector checkpoint over a manifest and write the trace.

The export is intentionally dumb about thresholds: every detection the model
emits goes into the trace with its raw confidence, and downstream consumers
decide what to keep. Records appear in manifest order, one per sample id,
with features aligned index for index with the detections they describe.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ExportDataError, ExportUsageError
from .manifest import ImageRef, read_image_refs
from .model import FeaturePoint, HookCapture, load_detector
from .trace import ExportedDetection, ExportedRecord, write_trace

_CONFIG_KEYS = {
    "checkpoint",
    "manifest",
    "out",
    "feature_point",
    "model_name",
    "batch_size",
    "device",
    "feature_dim",
}


@dataclass(frozen=True)
class ExportConfig:
    """Everything one export run needs.

    feature_dim is only consulted when the whole run produces zero
    detections, in which case the trace header cannot infer the width of the
    feature rows it never saw.
    """

    checkpoint: str
    manifest: str
    out: str
    feature_point: str
    model_name: str | None = None
    batch_size: int = 8
    device: str = "cpu"
    feature_dim: int | None = None

    def __post_init__(self):
        if not isinstance(self.batch_size, int) or isinstance(self.batch_size, bool):
            raise ExportUsageError("batch_size must be an integer")
        if self.batch_size < 1:
            raise ExportUsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.feature_dim is not None:
            if not isinstance(self.feature_dim, int) or isinstance(self.feature_dim, bool):
                raise ExportUsageError("feature_dim must be an integer")
            if self.feature_dim < 1:
                raise ExportUsageError(f"feature_dim must be >= 1, got {self.feature_dim}")
        for name in ("checkpoint", "manifest", "out", "feature_point"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ExportUsageError(f"{name} must be a non-empty string")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExportConfig":
        if not isinstance(mapping, dict):
            raise ExportUsageError("config must be a JSON object")
        unknown = sorted(set(mapping) - _CONFIG_KEYS)
        if unknown:
            raise ExportUsageError(f"unknown config keys: {', '.join(unknown)}")
        missing = sorted(
            k for k in ("checkpoint", "manifest", "out", "feature_point") if k not in mapping
        )
        if missing:
            raise ExportUsageError(f"config is missing required keys: {', '.join(missing)}")
        return cls(**mapping)


@dataclass(frozen=True)
class ExportStats:
    samples: int
    detections: int
    feature_dim: int
    model: str


def _verify_images(refs: list[ImageRef]) -> None:
    """Cheap decode check over every image before any model work.

    Collects every broken sample id so one run reports the full damage.
    """
    bad: list[str] = []
    for ref in refs:
        try:
            with Image.open(ref.image_path) as img:
                img.verify()
        except (OSError, UnidentifiedImageError, SyntaxError):
            bad.append(ref.sample_id)
    if bad:
        raise ExportDataError(
            "manifest images missing or unreadable for sample ids: " + ", ".join(bad)
        )


def _load_image(ref: ImageRef) -> torch.Tensor:
    try:
        with Image.open(ref.image_path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise ExportDataError(f"sample {ref.sample_id!r}: cannot decode image: {exc}") from exc
    return torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def _batches(refs: list[ImageRef], batch_size: int):
    """Consecutive runs of refs, split at batch_size and at image-shape changes
    so each batch stacks into one tensor."""
    group: list[tuple[ImageRef, torch.Tensor]] = []
    for ref in refs:
        img = _load_image(ref)
        if group and (len(group) >= batch_size or group[-1][1].shape != img.shape):
            yield group
            group = []
        group.append((ref, img))
    if group:
        yield group


def _as_2d_feature(feats: torch.Tensor, where: str) -> torch.Tensor:
    if not isinstance(feats, torch.Tensor):
        raise ExportDataError(f"{where}: features must be a tensor, got {type(feats).__name__}")
    if feats.dim() != 2:
        raise ExportDataError(
            f"{where}: feature tensor must be 2-D (rows, dim), got shape "
            f"{tuple(feats.shape)}"
        )
    return feats.detach().cpu()


def _adapt_output(out, sample_id: str) -> dict:
    if not isinstance(out, dict):
        raise ExportDataError(
            f"sample {sample_id!r}: per-image model output must be a dict, "
            f"got {type(out).__name__}"
        )
    for key in ("boxes", "scores", "labels"):
        if key not in out:
            raise ExportDataError(f"sample {sample_id!r}: model output lacks {key!r}")
    return out


def _extract_detections(out: dict, sample_id: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    boxes = out["boxes"].detach().cpu()
    scores = out["scores"].detach().cpu()
    labels = out["labels"].detach().cpu()
    if boxes.dim() != 2 or boxes.shape[1] != 4:
        raise ExportDataError(
            f"sample {sample_id!r}: boxes must have shape (n, 4), got {tuple(boxes.shape)}"
        )
    n = boxes.shape[0]
    if scores.shape != (n,):
        raise ExportDataError(
            f"sample {sample_id!r}: scores shape {tuple(scores.shape)} does not match "
            f"{n} boxes"
        )
    if labels.shape != (n,):
        raise ExportDataError(
            f"sample {sample_id!r}: labels shape {tuple(labels.shape)} does not match "
            f"{n} boxes"
        )
    if labels.is_floating_point():
        raise ExportDataError(f"sample {sample_id!r}: labels must be integers")
    boxes_np = boxes.numpy().astype(np.float64)
    scores_np = scores.numpy().astype(np.float64)
    if not np.all(np.isfinite(boxes_np)):
        raise ExportDataError(f"sample {sample_id!r}: boxes contain non-finite values")
    if np.any(boxes_np[:, 0] >= boxes_np[:, 2]) or np.any(boxes_np[:, 1] >= boxes_np[:, 3]):
        raise ExportDataError(f"sample {sample_id!r}: boxes must satisfy min < max per axis")
    if not np.all(np.isfinite(scores_np)) or np.any(scores_np < 0.0) or np.any(scores_np > 1.0):
        raise ExportDataError(
            f"sample {sample_id!r}: scores must be finite values in [0, 1]; "
            "export writes raw confidences and cannot rescale logits"
        )
    return boxes_np, scores_np, labels.numpy().astype(np.int64)


def export(cfg: ExportConfig) -> ExportStats:
    """Run the checkpoint over every manifest image and write the trace."""
    point = FeaturePoint(cfg.feature_point)
    refs = read_image_refs(cfg.manifest)
    _verify_images(refs)

    try:
        device = torch.device(cfg.device)
    except RuntimeError as exc:
        raise ExportUsageError(f"bad device {cfg.device!r}: {exc}") from exc
    model = load_detector(cfg.checkpoint, device)
    model_name = cfg.model_name if cfg.model_name else Path(cfg.checkpoint).stem

    capture = HookCapture(model, point.name) if point.kind == "module" else None

    records: list[ExportedRecord] = []
    feature_dim: int | None = None
    total_dets = 0

    def run_batches():
        nonlocal feature_dim, total_dets
        for group in _batches(refs, cfg.batch_size):
            batch = torch.stack([img for _, img in group]).to(device)
            with torch.no_grad():
                outputs = model(batch)
            if not isinstance(outputs, (list, tuple)) or len(outputs) != len(group):
                raise ExportDataError(
                    f"model returned {type(outputs).__name__} of length "
                    f"{len(outputs) if isinstance(outputs, (list, tuple)) else 'n/a'} "
                    f"for a batch of {len(group)}; expected one output dict per image"
                )
            parsed = []
            for (ref, _), out in zip(group, outputs):
                out = _adapt_output(out, ref.sample_id)
                parsed.append((ref, out, _extract_detections(out, ref.sample_id)))
            counts = [boxes.shape[0] for _, _, (boxes, _, _) in parsed]

            if capture is not None:
                feats_batch = _as_2d_feature(
                    capture.take(), f"submodule {point.name!r} output"
                )
                if feats_batch.shape[0] != sum(counts):
                    raise ExportDataError(
                        f"submodule {point.name!r} produced {feats_batch.shape[0]} feature "
                        f"rows for a batch with {sum(counts)} detections; features must "
                        "align one row per detection"
                    )
                splits = torch.split(feats_batch, counts) if counts else []
            else:
                splits = None

            for bi, (ref, out, (boxes, scores, labels)) in enumerate(parsed):
                if splits is not None:
                    feats = splits[bi]
                else:
                    if point.name not in out:
                        raise ExportDataError(
                            f"sample {ref.sample_id!r}: model output has no "
                            f"{point.name!r} entry for the feature point"
                        )
                    feats = _as_2d_feature(
                        out[point.name], f"sample {ref.sample_id!r} output {point.name!r}"
                    )
                    if feats.shape[0] != counts[bi]:
                        raise ExportDataError(
                            f"sample {ref.sample_id!r}: {feats.shape[0]} feature rows for "
                            f"{counts[bi]} detections; features must align one row per "
                            "detection"
                        )
                feats_np = feats.numpy().astype(np.float64)
                if not np.all(np.isfinite(feats_np)):
                    raise ExportDataError(
                        f"sample {ref.sample_id!r}: features contain non-finite values"
                    )
                if counts[bi] > 0:
                    if feature_dim is None:
                        feature_dim = int(feats_np.shape[1])
                    elif feats_np.shape[1] != feature_dim:
                        raise ExportDataError(
                            f"sample {ref.sample_id!r}: feature width {feats_np.shape[1]} "
                            f"differs from earlier width {feature_dim}"
                        )
                dets = tuple(
                    ExportedDetection(
                        bbox=tuple(float(v) for v in boxes[di]),
                        conf=float(scores[di]),
                        label=int(labels[di]),
                        feature=tuple(float(v) for v in feats_np[di]),
                    )
                    for di in range(counts[bi])
                )
                total_dets += counts[bi]
                records.append(ExportedRecord(sample_id=ref.sample_id, detections=dets))

    if capture is not None:
        with capture:
            run_batches()
    else:
        run_batches()

    if feature_dim is None:
        if cfg.feature_dim is None:
            raise ExportDataError(
                "export produced no detections at all, so the feature width cannot "
                "be inferred; pass feature_dim explicitly"
            )
        feature_dim = cfg.feature_dim
    elif cfg.feature_dim is not None and cfg.feature_dim != feature_dim:
        raise ExportDataError(
            f"configured feature_dim {cfg.feature_dim} does not match the model's "
            f"observed feature width {feature_dim}"
        )

    write_trace(cfg.out, model_name, feature_dim, records)
    return ExportStats(
        samples=len(records),
        detections=total_dets,
        feature_dim=feature_dim,
        model=model_name,
    )
