"""Synthetic evaluation harness.

Generates small rendered approach scenes (textured background plus one
bright convex quadrilateral target), flight metadata sampled inside or
outside the operating envelope, and a stub detector with programmable
failure modes. Threat labels say what each sample is designed to exercise:

- nominal: in-domain scene, in-envelope metadata.
- odd_violation: scene is fine, one metadata parameter leaves its interval.
- ood_threat: metadata is fine, the image appearance is shifted (bright
  wash) away from the nominal distribution.
- id_error: scene and metadata are fine, the stub detector is forced to
  fail, so only output monitoring can catch it.

Everything is a pure function of its config and seed. The stub detector
also reacts to corruption records on a sample by scaling its failure
probabilities with severity, which is how corruption studies couple image
degradation to model degradation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detect import BBox, Detection, iou
from .imaging import Corruption, apply_corruption, quantize, write_image
from .odd import ODD_FIELDS, FlightMetadata, OddSpec, default_approach_cone
from .pipeline import Sample
from .traceio import (
    CorruptionRecord,
    Manifest,
    ManifestEntry,
    TraceFile,
    TraceRecord,
    write_manifest,
    write_trace,
)

THREAT_NOMINAL = "nominal"
THREAT_ODD = "odd_violation"
THREAT_OOD = "ood_threat"
THREAT_ID_ERROR = "id_error"
THREAT_LABELS = (THREAT_NOMINAL, THREAT_ODD, THREAT_OOD, THREAT_ID_ERROR)


def stable_seed(*parts) -> int:
    """Platform-stable 63-bit seed derived from the given parts."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "big") >> 1


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    target_scale: tuple[float, float] = (0.22, 0.40)
    target_aspect: tuple[float, float] = (1.8, 3.0)
    target_brightness: tuple[float, float] = (0.78, 0.94)
    background_level: tuple[float, float] = (0.20, 0.55)
    background_texture: tuple[float, float] = (0.04, 0.10)
    ood_background_level: tuple[float, float] = (0.80, 0.97)
    threat_fractions: dict[str, float] = field(
        default_factory=lambda: {THREAT_NOMINAL: 1.0}
    )
    cone: OddSpec | None = None

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValueError("scene must be at least 32x32 pixels")
        unknown = sorted(set(self.threat_fractions) - set(THREAT_LABELS))
        if unknown:
            raise ValueError(f"unknown threat labels: {', '.join(unknown)}")
        if any(v < 0 for v in self.threat_fractions.values()):
            raise ValueError("threat fractions must be non-negative")
        total = sum(self.threat_fractions.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"threat fractions must sum to 1, got {total}")

    def resolve_cone(self) -> OddSpec:
        return self.cone if self.cone is not None else default_approach_cone()


@dataclass(frozen=True)
class StubDetectorConfig:
    """Failure program for the stub detector.

    p_fn misses the target, p_fp adds a spurious box, p_shift displaces the
    predicted box enough to break the IoU match. corruption_sensitivity
    scales all three with corruption severity:
    p_eff = min(1, p * (1 + corruption_sensitivity * severity)).
    """

    p_fn: float = 0.0
    p_fp: float = 0.0
    p_shift: float = 0.0
    corruption_sensitivity: float = 0.8
    jitter_px: float = 0.35
    shift_fraction: float = 0.55
    feature_dim: int = 4
    feature_modes: int = 3
    feature_spread: float = 1.0
    feature_mode_scale: float = 9.0
    error_shift_sigmas: float = 6.0
    feature_seed: int = 1234
    conf_clean: tuple[float, float] = (0.55, 0.99)
    conf_shifted: tuple[float, float] = (0.35, 0.80)
    conf_fp: tuple[float, float] = (0.30, 0.75)

    def __post_init__(self):
        for name in ("p_fn", "p_fp", "p_shift"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.feature_modes < 1:
            raise ValueError("feature_modes must be at least 1")
        if self.corruption_sensitivity < 0:
            raise ValueError("corruption_sensitivity must be non-negative")


def _bilinear_field(rng: np.random.Generator, h: int, w: int, coarse: int = 7) -> np.ndarray:
    """Smooth random field in [-1, 1] from a bilinearly upsampled coarse grid."""
    grid = rng.uniform(-1.0, 1.0, size=(coarse, coarse))
    gy = np.linspace(0.0, coarse - 1.0, h)
    gx = np.linspace(0.0, coarse - 1.0, w)
    y0 = np.clip(np.floor(gy).astype(int), 0, coarse - 2)
    x0 = np.clip(np.floor(gx).astype(int), 0, coarse - 2)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    tl = grid[np.ix_(y0, x0)]
    tr = grid[np.ix_(y0, x0 + 1)]
    bl = grid[np.ix_(y0 + 1, x0)]
    br = grid[np.ix_(y0 + 1, x0 + 1)]
    return (
        tl * (1 - fy) * (1 - fx)
        + tr * (1 - fy) * fx
        + bl * fy * (1 - fx)
        + br * fy * fx
    )


def _render_scene(rng: np.random.Generator, cfg: SceneConfig, bright_bg: bool) -> tuple[np.ndarray, BBox]:
    h, w = cfg.height, cfg.width
    level_range = cfg.ood_background_level if bright_bg else cfg.background_level
    level = rng.uniform(*level_range)
    amp = rng.uniform(*cfg.background_texture)
    fieldmap = level + amp * _bilinear_field(rng, h, w)
    tint = rng.uniform(-0.06, 0.06, size=3)
    img = np.clip(fieldmap[..., None] * (1.0 + tint[None, None, :]), 0.0, 1.0)

    # Bright trapezoid target; its axis-aligned bounding box is ground truth.
    a = rng.uniform(*cfg.target_scale) * min(h, w)
    aspect = rng.uniform(*cfg.target_aspect)
    b = a / aspect
    cx = rng.uniform(max(a + 3.0, 0.30 * w), min(w - 3.0 - a, 0.70 * w))
    cy = rng.uniform(max(b + 3.0, 0.30 * h), min(h - 3.0 - b, 0.70 * h))
    taper = rng.uniform(0.20, 0.45)
    skew = rng.uniform(-0.20, 0.20) * a
    corners = np.array(
        [
            (cx - a * (1.0 - taper) + skew, cy - b),
            (cx + a * (1.0 - taper) + skew, cy - b),
            (cx + a, cy + b),
            (cx - a, cy + b),
        ]
    )
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    px, py = np.meshgrid(xs, ys)
    inside = np.ones((h, w), dtype=bool)
    for i in range(4):
        x0, y0 = corners[i]
        x1, y1 = corners[(i + 1) % 4]
        # Corners run clockwise in image coordinates (y grows downward),
        # so interior points sit on the non-negative side of each edge.
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside &= cross >= 0.0
    shade = rng.uniform(*cfg.target_brightness)
    surface = np.clip(
        shade + rng.uniform(-0.02, 0.02, size=(h, w)), 0.0, 1.0
    )
    for c, channel_tint in enumerate((1.0, 0.99, 0.97)):
        chan = img[..., c]
        chan[inside] = np.clip(surface[inside] * channel_tint, 0.0, 1.0)

    gt = BBox(
        x_min=float(corners[:, 0].min()),
        y_min=float(corners[:, 1].min()),
        x_max=float(corners[:, 0].max()),
        y_max=float(corners[:, 1].max()),
    )
    return quantize(img), gt


def _sample_in_cone(rng: np.random.Generator, cone: OddSpec) -> dict[str, float]:
    values = {}
    for name in ODD_FIELDS:
        lo, hi = cone.intervals[name]
        span = hi - lo
        values[name] = float(rng.uniform(lo + 0.05 * span, hi - 0.05 * span))
    return values


def _sample_outside_cone(rng: np.random.Generator, cone: OddSpec) -> dict[str, float]:
    values = _sample_in_cone(rng, cone)
    name = ODD_FIELDS[int(rng.integers(len(ODD_FIELDS)))]
    lo, hi = cone.intervals[name]
    span = hi - lo
    excess = float(rng.uniform(0.05, 0.60)) * span
    if rng.random() < 0.5 and name != "along_track_distance":
        values[name] = lo - excess
    else:
        values[name] = hi + excess
    return values


def _threat_for_index(i: int, n: int, fractions: dict[str, float]) -> str:
    # Stratified assignment: walking the cumulative fractions with the
    # midpoint rank keeps the realized mix within 1/n of the target.
    u = (i + 0.5) / n
    acc = 0.0
    for label in THREAT_LABELS:
        acc += fractions.get(label, 0.0)
        if u <= acc:
            return label
    return THREAT_NOMINAL


def generate_dataset(cfg: SceneConfig, n: int, seed: int, name: str = "synth") -> list[Sample]:
    """Render n samples with in-memory images, ordered by sample id."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    cone = cfg.resolve_cone()
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        threat = _threat_for_index(i, n, cfg.threat_fractions)
        img, gt = _render_scene(rng, cfg, bright_bg=threat == THREAT_OOD)
        if threat == THREAT_ODD:
            meta = FlightMetadata.from_mapping(_sample_outside_cone(rng, cone))
        else:
            meta = FlightMetadata.from_mapping(_sample_in_cone(rng, cone))
        samples.append(
            Sample(
                sample_id=f"{name}-{i:05d}",
                metadata=meta,
                gt_boxes=(gt,),
                threat=threat,
                image=img,
            )
        )
    return samples


def corrupt_samples(samples, corruption: Corruption, seed: int) -> list[Sample]:
    """Corrupted copies of in-memory samples, one derived seed per sample."""
    out = []
    for s in samples:
        sub_seed = stable_seed(seed, s.sample_id)
        img = apply_corruption(s.load_image(), corruption, sub_seed)
        out.append(
            Sample(
                sample_id=s.sample_id,
                metadata=s.metadata,
                gt_boxes=s.gt_boxes,
                threat=s.threat,
                corruption=CorruptionRecord(
                    kind=corruption.kind, severity=corruption.severity, seed=sub_seed
                ),
                image=img,
            )
        )
    return out


class StubDetector:
    """Detector stand-in with programmable, seed-deterministic failures.

    Feature vectors mimic an internal embedding: correct detections draw
    from one of feature_modes gaussian clusters; failed detections draw
    from counterpart clusters displaced by error_shift_sigmas standard
    deviations in every dimension.
    """

    def __init__(self, cfg: StubDetectorConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        layout = np.random.default_rng([cfg.feature_seed])
        self._centers = layout.normal(
            0.0, cfg.feature_mode_scale, size=(cfg.feature_modes, cfg.feature_dim)
        )
        signs = layout.integers(0, 2, size=(cfg.feature_modes, cfg.feature_dim)) * 2 - 1
        self._error_centers = self._centers + (
            cfg.error_shift_sigmas * cfg.feature_spread * signs
        )

    def _feature(self, rng: np.random.Generator, erroneous: bool) -> np.ndarray:
        mode = int(rng.integers(self.cfg.feature_modes))
        centers = self._error_centers if erroneous else self._centers
        return centers[mode] + rng.normal(0.0, self.cfg.feature_spread, self.cfg.feature_dim)

    def _effective(self, p: float, sample: Sample) -> float:
        if sample.corruption is None:
            return p
        mult = 1.0 + self.cfg.corruption_sensitivity * sample.corruption.severity
        return min(1.0, p * mult)

    def _jitter_box(self, rng: np.random.Generator, box: BBox) -> BBox:
        j = self.cfg.jitter_px
        d = rng.uniform(-j, j, size=4)
        return BBox(box.x_min + d[0], box.y_min + d[1], box.x_max + d[2], box.y_max + d[3])

    def _shifted_box(self, rng: np.random.Generator, box: BBox) -> BBox:
        dx = self.cfg.shift_fraction * (box.x_max - box.x_min)
        if rng.random() < 0.5:
            dx = -dx
        return self._jitter_box(
            rng, BBox(box.x_min + dx, box.y_min, box.x_max + dx, box.y_max)
        )

    def _fp_box(self, rng: np.random.Generator, sample: Sample) -> BBox:
        img = sample.load_image()
        h, w = img.shape[:2]
        size = float(rng.uniform(0.12, 0.22)) * min(h, w)
        off = float(rng.uniform(0.0, 3.0))
        candidates = [
            BBox(2.0 + off, 2.0 + off, 2.0 + off + size, 2.0 + off + size),
            BBox(w - 2.0 - off - size, 2.0 + off, w - 2.0 - off, 2.0 + off + size),
            BBox(2.0 + off, h - 2.0 - off - size, 2.0 + off + size, h - 2.0 - off),
            BBox(w - 2.0 - off - size, h - 2.0 - off - size, w - 2.0 - off, h - 2.0 - off),
        ]
        worst = [max((iou(c, g) for g in sample.gt_boxes), default=0.0) for c in candidates]
        return candidates[int(np.argmin(worst))]

    def detect(self, sample: Sample) -> list[tuple[Detection, np.ndarray]]:
        cfg = self.cfg
        rng = np.random.default_rng([self.seed, stable_seed(sample.sample_id)])
        p_fn = self._effective(cfg.p_fn, sample)
        p_fp = self._effective(cfg.p_fp, sample)
        p_shift = self._effective(cfg.p_shift, sample)
        forced = sample.threat == THREAT_ID_ERROR

        outputs = []
        for gt in sample.gt_boxes:
            if forced:
                miss = rng.random() < 0.5
                shift = not miss
            else:
                miss = rng.random() < p_fn
                shift = (not miss) and rng.random() < p_shift
            if miss:
                continue
            if shift:
                box = self._shifted_box(rng, gt)
                conf = float(rng.uniform(*cfg.conf_shifted))
                feat = self._feature(rng, erroneous=True)
            else:
                box = self._jitter_box(rng, gt)
                conf = float(rng.uniform(*cfg.conf_clean))
                feat = self._feature(rng, erroneous=False)
            outputs.append((Detection(bbox=box, confidence=conf, label=0), feat))
        if rng.random() < p_fp:
            box = self._fp_box(rng, sample)
            conf = float(rng.uniform(*cfg.conf_fp))
            feat = self._feature(rng, erroneous=True)
            outputs.append((Detection(bbox=box, confidence=conf, label=0), feat))
        return outputs


def stub_detect(sample: Sample, cfg: StubDetectorConfig, seed: int) -> list[tuple[Detection, np.ndarray]]:
    """One-shot form of StubDetector for callers that hold no state."""
    return StubDetector(cfg, seed).detect(sample)


def build_trace(samples, cfg: StubDetectorConfig, seed: int, model: str = "stub") -> TraceFile:
    """Run the stub over samples and collect a trace (raw confidences)."""
    det = StubDetector(cfg, seed)
    records = []
    for s in sorted(samples, key=lambda s: s.sample_id):
        pairs = det.detect(s)
        records.append(
            TraceRecord(
                sample_id=s.sample_id,
                detections=tuple(d for d, _ in pairs),
                features=tuple(np.asarray(f, dtype=np.float64) for _, f in pairs),
            )
        )
    return TraceFile(model=model, feature_dim=cfg.feature_dim, records=tuple(records))


def export_dataset(samples, out_dir, name: str, image_format: str = "ppm") -> Manifest:
    """Write images plus manifest.jsonl under out_dir and return the manifest."""
    if image_format not in ("ppm", "png"):
        raise ValueError(f"image_format must be 'ppm' or 'png', got {image_format!r}")
    out_dir = Path(out_dir)
    entries = []
    for s in sorted(samples, key=lambda s: s.sample_id):
        rel = f"images/{s.sample_id}.{image_format}"
        write_image(out_dir / rel, s.load_image())
        entries.append(
            ManifestEntry(
                sample_id=s.sample_id,
                image=rel,
                metadata=s.metadata,
                gt_boxes=s.gt_boxes,
                threat=s.threat,
                corruption=s.corruption,
            )
        )
    manifest = Manifest(name=name, entries=tuple(entries), root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def corrupt_manifest(
    manifest: Manifest, corruption: Corruption, seed: int, out_dir, image_format: str = "ppm"
) -> Manifest:
    """Corrupt every image of a stored dataset into a new dataset directory."""
    from .imaging import read_image

    if image_format not in ("ppm", "png"):
        raise ValueError(f"image_format must be 'ppm' or 'png', got {image_format!r}")
    out_dir = Path(out_dir)
    entries = []
    for e in manifest.entries:
        img = read_image(manifest.image_path(e))
        sub_seed = stable_seed(seed, e.sample_id)
        out = apply_corruption(img, corruption, sub_seed)
        rel = f"images/{e.sample_id}.{image_format}"
        write_image(out_dir / rel, out)
        entries.append(
            ManifestEntry(
                sample_id=e.sample_id,
                image=rel,
                metadata=e.metadata,
                gt_boxes=e.gt_boxes,
                threat=e.threat,
                corruption=CorruptionRecord(
                    kind=corruption.kind, severity=corruption.severity, seed=sub_seed
                ),
            )
        )
    name = f"{manifest.name}-{corruption.kind}-s{corruption.severity}"
    out = Manifest(name=name, entries=tuple(entries), root=out_dir)
    write_manifest(out, out_dir / "manifest.jsonl")
    return out
