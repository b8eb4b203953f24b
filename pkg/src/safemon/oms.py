"""Output-monitoring over detection feature vectors.

The monitor learns the shape of feature vectors the detector produces on
detections that were actually right (matched against ground truth). Those
vectors are partitioned with k-means and each partition is wrapped in the
tightest axis-aligned box, optionally padded by epsilon on every side. At
runtime a detection whose feature vector falls in none of the boxes signals
an output unlike anything seen working correctly, and the frame is rejected.

k-means is deliberately self-contained and deterministic: k-means++ seeding
from a seeded generator, Lloyd iterations to an assignment fixpoint (at most
KMEANS_MAX_ITER), and empty clusters repaired by stealing the point farthest
from its current centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detect
from .errors import AbstractionFitError, DataError
from .fsio import atomic_write_text
from .verdict import Verdict, accept, reject

KMEANS_MAX_ITER = 300

OMS_FORMAT_HEADER = "safemon-oms v1"


def _validate_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"feature matrix must be 2-d, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("feature matrix contains non-finite values")
    return pts


def kmeans_labels(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Deterministic k-means cluster labels for an (n, d) matrix."""
    pts = _validate_points(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, n={n}], got {k}")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, pts.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = pts[first]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = pts[idx]
        d2 = np.minimum(d2, ((pts - centers[j]) ** 2).sum(axis=1))

    labels = np.full(n, -1, dtype=np.intp)
    for _ in range(KMEANS_MAX_ITER):
        dists = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        own = dists[np.arange(n), new_labels].copy()
        for j in range(k):
            if not np.any(new_labels == j):
                far = int(own.argmax())
                new_labels[far] = j
                own[far] = -1.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centers[j] = pts[labels == j].mean(axis=0)
    return labels


def partition_features(features, k: int, seed: int) -> list[np.ndarray]:
    """Split feature vectors into k disjoint non-empty clusters."""
    pts = _validate_points(features)
    labels = kmeans_labels(pts, k, seed)
    return [pts[labels == j] for j in range(k)]


@dataclass(frozen=True, eq=False)
class BoxAbstraction:
    """Union of k axis-aligned boxes in feature space, lo/hi of shape (k, d)."""

    lo: np.ndarray
    hi: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 2 or lo.shape[0] < 1:
            raise ValueError(f"box bounds must share a (k, d) shape, got {lo.shape}, {hi.shape}")
        if np.any(lo > hi):
            raise ValueError("box lower bounds exceed upper bounds")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def k(self) -> int:
        return self.lo.shape[0]

    @property
    def dim(self) -> int:
        return self.lo.shape[1]


def build_abstraction(subsets, epsilon: float = 0.0) -> BoxAbstraction:
    """Tightest axis-aligned box per subset, padded by epsilon on all sides."""
    if epsilon < 0.0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    subsets = [np.asarray(s, dtype=np.float64) for s in subsets]
    if not subsets:
        raise ValueError("need at least one subset")
    dim = None
    lo, hi = [], []
    for i, s in enumerate(subsets):
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"subset {i} must be a non-empty (m, d) matrix, got {s.shape}")
        if dim is None:
            dim = s.shape[1]
        elif s.shape[1] != dim:
            raise ValueError(f"subset {i} has dimension {s.shape[1]}, expected {dim}")
        lo.append(s.min(axis=0) - epsilon)
        hi.append(s.max(axis=0) + epsilon)
    return BoxAbstraction(lo=np.stack(lo), hi=np.stack(hi), epsilon=float(epsilon))


def contains(abstraction: BoxAbstraction, z) -> bool:
    """True when the feature vector lies inside at least one box."""
    v = np.asarray(z, dtype=np.float64).ravel()
    if v.shape[0] != abstraction.dim:
        raise ValueError(f"feature has dimension {v.shape[0]}, abstraction wants {abstraction.dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("feature vector contains non-finite values")
    inside = (abstraction.lo <= v) & (v <= abstraction.hi)
    return bool(inside.all(axis=1).any())


def contains_many(abstraction: BoxAbstraction, features) -> np.ndarray:
    """Vectorized contains over an (n, d) matrix; returns a bool array (n,)."""
    pts = _validate_points(features)
    if pts.shape[1] != abstraction.dim:
        raise ValueError(
            f"features have dimension {pts.shape[1]}, abstraction wants {abstraction.dim}"
        )
    inside = (abstraction.lo[None] <= pts[:, None, :]) & (pts[:, None, :] <= abstraction.hi[None])
    return inside.all(axis=2).any(axis=1)


def fit_oms(
    traces,
    tau_iou: float,
    k: int,
    epsilon: float,
    seed: int,
    tau_conf: float = 0.0,
) -> BoxAbstraction:
    """Build the abstraction from matched-detection features.

    Args:
        traces: iterable of (detections_with_features, gt_boxes) pairs, where
            detections_with_features is a sequence of (Detection, feature)
            tuples for one image.
        tau_iou: IoU threshold for counting a detection as matched.
        k: number of clusters/boxes.
        epsilon: box padding per side.
        seed: k-means seed.
        tau_conf: confidence threshold applied before matching, so the
            monitor learns from the detections the deployed system would keep.
    """
    collected = []
    for dets_with_feats, gt_boxes in traces:
        dets = [d for d, _ in dets_with_feats]
        feats = [f for _, f in dets_with_feats]
        result = detect.match(dets, gt_boxes, tau_iou, tau_conf)
        for det_idx, _, _ in result.pairs:
            collected.append(np.asarray(feats[det_idx], dtype=np.float64))
    if len(collected) < max(k, 1):
        raise AbstractionFitError(
            f"only {len(collected)} matched detections available; "
            f"need at least k={k} (use more data or a smaller k)"
        )
    features = np.stack(collected)
    subsets = partition_features(features, k, seed)
    return build_abstraction(subsets, epsilon)


def check_oms(abstraction: BoxAbstraction, detections_with_features) -> Verdict:
    """Reject the frame when any detection's feature vector escapes all boxes.

    An image with no detections is accepted; absence of output is not
    evidence of malfunction for this monitor.
    """
    reasons = []
    for i, (_, feat) in enumerate(detections_with_features):
        if not contains(abstraction, feat):
            reasons.append(f"detection[{i}]: feature outside all boxes")
    if reasons:
        return reject("OMS", reasons)
    return accept("OMS")


def dumps_abstraction(a: BoxAbstraction) -> str:
    lines = [OMS_FORMAT_HEADER, f"epsilon {a.epsilon:.17g}", f"k {a.k} d {a.dim}"]
    for j in range(a.k):
        lines.append("lo " + " ".join(f"{v:.17g}" for v in a.lo[j]))
        lines.append("hi " + " ".join(f"{v:.17g}" for v in a.hi[j]))
    return "\n".join(lines) + "\n"


def loads_abstraction(text: str) -> BoxAbstraction:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != OMS_FORMAT_HEADER:
        raise DataError(f"not an oms model file (expected header {OMS_FORMAT_HEADER!r})")
    try:
        eps_tok = lines[1].split()
        assert eps_tok[0] == "epsilon" and len(eps_tok) == 2
        epsilon = float(eps_tok[1])
        kd_tok = lines[2].split()
        assert kd_tok[0] == "k" and kd_tok[2] == "d" and len(kd_tok) == 4
        k, d = int(kd_tok[1]), int(kd_tok[3])
    except (AssertionError, IndexError, ValueError) as exc:
        raise DataError(f"malformed oms model header: {exc}") from exc
    if len(lines) != 3 + 2 * k:
        raise DataError(f"oms model must have {3 + 2 * k} lines for k={k}")
    lo = np.empty((k, d), dtype=np.float64)
    hi = np.empty((k, d), dtype=np.float64)
    for j in range(k):
        for tag, dest in (("lo", lo), ("hi", hi)):
            line = lines[3 + 2 * j + (0 if tag == "lo" else 1)]
            tok = line.split()
            if tok[0] != tag or len(tok) != d + 1:
                raise DataError(f"bad box line {line!r} (expected {tag} with {d} values)")
            dest[j] = [float(t) for t in tok[1:]]
    return BoxAbstraction(lo=lo, hi=hi, epsilon=epsilon)


def save_abstraction(a: BoxAbstraction, path) -> None:
    atomic_write_text(path, dumps_abstraction(a))


def load_abstraction(path) -> BoxAbstraction:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_abstraction(fh.read())
