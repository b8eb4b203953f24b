"""Shared fixtures: a scriptable toy detector and a tiny on-disk dataset.

The detector derives detections from image content alone (one per bright
quadrant), so tests can predict boxes, confidences, and features exactly
from the pixel values they wrote.
"""

import json
from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest
import torch
from PIL import Image

IMG = 32
HALF = IMG // 2

# quadrant name -> (y0, x0) of its top-left corner
QUADS = {
    "tl": (0, 0),
    "tr": (0, HALF),
    "bl": (HALF, 0),
    "br": (HALF, HALF),
}

DARK = 51  # uint8 value, mean 0.2 after scaling; below the 0.5 threshold


class QuadrantDetector(torch.nn.Module):
    """One detection per quadrant whose mean brightness exceeds a threshold.

    The confidence is the quadrant mean, so dim quadrants yield genuinely
    low scores that a thresholding exporter would drop. Features are the
    quadrant's per-channel means plus its overall mean, routed through an
    identity embedder so the hook route and the output route must agree.
    """

    def __init__(self, threshold: float = 0.5):
        super().__init__()
        self.threshold = threshold
        self.embedder = torch.nn.Identity()

    def forward(self, images: torch.Tensor) -> List[Dict[str, torch.Tensor]]:
        b = images.shape[0]
        h = images.shape[2]
        w = images.shape[3]
        hh = h // 2
        ww = w // 2
        per_boxes: List[torch.Tensor] = []
        per_scores: List[torch.Tensor] = []
        per_labels: List[torch.Tensor] = []
        per_feats: List[torch.Tensor] = []
        for i in range(b):
            img = images[i]
            boxes: List[torch.Tensor] = []
            scores: List[torch.Tensor] = []
            feats: List[torch.Tensor] = []
            for qi in range(2):
                for qj in range(2):
                    y0 = qi * hh
                    x0 = qj * ww
                    patch = img[:, y0 : y0 + hh, x0 : x0 + ww]
                    m = patch.mean()
                    if bool(m > self.threshold):
                        boxes.append(
                            torch.tensor(
                                [
                                    float(x0) + 1.0,
                                    float(y0) + 1.0,
                                    float(x0 + ww) - 1.0,
                                    float(y0 + hh) - 1.0,
                                ]
                            )
                        )
                        scores.append(m.clamp(0.0, 1.0))
                        feats.append(
                            torch.stack(
                                [
                                    patch[0].mean(),
                                    patch[1].mean(),
                                    patch[2].mean(),
                                    patch.mean(),
                                ]
                            )
                        )
            n = len(boxes)
            if n > 0:
                per_boxes.append(torch.stack(boxes))
                per_scores.append(torch.stack(scores))
                per_feats.append(torch.stack(feats))
            else:
                per_boxes.append(torch.zeros(0, 4))
                per_scores.append(torch.zeros(0))
                per_feats.append(torch.zeros(0, 4))
            per_labels.append(torch.ones(n, dtype=torch.long))
        all_feats = torch.cat(per_feats, 0)
        emb = self.embedder(all_feats)
        out: List[Dict[str, torch.Tensor]] = []
        offset = 0
        for i in range(b):
            n_i = per_boxes[i].shape[0]
            out.append(
                {
                    "boxes": per_boxes[i],
                    "scores": per_scores[i],
                    "labels": per_labels[i],
                    "features": emb[offset : offset + n_i],
                }
            )
            offset = offset + n_i
        return out


class BadArityDetector(torch.nn.Module):
    """Always emits one detection per image but two feature rows.

    Both feature routes are wrong on purpose: the output dict carries
    (2, 4) features for 1 box, and the embedder fires on that same
    mis-sized tensor, so hook captures disagree with detection counts too.
    """

    def __init__(self):
        super().__init__()
        self.embedder = torch.nn.Identity()

    def forward(self, images: torch.Tensor) -> List[Dict[str, torch.Tensor]]:
        b = images.shape[0]
        feats_all: List[torch.Tensor] = []
        for i in range(b):
            feats_all.append(torch.zeros(2, 4))
        emb = self.embedder(torch.cat(feats_all, 0))
        out: List[Dict[str, torch.Tensor]] = []
        for i in range(b):
            out.append(
                {
                    "boxes": torch.tensor([[1.0, 1.0, 5.0, 5.0]]),
                    "scores": torch.tensor([0.9]),
                    "labels": torch.ones(1, dtype=torch.long),
                    "features": emb[2 * i : 2 * i + 2],
                }
            )
        return out


def make_image(bright: dict) -> np.ndarray:
    """A dark 32x32 RGB frame with the named quadrants set to flat colors."""
    arr = np.full((IMG, IMG, 3), DARK, dtype=np.uint8)
    for name, rgb in bright.items():
        y0, x0 = QUADS[name]
        arr[y0 : y0 + HALF, x0 : x0 + HALF] = np.array(rgb, dtype=np.uint8)
    return arr


def quad_box(name: str) -> list:
    """The bbox the toy detector reports for a quadrant."""
    y0, x0 = QUADS[name]
    return [x0 + 1.0, y0 + 1.0, x0 + HALF - 1.0, y0 + HALF - 1.0]


def quad_feature(arr: np.ndarray, name: str) -> np.ndarray:
    """Expected feature row for a quadrant of a uint8 image array."""
    y0, x0 = QUADS[name]
    patch = arr[y0 : y0 + HALF, x0 : x0 + HALF].astype(np.float64) / 255.0
    r, g, b = patch[..., 0].mean(), patch[..., 1].mean(), patch[..., 2].mean()
    return np.array([r, g, b, patch.mean()])


# Image 0 has two bright quadrants, image 1 none, image 2 one dim-but-over-
# threshold quadrant whose confidence (~0.55) sits below common cutoffs.
FIXTURE_IDS = ("s000", "s001", "s002")
FIXTURE_BRIGHT = (
    {"tl": (230, 217, 204), "br": (204, 204, 204)},
    {},
    {"tr": (140, 140, 140)},
)


def fixture_arrays() -> list:
    return [make_image(b) for b in FIXTURE_BRIGHT]


def write_manifest(root: Path, ids, rel_paths, name: str = "toy") -> Path:
    header = {
        "format": "safemon.manifest",
        "version": 1,
        "name": name,
        "count": len(ids),
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for sid, rel in zip(ids, rel_paths):
        rec = {"id": sid, "image": rel, "metadata": {}, "gt_boxes": []}
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    path = root / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_fixture_dataset(root: Path) -> Path:
    """Images plus manifest under root; returns the manifest path."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    rels = []
    for sid, arr in zip(FIXTURE_IDS, fixture_arrays()):
        rel = f"images/{sid}.ppm"
        Image.fromarray(arr).save(root / rel, format="PPM")
        rels.append(rel)
    return write_manifest(root, FIXTURE_IDS, rels)


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("ckpt") / "toydet.pt"
    torch.jit.save(torch.jit.script(QuadrantDetector()), str(path))
    return path


@pytest.fixture(scope="session")
def bad_arity_checkpoint(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("ckpt") / "badarity.pt"
    torch.jit.save(torch.jit.script(BadArityDetector()), str(path))
    return path


@pytest.fixture(scope="session")
def eager_checkpoint(tmp_path_factory) -> Path:
    """Pickled (non-scripted) toy detector; the only kind hooks attach to."""
    path = tmp_path_factory.mktemp("ckpt") / "toydet.pt"
    torch.save(QuadrantDetector(), path)
    return path


@pytest.fixture(scope="session")
def eager_bad_arity_checkpoint(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("ckpt") / "badarity.pt"
    torch.save(BadArityDetector(), path)
    return path


@pytest.fixture(scope="session")
def dataset(tmp_path_factory) -> Path:
    """Manifest path for the canonical three-image fixture."""
    root = tmp_path_factory.mktemp("data")
    return write_fixture_dataset(root)
