"""Minimal manifest reading.

The exporter only needs the sample order and each sample's image file. All
other manifest content (flight metadata, ground-truth boxes, corruption
tags) belongs to the evaluation side and is ignored here, so this reader
stays deliberately small and permissive about record keys it does not use.

Relative image paths resolve against the manifest's own directory, matching
the convention of the toolkit that writes these files.
"""

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ExportDataError

MANIFEST_FORMAT = "safemon.manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ImageRef:
    """One manifest entry reduced to what inference needs."""

    sample_id: str
    image_path: Path


def read_image_refs(manifest_path: str | Path) -> list[ImageRef]:
    """Read sample ids and resolved image paths, in manifest order.

    Raises ExportDataError on a malformed header or records, and, after
    scanning every record, on missing image files; that last error lists
    every sample id whose image could not be found so the caller can fix
    them all at once.
    """
    path = Path(manifest_path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ExportDataError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise ExportDataError(f"manifest {path} is empty")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ExportDataError(f"manifest {path} line 1 is not JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ExportDataError(f"manifest {path} header must be an object")
    if header.get("format") != MANIFEST_FORMAT:
        raise ExportDataError(
            f"manifest {path} has format {header.get('format')!r}, "
            f"expected {MANIFEST_FORMAT!r}"
        )
    if header.get("version") != MANIFEST_VERSION:
        raise ExportDataError(
            f"manifest {path} has version {header.get('version')!r}, "
            f"expected {MANIFEST_VERSION}"
        )
    count = header.get("count")
    if not isinstance(count, int) or isinstance(count, bool) or count < 0:
        raise ExportDataError(f"manifest {path} header count must be a non-negative int")

    refs: list[ImageRef] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ExportDataError(f"manifest {path} line {lineno} is not JSON: {exc}") from exc
        if not isinstance(rec, dict):
            raise ExportDataError(f"manifest {path} line {lineno} must be an object")
        sample_id = rec.get("id")
        if not isinstance(sample_id, str) or not sample_id:
            raise ExportDataError(f"manifest {path} line {lineno} has no usable id")
        if sample_id in seen:
            raise ExportDataError(f"manifest {path} repeats sample id {sample_id!r}")
        seen.add(sample_id)
        image = rec.get("image")
        if not isinstance(image, str) or not image:
            raise ExportDataError(
                f"manifest {path} record {sample_id!r} has no image path"
            )
        image_path = Path(image)
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        refs.append(ImageRef(sample_id=sample_id, image_path=image_path))

    if len(refs) != count:
        raise ExportDataError(
            f"manifest {path} header count {count} does not match {len(refs)} records"
        )

    missing = [ref.sample_id for ref in refs if not ref.image_path.is_file()]
    if missing:
        raise ExportDataError(
            "manifest images missing or unreadable for sample ids: "
            + ", ".join(missing)
        )
    return refs
