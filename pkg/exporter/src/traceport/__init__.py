"""traceport: run a torch detector checkpoint over a dataset manifest and
write the detections, confidences, and per-detection features as a trace
file the safemon toolkit can replay.

The two packages share nothing but the file formats: traceport reads
manifests and writes traces, safemon reads both.
"""

from .errors import ExportDataError, ExportError, ExportUsageError
from .export import ExportConfig, ExportStats, export
from .manifest import ImageRef, read_image_refs
from .trace import ExportedDetection, ExportedRecord, write_trace

__version__ = "0.1.0"

__all__ = [
    "ExportConfig",
    "ExportStats",
    "ExportDataError",
    "ExportError",
    "ExportUsageError",
    "ExportedDetection",
    "ExportedRecord",
    "ImageRef",
    "export",
    "read_image_refs",
    "write_trace",
    "__version__",
]
