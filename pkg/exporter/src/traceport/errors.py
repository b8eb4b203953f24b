"""Error types for the exporter.

The split mirrors the consuming toolkit's CLI conventions: usage errors are
caller mistakes (bad flags, inconsistent options), data errors are problems
with the files or the checkpoint the caller pointed us at.
"""


class ExportError(Exception):
    """Base class for everything traceport raises on purpose."""


class ExportUsageError(ExportError):
    """The invocation itself is wrong (missing or contradictory options)."""


class ExportDataError(ExportError):
    """An input file, image, or checkpoint is unusable."""
