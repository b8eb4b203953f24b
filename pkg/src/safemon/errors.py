"""Shared error taxonomy.

Domain errors (bad inputs, malformed files, unsatisfiable fits) derive from
DataError so callers can distinguish them from programming errors. The CLI
maps DataError to exit code 2 and anything unexpected to exit code 3.
"""


class DataError(Exception):
    """A problem with user-supplied data or configuration."""


class OddSpecError(DataError):
    """Operating-domain spec text failed to parse or validate."""


class MissingMetadataError(DataError):
    """A required flight metadata field is absent under the 'error' policy."""


class FitError(DataError):
    """A distribution fit is not possible on the given samples."""


class AbstractionFitError(DataError):
    """Not enough matched detections to build the feature-box abstraction."""


class TraceIoError(DataError):
    """Manifest or trace file violates the on-disk contract.

    Carries the full list of violations so callers can report every problem
    in one pass instead of fixing files one line at a time.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MissingTraceError(DataError):
    """Trace replay was asked for samples the trace file does not cover."""

    def __init__(self, sample_ids):
        self.sample_ids = list(sample_ids)
        ids = ", ".join(self.sample_ids[:20])
        more = "" if len(self.sample_ids) <= 20 else f" (+{len(self.sample_ids) - 20} more)"
        super().__init__(f"trace has no entry for sample ids: {ids}{more}")
