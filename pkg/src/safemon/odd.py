"""Operating-domain monitor.

An operating-domain spec is a set of closed intervals over flight metadata
parameters (approach geometry and aircraft attitude). A frame is accepted
only if every parameter lies inside its interval. The spec is read from a
small text format:

    name = [lo, hi] unit     # one interval per line
    on_missing = reject      # or: error
    some_flag = true         # free-form boolean toggles

Comments run from '#' to end of line. Reversed bounds are normalized, so
[-2.2, -3.8] and [-3.8, -2.2] mean the same interval.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .errors import MissingMetadataError, OddSpecError
from .verdict import Verdict, accept, reject

ODD_FIELDS = (
    "along_track_distance",
    "vertical_path_angle",
    "lateral_path_angle",
    "roll",
    "pitch",
    "yaw",
)

_EXPECTED_UNITS = {
    "along_track_distance": ("NM", "nm"),
    "vertical_path_angle": ("deg",),
    "lateral_path_angle": ("deg",),
    "roll": ("deg",),
    "pitch": ("deg",),
    "yaw": ("deg",),
}

MISSING_REJECT = "reject"
MISSING_ERROR = "error"


@dataclass(frozen=True)
class FlightMetadata:
    """Per-frame flight metadata; None marks a field the recorder did not log."""

    along_track_distance: float | None = None
    vertical_path_angle: float | None = None
    lateral_path_angle: float | None = None
    roll: float | None = None
    pitch: float | None = None
    yaw: float | None = None

    def __post_init__(self):
        import math

        for name in ODD_FIELDS:
            v = getattr(self, name)
            if v is None:
                continue
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise ValueError(f"metadata field {name} must be a finite number, got {v!r}")

    @classmethod
    def from_mapping(cls, mapping) -> "FlightMetadata":
        unknown = sorted(set(mapping) - set(ODD_FIELDS))
        if unknown:
            raise ValueError(f"unknown metadata fields: {', '.join(unknown)}")
        for k, v in mapping.items():
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ValueError(f"metadata field {k} must be a number, got {v!r}")
        return cls(**{k: float(v) for k, v in mapping.items()})

    def to_mapping(self) -> dict[str, float]:
        return {
            k: float(getattr(self, k)) for k in ODD_FIELDS if getattr(self, k) is not None
        }


@dataclass(frozen=True)
class OddSpec:
    intervals: dict[str, tuple[float, float]]
    missing_policy: str = MISSING_REJECT
    flags: dict[str, bool] = None

    def __post_init__(self):
        if self.flags is None:
            object.__setattr__(self, "flags", {})
        missing = [f for f in ODD_FIELDS if f not in self.intervals]
        if missing:
            raise OddSpecError(f"spec lacks parameters: {', '.join(missing)}")
        for name, (lo, hi) in self.intervals.items():
            if name not in ODD_FIELDS:
                raise OddSpecError(f"unknown parameter {name!r}")
            if not lo <= hi:
                raise OddSpecError(f"{name}: empty interval [{lo!r}, {hi!r}]")
        if self.missing_policy not in (MISSING_REJECT, MISSING_ERROR):
            raise OddSpecError(f"unknown missing-field policy {self.missing_policy!r}")


_INTERVAL_RE = re.compile(r"^\[\s*([^\s,\]]+)\s*,\s*([^\s,\]]+)\s*\]\s*(\S+)?\s*$")
_LINE_RE = re.compile(r"^([A-Za-z_]\w*)\s*=\s*(.+)$")


def parse_odd_spec(text: str) -> OddSpec:
    """Parse the interval spec format. Raises OddSpecError listing every
    problem found, each with its line number."""
    intervals: dict[str, tuple[float, float]] = {}
    flags: dict[str, bool] = {}
    policy = MISSING_REJECT
    errors: list[str] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE_RE.match(line)
        if m is None:
            errors.append(f"line {lineno}: expected 'name = value', got {line!r}")
            continue
        name, value = m.group(1), m.group(2).strip()
        if name == "on_missing":
            if value in (MISSING_REJECT, MISSING_ERROR):
                policy = value
            else:
                errors.append(f"line {lineno}: on_missing must be 'reject' or 'error'")
            continue
        if value in ("true", "false"):
            flags[name] = value == "true"
            continue
        im = _INTERVAL_RE.match(value)
        if im is None:
            errors.append(f"line {lineno}: malformed interval for {name}: {value!r}")
            continue
        if name not in ODD_FIELDS:
            errors.append(f"line {lineno}: unknown parameter {name!r}")
            continue
        if name in intervals:
            errors.append(f"line {lineno}: duplicate parameter {name}")
            continue
        try:
            a, b = float(im.group(1)), float(im.group(2))
        except ValueError:
            errors.append(f"line {lineno}: non-numeric bound in {value!r}")
            continue
        unit = im.group(3)
        if unit is not None and unit not in _EXPECTED_UNITS[name]:
            errors.append(
                f"line {lineno}: {name} expects unit "
                f"{_EXPECTED_UNITS[name][0]}, got {unit!r}"
            )
            continue
        intervals[name] = (min(a, b), max(a, b))

    missing = [f for f in ODD_FIELDS if f not in intervals]
    if missing:
        errors.append(f"missing parameters: {', '.join(missing)}")
    if errors:
        raise OddSpecError("; ".join(errors))
    return OddSpec(intervals=intervals, missing_policy=policy, flags=flags)


def load_odd_spec(path) -> OddSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_odd_spec(fh.read())


def default_approach_cone() -> OddSpec:
    """The packaged visual-approach operating envelope."""
    text = resources.files("safemon").joinpath("data/approach_cone.odd").read_text("utf-8")
    return parse_odd_spec(text)


def check_odd(spec: OddSpec, meta: FlightMetadata) -> Verdict:
    """Accept iff every metadata parameter lies in its closed interval.

    Missing fields follow the spec's policy: 'reject' treats them as a
    violation, 'error' raises MissingMetadataError.
    """
    reasons = []
    for name in ODD_FIELDS:
        v = getattr(meta, name)
        if v is None:
            if spec.missing_policy == MISSING_ERROR:
                raise MissingMetadataError(f"metadata field {name} is missing")
            reasons.append(f"{name}: missing")
            continue
        lo, hi = spec.intervals[name]
        if not lo <= v <= hi:
            reasons.append(f"{name}: {v:g} outside [{lo:g}, {hi:g}]")
    if reasons:
        return reject("ODD", reasons)
    return accept("ODD")
