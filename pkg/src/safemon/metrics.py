"""Safety metrics for a detector guarded by runtime monitors.

Per frame there are two binary facts: did the model handle the frame
correctly, and did the monitoring reject it. Normalizing the four outcome
counts by the dataset size gives the three reported metrics:

- safety gain: fraction of frames where the model was wrong and monitoring
  rejected (hazards removed by monitoring).
- residual hazard: fraction where the model was wrong and monitoring
  accepted (hazards that slip through).
- availability cost: fraction where the model was right but monitoring
  rejected (good frames sacrificed).

Two identities follow directly and are enforced in tests: safety gain +
residual hazard equals the model error fraction, and safety gain +
availability cost equals the rejection fraction.

The combination table scores all eight subsets of {ODD, OOD, OMS} under
OR-composition (any member rejecting rejects the frame). Stage attribution
splits the composed safety gain and availability cost by the first stage
that rejected each frame, so the per-stage numbers sum exactly to the
composed totals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .verdict import STAGES

MONITOR_SUBSETS: tuple[tuple[str, ...], ...] = (
    (),
    ("ODD",),
    ("OOD",),
    ("OMS",),
    ("ODD", "OOD"),
    ("ODD", "OMS"),
    ("OOD", "OMS"),
    ("ODD", "OOD", "OMS"),
)


@dataclass(frozen=True)
class OutcomeRow:
    """One frame's outcome under a particular monitoring configuration."""

    sample_id: str
    model_correct: bool
    rejected: bool
    rejecting_stage: str | None = None

    def __post_init__(self):
        if self.rejected:
            if self.rejecting_stage not in STAGES:
                raise ValueError(
                    f"rejected row needs a stage from {STAGES}, got {self.rejecting_stage!r}"
                )
        elif self.rejecting_stage is not None:
            raise ValueError("accepted row must not name a rejecting stage")


@dataclass(frozen=True)
class SafetyReport:
    n: int
    caught: int
    missed: int
    false_alarms: int

    @property
    def safety_gain(self) -> float:
        return self.caught / self.n

    @property
    def residual_hazard(self) -> float:
        return self.missed / self.n

    @property
    def availability_cost(self) -> float:
        return self.false_alarms / self.n

    @property
    def error_fraction(self) -> float:
        return (self.caught + self.missed) / self.n

    @property
    def rejection_fraction(self) -> float:
        return (self.caught + self.false_alarms) / self.n

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "caught": self.caught,
            "missed": self.missed,
            "false_alarms": self.false_alarms,
            "safety_gain": self.safety_gain,
            "residual_hazard": self.residual_hazard,
            "availability_cost": self.availability_cost,
        }


def evaluate(rows: Sequence[OutcomeRow]) -> SafetyReport:
    """Aggregate per-frame outcomes into a report. Empty input is an error."""
    if not rows:
        raise ValueError("cannot evaluate an empty result set")
    caught = missed = false_alarms = 0
    for r in rows:
        if not r.model_correct and r.rejected:
            caught += 1
        elif not r.model_correct:
            missed += 1
        elif r.rejected:
            false_alarms += 1
    return SafetyReport(n=len(rows), caught=caught, missed=missed, false_alarms=false_alarms)


@dataclass(frozen=True)
class MonitorDecisions:
    """Every monitor's individual opinion on one frame (True = reject),
    recorded regardless of which stage would have cut evaluation short."""

    sample_id: str
    model_correct: bool
    odd: bool
    ood: bool
    oms: bool

    def rejects(self, subset: tuple[str, ...]) -> bool:
        lookup = {"ODD": self.odd, "OOD": self.ood, "OMS": self.oms}
        return any(lookup[s] for s in subset)

    def first_rejecting_stage(self) -> str | None:
        for stage, fired in (("ODD", self.odd), ("OOD", self.ood), ("OMS", self.oms)):
            if fired:
                return stage
        return None


def serial_rows(decisions: Sequence[MonitorDecisions]) -> list[OutcomeRow]:
    """Outcome rows for the serial all-monitors pipeline, crediting each
    rejection to the first stage in ODD, OOD, OMS order that fired."""
    rows = []
    for d in decisions:
        stage = d.first_rejecting_stage()
        rows.append(
            OutcomeRow(
                sample_id=d.sample_id,
                model_correct=d.model_correct,
                rejected=stage is not None,
                rejecting_stage=stage,
            )
        )
    return rows


def combination_table(
    decisions: Sequence[MonitorDecisions],
) -> list[tuple[tuple[str, ...], SafetyReport]]:
    """SafetyReport for every subset of monitors under OR-composition."""
    if not decisions:
        raise ValueError("cannot tabulate an empty result set")
    table = []
    for subset in MONITOR_SUBSETS:
        caught = missed = false_alarms = 0
        for d in decisions:
            rej = d.rejects(subset)
            if not d.model_correct and rej:
                caught += 1
            elif not d.model_correct:
                missed += 1
            elif rej:
                false_alarms += 1
        table.append(
            (subset, SafetyReport(len(decisions), caught, missed, false_alarms))
        )
    return table


@dataclass(frozen=True)
class StageContribution:
    stage: str
    caught: int
    false_alarms: int
    n: int

    @property
    def rejections(self) -> int:
        return self.caught + self.false_alarms

    @property
    def safety_gain(self) -> float:
        return self.caught / self.n

    @property
    def availability_cost(self) -> float:
        return self.false_alarms / self.n

    def as_dict(self) -> dict:
        return {
            "stage": self.stage,
            "caught": self.caught,
            "false_alarms": self.false_alarms,
            "rejections": self.rejections,
            "safety_gain": self.safety_gain,
            "availability_cost": self.availability_cost,
        }


def stage_attribution(rows: Sequence[OutcomeRow]) -> list[StageContribution]:
    """Split the composed safety gain and availability cost by rejecting
    stage. Counts across stages sum exactly to the composed counts."""
    if not rows:
        raise ValueError("cannot attribute an empty result set")
    caught = {s: 0 for s in STAGES}
    false_alarms = {s: 0 for s in STAGES}
    for r in rows:
        if not r.rejected:
            continue
        if r.model_correct:
            false_alarms[r.rejecting_stage] += 1
        else:
            caught[r.rejecting_stage] += 1
    return [
        StageContribution(stage=s, caught=caught[s], false_alarms=false_alarms[s], n=len(rows))
        for s in STAGES
    ]


def subset_label(subset: tuple[str, ...]) -> str:
    return "+".join(subset) if subset else "No monitor"


def format_combination_table(table, sep: str = "\t") -> str:
    lines = [sep.join(("Monitors", "SG", "RH", "AC"))]
    for subset, report in table:
        lines.append(
            sep.join(
                (
                    subset_label(subset),
                    f"{report.safety_gain:.6f}",
                    f"{report.residual_hazard:.6f}",
                    f"{report.availability_cost:.6f}",
                )
            )
        )
    return "\n".join(lines) + "\n"


def format_attribution(contributions, sep: str = "\t") -> str:
    lines = [sep.join(("Stage", "SG_contribution", "AC_contribution", "Rejections"))]
    for c in contributions:
        lines.append(
            sep.join(
                (c.stage, f"{c.safety_gain:.6f}", f"{c.availability_cost:.6f}", str(c.rejections))
            )
        )
    return "\n".join(lines) + "\n"
