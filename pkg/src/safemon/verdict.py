"""Monitor verdicts.

Every runtime monitor answers with a Verdict: accept the input or reject it,
plus human-readable reasons when rejecting. Stages are ordered the way the
serial pipeline runs them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

STAGES = ("ODD", "OOD", "OMS")


@dataclass(frozen=True)
class Verdict:
    stage: str
    rejected: bool
    reasons: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown monitor stage {self.stage!r}")
        if self.rejected and not self.reasons:
            raise ValueError("a rejection needs at least one reason")
        if not self.rejected and self.reasons:
            raise ValueError("an acceptance must not carry reasons")

    @property
    def accepted(self) -> bool:
        return not self.rejected


def accept(stage: str) -> Verdict:
    return Verdict(stage=stage, rejected=False)


def reject(stage: str, reasons) -> Verdict:
    return Verdict(stage=stage, rejected=True, reasons=tuple(reasons))
