"""Phase labels and supervision targets.

Scan-level classes are the four dynamic phases plus a catch-all:
non-contrast (NC), arterial (A), venous (V), delay (D), other (O), with
fixed integer codes 0..4. A training target is either one exact phase or
the coarse "contrast" label, which asserts membership in {A, V, D} and
nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum


class PhaseLabel(IntEnum):
    NC = 0
    A = 1
    V = 2
    D = 3
    O = 4


CONTRAST_MEMBERS = (PhaseLabel.A, PhaseLabel.V, PhaseLabel.D)
CONTRAST_INDICES = tuple(int(p) for p in CONTRAST_MEMBERS)

NUM_CLASSES = len(PhaseLabel)


@dataclass(frozen=True)
class PhaseTarget:
    """Exact phase, or coarse contrast when `label` is None."""

    label: PhaseLabel | None

    @property
    def is_coarse(self) -> bool:
        return self.label is None

    @staticmethod
    def exact(label: PhaseLabel) -> "PhaseTarget":
        return PhaseTarget(PhaseLabel(label))

    @staticmethod
    def contrast() -> "PhaseTarget":
        return PhaseTarget(None)

    def encode(self) -> str:
        return "contrast" if self.label is None else self.label.name

    @staticmethod
    def decode(text: str) -> "PhaseTarget":
        if text == "contrast":
            return PhaseTarget(None)
        try:
            return PhaseTarget(PhaseLabel[text])
        except KeyError:
            raise ValueError(f"unknown phase target {text!r}") from None


COARSE_CONTRAST = PhaseTarget.contrast()
