"""Visit/sequence records and the cohort-level filters applied to them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence, TypeVar

logger = logging.getLogger(__name__)

EYES = ("left", "right")


@dataclass
class VisitRecord:
    patient_id: str
    eye: str
    visit_index: int
    visit_time: float  # years from baseline
    image_ref: str
    frame_label: int | None = None
    visit_id: str = ""

    def __post_init__(self):
        if not self.visit_id:
            self.visit_id = f"{self.patient_id}_{self.eye}_{self.visit_index:03d}"


@dataclass
class PatientSequence:
    patient_id: str
    eye: str
    visits: list[VisitRecord] = field(default_factory=list)
    sequence_label: int = 0

    @property
    def key(self) -> str:
        return f"{self.patient_id}/{self.eye}"

    @property
    def frame_labels(self) -> list[int | None]:
        return [v.frame_label for v in self.visits]

    def __len__(self) -> int:
        return len(self.visits)

    def last(self, n: int) -> "PatientSequence":
        return replace(self, visits=list(self.visits[-n:]))


def leakage_filter(seq: PatientSequence) -> PatientSequence | None:
    """Keep only the visits strictly before the first positive frame.

    Returns None (with a warning) when the first visit is already positive.
    """
    if any(v.frame_label is None for v in seq.visits):
        raise ValueError(f"{seq.key}: leakage filtering needs a frame label on every visit")
    cut = next((i for i, v in enumerate(seq.visits) if v.frame_label > 0), len(seq.visits))
    if cut == 0:
        logger.warning("%s: first visit is positive, sequence excluded", seq.key)
        return None
    return replace(seq, visits=list(seq.visits[:cut]))


S = TypeVar("S")


def fixed_length_filter(cohort: Sequence[S], delta_t: int) -> tuple[list[S], int]:
    """Drop sequences shorter than ``delta_t``; truncate the rest to their last ``delta_t`` visits.

    Works on anything with ``len()`` and ``last(n)``. Returns (kept, dropped_count).
    """
    if delta_t < 1:
        raise ValueError(f"delta_t must be >= 1, got {delta_t}")
    kept = [s.last(delta_t) for s in cohort if len(s) >= delta_t]
    return kept, len(cohort) - len(kept)


def drop_terminal_visit(seq: PatientSequence) -> PatientSequence | None:
    if len(seq) <= 1:
        return None
    return replace(seq, visits=list(seq.visits[:-1]))


def patient_labels(cohort: Sequence[PatientSequence]) -> dict[str, int]:
    """Patient-level class: the largest sequence label across that patient's eyes."""
    labels: dict[str, int] = {}
    for seq in cohort:
        labels[seq.patient_id] = max(labels.get(seq.patient_id, seq.sequence_label), seq.sequence_label)
    return labels
