"""Patient-level stratified splits and k-fold plans."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import DataError
from .records import PatientSequence, patient_labels

DEFAULT_FRACTIONS = (0.70, 0.10, 0.20)


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def select(self, cohort: Sequence, part: str) -> list:
        """Members of ``cohort`` (anything with ``patient_id``) whose patient is in ``part``."""
        ids = set(getattr(self, part))
        return [s for s in cohort if _pid(s) in ids]


def _pid(item) -> str:
    return item.patient_id if hasattr(item, "patient_id") else item.key.split("/")[0]


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    quotas = [total * f for f in fractions]
    counts = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _allocate(class_sizes: Sequence[int], fractions: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Integer table (class x split) with row sums = class sizes and column sums
    from largest-remainder rounding of the overall total; each cell is the floor
    or ceiling of its quota. Ties between equal remainders break by ``rng``."""
    col_targets = _largest_remainder(sum(class_sizes), fractions)
    quotas = np.array([[n * f for f in fractions] for n in class_sizes])
    table = np.floor(quotas + 1e-9).astype(int)
    rem = quotas - table
    tiebreak = rng.random(rem.shape)
    cells = sorted(np.ndindex(rem.shape), key=lambda ij: (-round(rem[ij], 9), tiebreak[ij]))
    def open_cells(allow_over: bool):
        for i, j in cells:
            if (table[i].sum() < class_sizes[i] and table[:, j].sum() < col_targets[j]
                    and (allow_over or rem[i, j] > 1e-9)):
                yield i, j

    for i, j in list(open_cells(False)):
        if table[i].sum() < class_sizes[i] and table[:, j].sum() < col_targets[j]:
            table[i, j] += 1
    # rare fallback when floor/ceil alone cannot satisfy both margins
    while (cell := next(open_cells(True), None)) is not None:
        table[cell] += 1
    return table


def _grouped(cohort: Sequence[PatientSequence]) -> dict[int, list[str]]:
    labels = patient_labels(cohort)
    by_class: dict[int, list[str]] = {}
    for pid in sorted(labels):
        by_class.setdefault(labels[pid], []).append(pid)
    return dict(sorted(by_class.items()))


def _split_ids(by_class: dict[int, list[str]], fractions, rng) -> list[list[str]]:
    classes = list(by_class)
    table = _allocate([len(by_class[c]) for c in classes], fractions, rng)
    parts: list[list[str]] = [[] for _ in fractions]
    for i, c in enumerate(classes):
        ids = [by_class[c][k] for k in rng.permutation(len(by_class[c]))]
        start = 0
        for j, n in enumerate(table[i]):
            parts[j].extend(ids[start:start + n])
            start += n
    return [sorted(p) for p in parts]


def stratified_split(cohort: Sequence[PatientSequence], fractions=DEFAULT_FRACTIONS, seed: int = 0) -> Split:
    """Patient-disjoint train/val/test split stratified by patient class."""
    by_class = _grouped(cohort)
    if not by_class:
        raise DataError("cannot split an empty cohort")
    for c, ids in by_class.items():
        if len(ids) < len(fractions):
            raise DataError(f"class {c} has {len(ids)} patients, need at least {len(fractions)}")
    rng = np.random.default_rng(seed)
    train, val, test = _split_ids(by_class, fractions, rng)
    return Split(tuple(train), tuple(val), tuple(test))


def kfold_plan(cohort: Sequence[PatientSequence], k: int = 5, seed: int = 0,
               fractions=DEFAULT_FRACTIONS) -> list[Split]:
    """k patient-level folds; each fold is the test set once and the remaining
    patients are re-split into train/val in the train:val ratio."""
    by_class = _grouped(cohort)
    for c, ids in by_class.items():
        if len(ids) < k:
            raise DataError(f"class {c} has {len(ids)} patients, fewer than k={k}")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    for c, ids in by_class.items():
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            folds[pos % k].append(ids[idx])
    inner = (fractions[0] / (fractions[0] + fractions[1]), fractions[1] / (fractions[0] + fractions[1]))
    plan = []
    for i in range(k):
        test = set(folds[i])
        pool = {c: [p for p in ids if p not in test] for c, ids in by_class.items()}
        train, val = _split_ids(pool, inner, rng)
        plan.append(Split(tuple(train), tuple(val), tuple(sorted(test))))
    return plan
