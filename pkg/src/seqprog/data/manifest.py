"""Delimited-text cohort manifests.

Header row with columns ``patient_id, eye, visit_time, image_path,
frame_label, sequence_label`` and an optional ``visit_id``. ``frame_label``
may be empty. Relative image paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

from ..errors import ManifestError
from .records import PatientSequence, VisitRecord, drop_terminal_visit

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("patient_id", "eye", "visit_time", "image_path", "frame_label", "sequence_label")
COLUMNS = REQUIRED_COLUMNS + ("visit_id",)


def load_manifest(path, drop_terminal: bool = False) -> list[PatientSequence]:
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        logger.warning("manifest %s is empty", path)
        return []
    reader = csv.DictReader(text.splitlines())
    missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ManifestError(f"{path}: missing columns {missing}")

    groups: "OrderedDict[tuple[str, str], list[tuple[float, int, dict]]]" = OrderedDict()
    problems: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        try:
            pid = row["patient_id"].strip()
            eye = row["eye"].strip()
            if not pid or not eye:
                raise ValueError("empty patient_id or eye")
            t = float(row["visit_time"])
            if t != t:
                raise ValueError("visit_time is NaN")
            fl = row["frame_label"].strip()
            rec = {
                "time": t,
                "image": row["image_path"].strip(),
                "frame_label": int(fl) if fl else None,
                "sequence_label": int(row["sequence_label"]),
                "visit_id": (row.get("visit_id") or "").strip(),
            }
        except (ValueError, TypeError, AttributeError) as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        groups.setdefault((pid, eye), []).append((t, lineno, rec))
    if problems:
        raise ManifestError(f"{path}: malformed rows\n  " + "\n  ".join(problems))

    base = path.parent
    cohort = []
    for (pid, eye), rows in sorted(groups.items()):
        rows.sort(key=lambda r: (r[0], r[1]))
        visits: list[VisitRecord] = []
        labels = set()
        last_time = None
        for t, lineno, rec in rows:
            if t == last_time:
                logger.warning("%s: duplicate visit %s/%s at t=%s (line %d) dropped; kept earliest loaded",
                               path, pid, eye, t, lineno)
                continue
            last_time = t
            labels.add(rec["sequence_label"])
            image = rec["image"]
            if image and not Path(image).is_absolute() and (base / image).exists():
                image = str(base / image)
            visits.append(VisitRecord(pid, eye, len(visits), t, image, rec["frame_label"], rec["visit_id"]))
        if len(labels) != 1:
            raise ManifestError(f"{path}: {pid}/{eye} has conflicting sequence labels {sorted(labels)}")
        seq = PatientSequence(pid, eye, visits, labels.pop())
        if drop_terminal:
            seq = drop_terminal_visit(seq)
            if seq is None:
                continue
        cohort.append(seq)
    return cohort


def write_manifest(path, cohort: Sequence[PatientSequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for seq in cohort:
            for v in seq.visits:
                w.writerow([
                    v.patient_id, v.eye, repr(float(v.visit_time)), v.image_ref,
                    "" if v.frame_label is None else v.frame_label, seq.sequence_label, v.visit_id,
                ])
