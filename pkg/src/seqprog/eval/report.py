"""Evaluation reports: a key-value text document plus tab-separated tables.

Text layout::

    # <title>
    key<TAB>value            (one line per scalar field)
    [table <name>]
    col1<TAB>col2 ...
    row values ...

Every table is also written on its own as ``<name>.tsv`` by ``write``.
Floats are printed with ``repr`` so that reports compare bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence


def _fmt(v: Any) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"table {self.name}: {len(values)} values for {len(self.columns)} columns")
        self.rows.append(list(values))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        lines += ["\t".join(_fmt(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


@dataclass
class EvalReport:
    title: str = "evaluation"
    fold_acc: list[float] = field(default_factory=list)
    fold_auc: list[float] = field(default_factory=list)
    param_count: int | None = None
    split_counts: list[dict[str, int]] = field(default_factory=list)
    significance: dict[str, Any] | None = None
    tables: list[Table] = field(default_factory=list)
    notes: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for v in self.fold_acc + self.fold_auc:
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {v} outside [0, 1]")

    @property
    def mean_acc(self) -> float:
        return _mean(self.fold_acc)

    @property
    def mean_auc(self) -> float:
        return _mean(self.fold_auc)

    def fold_table(self) -> Table:
        t = Table("folds", ["fold", "acc", "auc", "n_train", "n_val", "n_test"])
        for i, (acc, auc) in enumerate(zip(self.fold_acc, self.fold_auc)):
            c = self.split_counts[i] if i < len(self.split_counts) else {}
            t.add(i + 1, acc, auc, c.get("train"), c.get("val"), c.get("test"))
        t.add("mean", self.mean_acc, self.mean_auc, None, None, None)
        return t

    def to_text(self) -> str:
        lines = [f"# {self.title}"]
        scalars: dict[str, Any] = {}
        if self.fold_acc:
            scalars.update(folds=len(self.fold_acc), mean_acc=self.mean_acc, mean_auc=self.mean_auc)
        if self.param_count is not None:
            scalars["param_count"] = self.param_count
        scalars.update(self.notes)
        if self.significance:
            scalars.update({f"significance.{k}": v for k, v in self.significance.items()})
        lines += [f"{k}\t{_fmt(v)}" for k, v in scalars.items()]
        for table in ([self.fold_table()] if self.fold_acc else []) + self.tables:
            lines.append(f"[table {table.name}]")
            lines.append(table.to_tsv().rstrip("\n"))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{stem}.txt"
        path.write_text(self.to_text())
        for table in ([self.fold_table()] if self.fold_acc else []) + self.tables:
            (out / f"{stem}_{table.name}.tsv").write_text(table.to_tsv())
        return path
