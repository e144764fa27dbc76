"""Cross-validation and the ablation grids (loss weights, width, sequence length).

All harnesses take an explicit fold plan so that every cell of a grid sees
the same patients in the same folds, and derive each fold's training seed
from (seed, fold) only, so cells differ in nothing but the ablated setting.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from ..aggregator import (AggregatorConfig, SequenceSample, TrainConfig, evaluate, param_count,
                          predict_proba, train_aggregator)
from ..data.records import PatientSequence, fixed_length_filter
from ..data.splits import Split
from ..errors import DataError
from .metrics import accuracy, mann_whitney_u, roc_auc
from .report import EvalReport, Table

logger = logging.getLogger(__name__)

LAMBDA_GRID: tuple[tuple[float, float], ...] = ((0.0, 1.0), (0.5, 1.0), (1.0, 0.0), (1.0, 1.0), (1.5, 1.0))
WIDTH_GRID: tuple[str, ...] = ("D'=D", "D'=2D", "self-attention")
ABSTAIN_SCORE = 0.5


def build_sequences(cohort: Sequence[PatientSequence], store: Mapping[str, np.ndarray]) -> list[SequenceSample]:
    """Stack each sequence's visit embeddings (looked up by visit id) into a sample."""
    out = []
    for seq in cohort:
        missing = [v.visit_id for v in seq.visits if v.visit_id not in store]
        if missing:
            raise DataError(f"{seq.key}: no embedding for visit(s) {missing[:3]}")
        frames = np.stack([np.asarray(store[v.visit_id], dtype=np.float32) for v in seq.visits])
        labels = seq.frame_labels
        fl = None if any(l is None for l in labels) else np.asarray(labels)
        out.append(SequenceSample(frames, seq.sequence_label, fl, seq.key))
    return out


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


@dataclass
class CVResult:
    fold_acc: list[float] = field(default_factory=list)
    fold_auc: list[float] = field(default_factory=list)
    best_epochs: list[int] = field(default_factory=list)
    split_counts: list[dict[str, int]] = field(default_factory=list)
    param_count: int = 0
    models: list = field(default_factory=list)
    logs: list[list[dict]] = field(default_factory=list)
    seq_untrained: list[bool] = field(default_factory=list)  # sequence path bitwise at init, per fold

    @property
    def mean_acc(self) -> float:
        return math.fsum(self.fold_acc) / len(self.fold_acc)

    @property
    def mean_auc(self) -> float:
        return math.fsum(self.fold_auc) / len(self.fold_auc)

    def report(self, title: str = "cross-validation") -> EvalReport:
        return EvalReport(title, list(self.fold_acc), list(self.fold_auc), self.param_count,
                          list(self.split_counts))


def _score_with_abstention(model, test: Sequence[SequenceSample], min_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Positive-class scores; sequences shorter than ``min_len`` get the abstain score."""
    scores = np.full(len(test), ABSTAIN_SCORE)
    idx = [i for i, s in enumerate(test) if len(s) >= min_len]
    if idx:
        scores[idx] = predict_proba([test[i].last(min_len) for i in idx], model)[:, -1]
    return scores, np.array([s.label for s in test])


def cross_validate(
    samples: Sequence[SequenceSample],
    plan: Sequence[Split],
    cfg: AggregatorConfig,
    seed: int,
    tcfg: TrainConfig | None = None,
    delta_t: int | None = None,
    keep_models: bool = False,
) -> CVResult:
    """Train one aggregator per fold and score it on that fold's test patients.

    With ``delta_t`` the model is trained on the fixed-length paradigm:
    train/val keep only sequences with at least ``delta_t`` visits, cut to
    their last ``delta_t``. Test scoring still covers every test sequence;
    ones too short for the fixed-length model receive ``ABSTAIN_SCORE``.
    """
    res = CVResult()
    for i, split in enumerate(plan):
        train, val, test = (split.select(samples, p) for p in ("train", "val", "test"))
        if delta_t is not None:
            train, _ = fixed_length_filter(train, delta_t)
            val, _ = fixed_length_filter(val, delta_t)
        out = train_aggregator(train, val, cfg, fold_seed(seed, i), tcfg)
        if delta_t is None:
            ev = evaluate(test, out.model)
            scores, labels = ev["scores"], ev["labels"]
        else:
            scores, labels = _score_with_abstention(out.model, test, delta_t)
        res.fold_acc.append(accuracy((scores > 0.5).astype(int), labels))
        res.fold_auc.append(roc_auc(scores, labels))
        res.best_epochs.append(out.best_epoch)
        res.split_counts.append({"train": len(train), "val": len(val), "test": len(test)})
        res.logs.append(out.log)
        final = out.model.state_dict()
        res.seq_untrained.append(all(np.array_equal(final[n], out.init_state[n])
                                     for n in out.model.sequence_parameter_names()))
        res.param_count = param_count(out.model)[0]
        if keep_models:
            res.models.append(out.model)
        logger.info("fold %d: acc %.4f auc %.4f (best epoch %d)", i + 1, res.fold_acc[-1], res.fold_auc[-1],
                    out.best_epoch)
    return res


def significance(a: Sequence[float], b: Sequence[float]) -> dict:
    """Mann-Whitney U on two models' per-fold (or per-chunk) scores."""
    r = mann_whitney_u(a, b)
    return {"u": r.u, "p": r.p, "method": r.method, "unit": "per-fold AUC", "n_a": len(a), "n_b": len(b)}


# -- grids --------------------------------------------------------------------------


def _grid_label(l1: float, l2: float) -> str:
    return f"{l1:g}:{l2:g}"


def lambda_ablation(
    samples: Sequence[SequenceSample],
    plan: Sequence[Split],
    base: AggregatorConfig,
    seed: int,
    tcfg: TrainConfig | None = None,
    grid: Sequence[tuple[float, float]] = LAMBDA_GRID,
) -> tuple[Table, dict[str, CVResult]]:
    """One CV run per (lambda_single, lambda_seq) cell.

    Columns include ``seq_untrained``: whether every sequence-path parameter
    of every fold's final model is bitwise equal to its initial value.
    """
    table = Table("lambda", ["lambda_single:lambda_seq", "acc", "auc", "seq_untrained"])
    results = {}
    for l1, l2 in grid:
        label = _grid_label(l1, l2)
        res = cross_validate(samples, plan, replace(base, lambda_single=l1, lambda_seq=l2), seed, tcfg)
        results[label] = res
        table.add(label, res.mean_acc, res.mean_auc, all(res.seq_untrained))
        logger.info("lambda %s: acc %.4f auc %.4f", label, res.mean_acc, res.mean_auc)
    return table, results


def width_ablation(
    samples: Sequence[SequenceSample],
    plan: Sequence[Split],
    base: AggregatorConfig,
    seed: int,
    tcfg: TrainConfig | None = None,
) -> tuple[Table, dict[str, CVResult]]:
    """Projection width D' = D, D' = 2D, and the self-attention replacement."""
    variants = {
        "D'=D": replace(base, proj_dim=base.dim, variant="bilinear"),
        "D'=2D": replace(base, proj_dim=2 * base.dim, variant="bilinear"),
        "self-attention": replace(base, proj_dim=2 * base.dim, variant="self_attention"),
    }
    table = Table("width", ["variant", "acc", "auc", "param_count"])
    results = {}
    for name in WIDTH_GRID:
        res = cross_validate(samples, plan, variants[name], seed, tcfg)
        results[name] = res
        table.add(name, res.mean_acc, res.mean_auc, res.param_count)
    return table, results


def delta_t_sweep(
    samples: Sequence[SequenceSample],
    plan: Sequence[Split],
    cfg: AggregatorConfig,
    seed: int,
    delta_ts: Sequence[int],
    tcfg: TrainConfig | None = None,
) -> tuple[Table, dict[str, CVResult]]:
    """Fixed-length models for each Δt, then the variable-length model on everything.

    ``kept``/``dropped`` count whole-cohort sequences passing the length
    filter. ``auc`` scores all test sequences (abstaining on short ones) so
    rows are comparable; ``kept_auc`` is the fixed-length model on the test
    sequences it can actually see.
    """
    delta_ts = sorted(set(int(d) for d in delta_ts))
    if len(delta_ts) < 2:
        raise ValueError("a Δt sweep needs at least two values")
    table = Table("delta_t", ["delta_t", "kept", "dropped", "kept_frac", "acc", "auc", "kept_auc"])
    results = {}
    n = len(samples)
    for dt in delta_ts:
        kept, dropped = fixed_length_filter(samples, dt)
        res = cross_validate(samples, plan, cfg, seed, tcfg, delta_t=dt, keep_models=True)
        kept_auc = _kept_subset_auc(samples, plan, res.models, dt)
        res.models.clear()
        results[str(dt)] = res
        table.add(dt, len(kept), dropped, len(kept) / n, res.mean_acc, res.mean_auc, kept_auc)
        logger.info("delta_t %d: kept %d auc %.4f", dt, len(kept), res.mean_auc)
    res = cross_validate(samples, plan, cfg, seed, tcfg)
    results["variable"] = res
    table.add("variable", n, 0, 1.0, res.mean_acc, res.mean_auc, res.mean_auc)
    return table, results


def _kept_subset_auc(samples, plan, models, dt) -> float:
    aucs = []
    for split, model in zip(plan, models):
        test, _ = fixed_length_filter(split.select(samples, "test"), dt)
        labels = [s.label for s in test]
        if len(set(labels)) < 2:
            aucs.append(float("nan"))
            continue
        aucs.append(roc_auc(predict_proba(test, model)[:, -1], labels))
    return float(np.nanmean(aucs)) if not all(math.isnan(a) for a in aucs) else float("nan")

