"""Dual-path temporal aggregator over per-visit embeddings.

A shared instance classifier scores every frame (single path). The sequence
path projects each frame to a key and a content vector, sums their outer
products into a D'xD' relationship matrix whose size does not depend on the
number of frames, runs a same-padded 1-D convolution over it (rows are
channels, columns are positions), average-pools and classifies. Both paths
are trained jointly with ``lambda_single * loss_single + lambda_seq * loss_seq``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CorruptFileError, DataError, DimensionError, NonFiniteError, UndefinedAUCError
from .eval.metrics import accuracy, roc_auc
from .nn import Linear, Module, param
from .optim import (
    AGGREGATOR_BETAS,
    AGGREGATOR_WEIGHT_DECAY,
    AdamW,
    Schedule,
    bias_or_norm,
    clip_grad_norm,
    early_stopping,
    orthogonal_init,
)
from .tensor import Tensor

VARIANTS = ("bilinear", "self_attention")


@dataclass
class AggregatorConfig:
    dim: int = 64
    proj_dim: int | None = None  # None -> 2 * dim
    conv_out_channels: int | None = None  # None -> dim
    conv_kernel: int = 3
    n_class: int = 2
    lambda_single: float = 1.5
    lambda_seq: float = 1.0
    variant: str = "bilinear"

    def __post_init__(self):
        if self.proj_dim is None:
            self.proj_dim = 2 * self.dim
        if self.conv_out_channels is None:
            self.conv_out_channels = self.dim
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.lambda_single < 0 or self.lambda_seq < 0 or self.lambda_single == self.lambda_seq == 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


@dataclass
class SequenceSample:
    """One eye's visit sequence as embeddings: frames is (M, D)."""

    frames: np.ndarray
    label: int
    frame_labels: np.ndarray | None = None
    key: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or len(self.frames) == 0:
            raise DataError(f"sequence {self.key!r}: frames must be a non-empty (M, D) array")
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)
            if self.frame_labels.shape != (len(self.frames),):
                raise DataError(f"sequence {self.key!r}: {len(self.frame_labels)} frame labels for {len(self.frames)} frames")

    def __len__(self) -> int:
        return len(self.frames)

    def last(self, n: int) -> "SequenceSample":
        fl = None if self.frame_labels is None else self.frame_labels[-n:]
        return SequenceSample(self.frames[-n:], self.label, fl, self.key)


class Batch(NamedTuple):
    frames: np.ndarray  # (N, M_max, D), zero padded
    mask: np.ndarray  # (N, M_max) 1.0 for real frames
    frame_labels: np.ndarray | None  # (N, M_max), -1 on padding
    labels: np.ndarray  # (N,)


def collate(samples: Sequence[SequenceSample], dtype=None) -> Batch:
    dtype = dtype or T.get_default_dtype()
    n = len(samples)
    m_max = max(len(s) for s in samples)
    d = samples[0].frames.shape[1]
    frames = np.zeros((n, m_max, d), dtype=dtype)
    mask = np.zeros((n, m_max), dtype=dtype)
    have_fl = all(s.frame_labels is not None for s in samples)
    fl = np.full((n, m_max), -1, dtype=np.int64) if have_fl else None
    for i, s in enumerate(samples):
        if s.frames.shape[1] != d:
            raise DataError(f"sequence {s.key!r} has embedding dim {s.frames.shape[1]}, expected {d}")
        m = len(s)
        frames[i, :m] = s.frames
        mask[i, :m] = 1.0
        if have_fl:
            fl[i, :m] = s.frame_labels
    return Batch(frames, mask, fl, np.array([s.label for s in samples], dtype=np.int64))


class AggregatorModel(Module):
    def __init__(self, cfg: AggregatorConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, dp, c = cfg.dim, cfg.proj_dim, cfg.n_class
        # input standardisation buffers; identity until fitted on training data
        self.input_mean = Tensor(np.zeros(d), dtype=T.get_default_dtype())
        self.input_scale = Tensor(np.ones(d), dtype=T.get_default_dtype())
        self.instance = Linear(d, c, rng)
        if cfg.variant == "bilinear":
            self.key_proj = Linear(d, dp, rng)
            self.content_proj = Linear(d, dp, rng)
            self.conv_weight = orthogonal_init((cfg.conv_out_channels, dp, cfg.conv_kernel), rng)
            self.conv_bias = param(np.zeros(cfg.conv_out_channels))
            self.head = Linear(cfg.conv_out_channels, c, rng)
        else:
            self.query_proj = Linear(d, dp, rng)
            self.key_proj = Linear(d, dp, rng)
            self.value_proj = Linear(d, dp, rng)
            self.head = Linear(dp, c, rng)

    # -- components ---------------------------------------------------------
    def sequence_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if not n.startswith("instance.")]

    def fit_input_scaling(self, samples: Sequence[SequenceSample], eps: float = 1e-6) -> None:
        frames = np.concatenate([s.frames for s in samples]).astype(np.float64)
        self.input_mean.data = frames.mean(axis=0).astype(self.input_mean.dtype)
        self.input_scale.data = (1.0 / (frames.std(axis=0) + eps)).astype(self.input_scale.dtype)

    def _prepare(self, frames) -> Tensor:
        f = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.input_mean.dtype))
        if f.shape[-1] != self.cfg.dim:
            raise DimensionError(f"frame embeddings have dim {f.shape[-1]}, model expects {self.cfg.dim}")
        return (f - self.input_mean) * self.input_scale

    # -- unpadded single-sequence paths --------------------------------------------
    def single_path(self, frames) -> Tensor:
        """(M, D) -> per-frame logits (M, n_class) with one shared classifier."""
        return self.instance(self._prepare(frames))

    def relation_matrix(self, frames) -> Tensor:
        """B = sum_i k_i c_i^T, shape (D', D') for any number of frames."""
        f = self._prepare(frames)
        k = self.key_proj(f)
        c = self.content_proj(f)
        return T.outer_accumulate(k.T, c.T)

    def sequence_path(self, frames) -> Tensor:
        """(M, D) -> sequence logits (n_class,)."""
        if self.cfg.variant == "self_attention":
            return self.self_attention_path(frames)
        b = self.relation_matrix(frames)
        pooled = T.global_avg_pool(T.conv1d(b, self.conv_weight, self.conv_bias))
        return self.head(pooled)

    def attention_weights(self, frames) -> Tensor:
        f = self._prepare(frames)
        q, k = self.query_proj(f), self.key_proj(f)
        return T.softmax(T.scale(q @ k.T, self.cfg.proj_dim ** -0.5), axis=-1)

    def self_attention_path(self, frames) -> Tensor:
        f = self._prepare(frames)
        attn = self.attention_weights(frames)
        out = attn @ self.value_proj(f)
        return self.head(out.mean(axis=0))

    # -- padded batch path ----------------------------------------------------------
    def forward_batch(self, frames: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Padded (N, M_max, D) frames -> (per-frame logits, sequence logits).

        Padding is removed exactly by the mask, so results equal the
        unpadded paths up to floating-point summation order.
        """
        f = self._prepare(frames)
        single = self.instance(f)
        m = Tensor(mask[..., None].astype(f.dtype))
        if self.cfg.variant == "bilinear":
            k = self.key_proj(f) * m
            c = self.content_proj(f) * m
            b = T.outer_accumulate(k.swapaxes(1, 2), c.swapaxes(1, 2))
            pooled = T.global_avg_pool(T.conv1d(b, self.conv_weight, self.conv_bias))
            return single, self.head(pooled)
        q, k, v = self.query_proj(f), self.key_proj(f), self.value_proj(f)
        scores = T.scale(q @ k.swapaxes(1, 2), self.cfg.proj_dim ** -0.5)
        key_mask = Tensor(((mask[:, None, :] - 1.0) * 1e9).astype(f.dtype))
        attn = T.softmax(scores + key_mask, axis=-1)
        out = (attn @ v) * m
        counts = Tensor(mask.sum(axis=1, keepdims=True).astype(f.dtype))
        return single, self.head(out.sum(axis=1) / counts)


class DualLoss(NamedTuple):
    total: Tensor
    single: float | None
    seq: float


def dual_loss(samples: Sequence[SequenceSample], model: AggregatorModel,
              lambda_single: float, lambda_seq: float) -> DualLoss:
    """Weighted sum of per-frame and per-sequence cross-entropy.

    ``single`` is the mean over frames within each sequence, then over
    sequences. A term with zero weight is kept out of the graph, so its
    parameters receive no gradient at all.
    """
    if isinstance(samples, SequenceSample):
        samples = [samples]
    batch = collate(samples, model.input_mean.dtype)
    if lambda_single > 0 and batch.frame_labels is None:
        raise DataError("lambda_single > 0 requires per-frame labels on every sequence")
    n = len(samples)

    def single_term():
        lengths = batch.mask.sum(axis=1, keepdims=True)
        w = (batch.mask / (lengths * n)).reshape(-1)
        keep = w > 0
        logits = single_logits.reshape(-1, model.cfg.n_class)
        return T.cross_entropy(logits[np.flatnonzero(keep)], batch.frame_labels.reshape(-1)[keep], w[keep])

    terms = []
    if lambda_seq == 0:
        single_logits = model.single_path(batch.frames)
        with T.no_grad():
            _, seq_logits = model.forward_batch(batch.frames, batch.mask)
            loss_seq = T.cross_entropy(seq_logits, batch.labels)
    else:
        single_logits, seq_logits = model.forward_batch(batch.frames, batch.mask)
        loss_seq = T.cross_entropy(seq_logits, batch.labels)
        terms.append(T.scale(T.cast(loss_seq, np.float64), lambda_seq))

    loss_single = None
    if batch.frame_labels is not None:
        if lambda_single > 0:
            loss_single = single_term()
            terms.insert(0, T.scale(T.cast(loss_single, np.float64), lambda_single))
        else:
            with T.no_grad():
                loss_single = single_term()
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return DualLoss(total, None if loss_single is None else loss_single.item(), loss_seq.item())


# -- inference ------------------------------------------------------------------


def predict_proba(samples: Sequence[SequenceSample], model: AggregatorModel, batch_size: int = 256) -> np.ndarray:
    """Softmax of the sequence-path logits, (N, n_class)."""
    out = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            b = collate(samples[i:i + batch_size], model.input_mean.dtype)
            _, logits = model.forward_batch(b.frames, b.mask)
            out.append(T.softmax(logits, axis=-1).data)
    return np.concatenate(out).astype(np.float64)


def predict(frames, model: AggregatorModel) -> tuple[int, float]:
    """Class and positive-class probability for one sequence (sequence path only)."""
    with T.no_grad():
        probs = T.softmax(model.sequence_path(frames), axis=-1).data.astype(np.float64)
    return int(np.argmax(probs)), float(probs[-1])


def evaluate(samples: Sequence[SequenceSample], model: AggregatorModel) -> dict:
    probs = predict_proba(samples, model)
    labels = np.array([s.label for s in samples])
    acc = accuracy(probs.argmax(axis=1), labels)
    try:
        auc = roc_auc(probs[:, -1], labels)
    except UndefinedAUCError:
        auc = float("nan")
    return {"acc": acc, "auc": auc, "scores": probs[:, -1], "labels": labels}


# -- training -------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    patience: int = 10
    early_stopping: bool = True
    batch_size: int = 8
    lr_start: float = 1e-4
    lr_end: float = 5e-5
    weight_decay: float = AGGREGATOR_WEIGHT_DECAY
    betas: tuple[float, float] = AGGREGATOR_BETAS
    clip_norm: float = 5.0
    standardize: bool = True


@dataclass
class TrainResult:
    model: AggregatorModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    init_state: dict = field(default_factory=dict)


def train_aggregator(
    train: Sequence[SequenceSample],
    val: Sequence[SequenceSample],
    cfg: AggregatorConfig,
    seed: int,
    tcfg: TrainConfig | None = None,
) -> TrainResult:
    """AdamW + per-epoch cosine LR + clipping; keeps the best-validation-accuracy epoch."""
    tcfg = tcfg or TrainConfig()
    if not train or not val:
        raise DataError("training and validation splits must be non-empty")
    init_seed, order_seed = np.random.SeedSequence(seed).generate_state(2)
    model = AggregatorModel(cfg, seed=int(init_seed))
    if tcfg.standardize:
        model.fit_input_scaling(train)
    init_state = model.state_dict()
    opt = AdamW(model.named_parameters(), betas=tcfg.betas, weight_decay=tcfg.weight_decay, no_decay=bias_or_norm)
    sched = Schedule("cosine", tcfg.lr_start, tcfg.lr_end, 0, tcfg.epochs)
    rng = np.random.default_rng(int(order_seed))
    train = list(train)

    log: list[dict] = []
    history: list[float] = []
    best_state = model.state_dict()
    best_epoch = 0
    for epoch in range(tcfg.epochs):
        lr = sched.lr(epoch)
        order = rng.permutation(len(train))
        totals, singles, seqs = [], [], []
        for start in range(0, len(order), tcfg.batch_size):
            chunk = [train[i] for i in order[start:start + tcfg.batch_size]]
            opt.zero_grad()
            out = dual_loss(chunk, model, cfg.lambda_single, cfg.lambda_seq)
            if not math.isfinite(out.total.item()):
                raise NonFiniteError(f"non-finite loss at epoch {epoch + 1}")
            out.total.backward()
            clip_grad_norm(opt.params, tcfg.clip_norm)
            opt.step(lr)
            totals.append(out.total.item())
            seqs.append(out.seq)
            if out.single is not None:
                singles.append(out.single)
        val_eval = evaluate(val, model)
        history.append(val_eval["acc"])
        log.append({
            "epoch": epoch + 1,
            "lr": lr,
            "loss_single": math.fsum(singles) / len(singles) if singles else None,
            "loss_seq": math.fsum(seqs) / len(seqs),
            "loss_total": math.fsum(totals) / len(totals),
            "val_acc": val_eval["acc"],
            "val_auc": None if math.isnan(val_eval["auc"]) else val_eval["auc"],
        })
        stop, best = early_stopping(history, tcfg.patience)
        if best != best_epoch:
            best_epoch = best
            best_state = model.state_dict()
        if stop and tcfg.early_stopping:
            break
    model.load_state_dict(best_state)
    return TrainResult(model, log, best_epoch, init_state)


def write_log(path, log: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


# -- parameter accounting -------------------------------------------------------


def param_count(model: AggregatorModel) -> tuple[int, dict[str, int]]:
    """Total trainable scalars and per-component subtotals."""
    parts: dict[str, int] = {}
    for name, p in model.named_parameters():
        comp = name.split(".")[0]
        if comp.startswith("conv_"):
            comp = "conv"
        parts[comp] = parts.get(comp, 0) + p.size
    return sum(parts.values()), parts


def config_dict(cfg: AggregatorConfig) -> dict:
    return asdict(cfg)


def save_aggregator(path, model: AggregatorModel) -> None:
    save_checkpoint(path, "aggregator", config_dict(model.cfg), model.state_dict())


def load_aggregator(path) -> AggregatorModel:
    kind, config, state = load_checkpoint(path)
    if kind != "aggregator":
        raise DataError(f"{path} holds a {kind!r} checkpoint, expected 'aggregator'")
    try:
        model = AggregatorModel(AggregatorConfig(**config))
        model.load_state_dict(state)
    except (TypeError, KeyError, ValueError) as exc:
        raise CorruptFileError(f"{path}: checkpoint does not match its config ({exc})") from None
    return model
