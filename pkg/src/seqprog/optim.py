"""AdamW, learning-rate schedules, gradient clipping, orthogonal init, early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError
from .tensor import Tensor, get_default_dtype

# aggregator and MAE optimizer presets
AGGREGATOR_BETAS = (0.5, 0.9)
AGGREGATOR_WEIGHT_DECAY = 1e-3
MAE_BETAS = (0.9, 0.95)
MAE_WEIGHT_DECAY = 0.05


@dataclass
class AdamWState:
    betas: tuple[float, float] = AGGREGATOR_BETAS
    eps: float = 1e-8
    weight_decay: float = AGGREGATOR_WEIGHT_DECAY
    no_decay: list[bool] = field(default_factory=list)
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], no_decay: Sequence[bool] | None = None, **kw) -> "AdamWState":
        state = cls(**kw)
        state.exp_avg = [np.zeros_like(p.data) for p in params]
        state.exp_avg_sq = [np.zeros_like(p.data) for p in params]
        state.no_decay = list(no_decay) if no_decay is not None else [False] * len(params)
        return state


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState, lr: float) -> None:
    """Decoupled-weight-decay Adam with bias correction.

    Parameters whose gradient is ``None`` are skipped entirely (no moment
    update, no decay). Any non-finite gradient aborts before anything is
    mutated.
    """
    if len(params) != len(state.exp_avg) or len(grads) != len(params):
        raise ValueError("parameter, gradient and optimizer-state counts differ")
    for p, g, m in zip(params, grads, state.exp_avg):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to adamw_step")

    state.step += 1
    beta1, beta2 = state.betas
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p, g, m, v, exempt in zip(params, grads, state.exp_avg, state.exp_avg_sq, state.no_decay):
        if g is None:
            continue
        if state.weight_decay and not exempt:
            p.data -= lr * state.weight_decay * p.data
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class AdamW:
    """Owns an ``AdamWState`` over named parameters; reads ``p.grad``."""

    def __init__(
        self,
        named_params,
        betas: tuple[float, float] = AGGREGATOR_BETAS,
        eps: float = 1e-8,
        weight_decay: float = AGGREGATOR_WEIGHT_DECAY,
        no_decay: Callable[[str, Tensor], bool] | None = None,
    ):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        flags = [bool(no_decay(n, p)) for n, p in named] if no_decay else None
        self.state = AdamWState.for_params(self.params, flags, betas=betas, eps=eps, weight_decay=weight_decay)

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def bias_or_norm(name: str, p: Tensor) -> bool:
    """Decay exemption rule: 1-D tensors are biases, norm scales or tokens."""
    return p.ndim <= 1


# -- schedules ----------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    kind: str = "cosine"  # constant | cosine | warmup_cosine
    lr_start: float = 1e-4
    lr_end: float = 5e-5
    warmup_epochs: int = 0
    total_epochs: int = 50

    def lr(self, epoch: int) -> float:
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        if self.kind == "constant":
            return self.lr_start
        if self.kind == "cosine":
            return cosine_lr(epoch, self)
        if self.kind == "warmup_cosine":
            if epoch < self.warmup_epochs:
                return self.lr_start * (epoch + 1) / self.warmup_epochs
            tail = Schedule("cosine", self.lr_start, self.lr_end, 0, self.total_epochs - self.warmup_epochs)
            return cosine_lr(epoch - self.warmup_epochs, tail)
        raise ValueError(f"unknown schedule kind {self.kind!r}")


def cosine_lr(epoch: int, sched: Schedule) -> float:
    """Per-epoch cosine annealing from lr_start (epoch 0) to lr_end (last epoch)."""
    if not 0 <= epoch < sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    if sched.total_epochs == 1:
        return sched.lr_start
    w = 0.5 * (1.0 + math.cos(math.pi * epoch / (sched.total_epochs - 1)))
    return sched.lr_end + (sched.lr_start - sched.lr_end) * w


def scaled_lr(base_lr: float, batch_size: int, reference: int = 256) -> float:
    """Linear batch-size scaling rule."""
    return base_lr * batch_size / reference


# -- clipping / init / early stopping -----------------------------------------------


def global_grad_norm(grads: Sequence[np.ndarray | None]) -> float:
    total = math.fsum(float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
                      for g in grads if g is not None)
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float = 5.0) -> bool:
    """Rescale all gradients in place when their global L2 norm exceeds ``max_norm``.

    Returns True when scaling was applied.
    """
    norm = global_grad_norm([p.grad for p in params])
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if norm <= max_norm:
        return False
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = (p.grad.astype(np.float64) * factor).astype(p.grad.dtype)
    return True


def orthogonal_init(shape, rng: np.random.Generator | int, gain: float = 1.0, dtype=None) -> Tensor:
    """Orthogonal weights via QR of a Gaussian matrix with sign-fixed diagonal.

    Trailing axes are flattened, so a conv kernel (C_out, C_in, k) is
    orthogonal as a C_out x (C_in*k) matrix.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or 0 in shape:
        raise ValueError(f"orthogonal_init needs a non-empty shape of rank >= 2, got {shape}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    rows, cols = shape[0], int(np.prod(shape[1:]))
    wide = rows <= cols
    a = rng.standard_normal((cols, rows) if wide else (rows, cols))
    q, r = np.linalg.qr(a)
    q *= np.where(np.diag(r) < 0, -1.0, 1.0)
    w = q.T if wide else q
    return Tensor((gain * w).reshape(shape), requires_grad=True, dtype=dtype or get_default_dtype())


def early_stopping(history: Sequence[float], patience: int = 10) -> tuple[bool, int]:
    """Decide whether to stop from per-epoch validation accuracy.

    Only a strictly greater value counts as improvement. Returns
    ``(stop, best_epoch)`` with 1-based epochs; the earliest maximum wins.
    """
    if not history:
        raise ValueError("empty validation history")
    best_idx = int(np.argmax(np.asarray(history, dtype=np.float64)))
    stop = len(history) - 1 - best_idx >= patience
    return stop, best_idx + 1
