"""Masked-autoencoder pretraining and the frozen encoder used for embeddings.

The encoder only ever receives the visible patches (masked pixels are
dropped before the patch projection). The decoder sees encoded visible
tokens plus a learned mask token at every masked position, both with
learned positional embeddings, and the loss is the mean squared error over
masked patches only. After pretraining the decoder is ignored; the image
embedding is the mean of the encoder's output tokens over all patches.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data.preprocess import preprocess_image
from .errors import CorruptFileError, DataError, DimensionError
from .nn import Block, LayerNorm, Linear, Module, param
from .optim import MAE_BETAS, MAE_WEIGHT_DECAY, AdamW, Schedule, bias_or_norm, scaled_lr
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class MAEConfig:
    image_size: int = 32
    patch_size: int = 8
    in_chans: int = 3
    mask_ratio: float = 0.75
    encoder_dim: int = 64
    encoder_layers: int = 2
    encoder_heads: int = 4
    decoder_dim: int = 32
    decoder_layers: int = 1
    decoder_heads: int = 2
    mlp_ratio: float = 2.0
    norm_masked_patches: bool = False
    base_lr: float = 1e-2
    batch_size: int = 64
    warmup_epochs: int = 2
    weight_decay: float = MAE_WEIGHT_DECAY

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")

    @classmethod
    def full_scale(cls) -> "MAEConfig":
        """ViT-Base sized preset (224px, 16px patches, 768-d features)."""
        return cls(image_size=224, patch_size=16, encoder_dim=768, encoder_layers=12, encoder_heads=12,
                   decoder_dim=512, decoder_layers=8, decoder_heads=16, mlp_ratio=4.0,
                   base_lr=1.5e-4, batch_size=256, warmup_epochs=40)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.in_chans

    @property
    def num_masked(self) -> int:
        return masked_count(self.num_patches, self.mask_ratio)


# -- patches and masks -----------------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, C) -> (N, p*p*C), or (B, H, W, C) -> (B, N, p*p*C); row-major patch order."""
    img = np.asarray(image)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    b, h, w, c = img.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    x = img.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, (h // p) * (w // p), p * p * c)
    return x if batched else x[0]


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int, channels: int = 3) -> np.ndarray:
    x = np.asarray(patches)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    p = patch_size
    b = x.shape[0]
    gh, gw = height // p, width // p
    if x.shape[1] != gh * gw or x.shape[2] != p * p * channels:
        raise DimensionError(f"patch tensor {x.shape} does not match a {height}x{width}x{channels} image")
    img = x.reshape(b, gh, gw, p, p, channels).transpose(0, 1, 3, 2, 4, 5).reshape(b, height, width, channels)
    return img if batched else img[0]


def masked_count(n: int, ratio: float) -> int:
    return int(math.floor(ratio * n + 0.5))


@dataclass
class MaskPlan:
    order: np.ndarray  # random permutation of patch indices; the first n_masked are masked
    mask: np.ndarray  # (N,) bool, True = masked
    seed: int | None = None

    @property
    def visible(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def sample_mask(n: int, ratio: float, seed: int | np.random.Generator | None = None) -> MaskPlan:
    """Mask exactly round(ratio * n) patches chosen uniformly without replacement."""
    k = masked_count(n, ratio)
    if not 0 < k < n:
        raise ValueError(f"mask ratio {ratio} on {n} patches masks {k}; need 0 < k < n")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return MaskPlan(order, mask, seed if isinstance(seed, int) else None)


def _split_indices(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(B, N) bool -> visible (B, Nv) and masked (B, Nm) indices, each ascending."""
    idx = np.argsort(mask, axis=1, kind="stable")
    n_vis = int((~mask[0]).sum())
    if not (mask.sum(axis=1) == mask.shape[1] - n_vis).all():
        raise ValueError("every row of a batch mask must hide the same number of patches")
    return idx[:, :n_vis], idx[:, n_vis:]


# -- model ----------------------------------------------------------------------------


class MAEModel(Module):
    def __init__(self, cfg: MAEConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        n, e, dd = cfg.num_patches, cfg.encoder_dim, cfg.decoder_dim
        # encoder (the retained feature extractor)
        self.patch_embed = Linear(cfg.patch_dim, e, rng)
        self.pos_embed = param(0.02 * rng.standard_normal((n, e)))
        self.blocks = [Block(e, cfg.encoder_heads, cfg.mlp_ratio, rng) for _ in range(cfg.encoder_layers)]
        self.norm = LayerNorm(e)
        # decoder (discarded after pretraining)
        self.decoder_embed = Linear(e, dd, rng)
        self.mask_token = param(0.02 * rng.standard_normal(dd))
        self.decoder_pos_embed = param(0.02 * rng.standard_normal((n, dd)))
        self.decoder_blocks = [Block(dd, cfg.decoder_heads, cfg.mlp_ratio, rng) for _ in range(cfg.decoder_layers)]
        self.decoder_norm = LayerNorm(dd)
        self.decoder_pred = Linear(dd, cfg.patch_dim, rng)

    @property
    def feature_dim(self) -> int:
        return self.cfg.encoder_dim

    def _check(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches, dtype=self.pos_embed.dtype)
        if patches.ndim != 3 or patches.shape[1:] != (self.cfg.num_patches, self.cfg.patch_dim):
            raise DimensionError(
                f"expected (B, {self.cfg.num_patches}, {self.cfg.patch_dim}) patches, got {patches.shape}")
        return patches

    def _encoder_stack(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def encode_visible(self, patches: np.ndarray, visible: np.ndarray) -> Tensor:
        """Encode only the listed patches: (B, N, P) with (B, Nv) indices -> (B, Nv, E)."""
        patches = self._check(patches)
        rows = np.arange(patches.shape[0])[:, None]
        x = self.patch_embed(Tensor(patches[rows, visible])) + self.pos_embed[visible]
        return self._encoder_stack(x)

    def encode_all(self, patches: np.ndarray) -> Tensor:
        patches = self._check(patches)
        return self._encoder_stack(self.patch_embed(Tensor(patches)) + self.pos_embed)

    def decode(self, latent: Tensor, visible: np.ndarray, masked: np.ndarray) -> Tensor:
        b = latent.shape[0]
        x = self.decoder_embed(latent)
        tokens = T.broadcast_to(self.mask_token, (b, masked.shape[1], self.cfg.decoder_dim))
        full = T.concat([x, tokens], axis=1)
        restore = np.argsort(np.concatenate([visible, masked], axis=1), axis=1)
        x = T.gather_rows(full, restore) + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.decoder_pred(self.decoder_norm(x))

    def targets(self, patches: np.ndarray) -> np.ndarray:
        if not self.cfg.norm_masked_patches:
            return patches
        mu = patches.mean(axis=-1, keepdims=True)
        var = patches.var(axis=-1, keepdims=True)
        return (patches - mu) / np.sqrt(var + 1e-6)

    def forward_loss(self, patches: np.ndarray, mask: np.ndarray, targets: np.ndarray | None = None) -> Tensor:
        """Mean squared reconstruction error over masked patches.

        ``mask`` is (B, N) bool with True on masked patches. ``targets``
        defaults to the (optionally per-patch normalised) input patches.
        """
        patches = self._check(patches)
        mask = np.asarray(mask, dtype=bool)
        visible, masked = _split_indices(mask)
        pred = self.decode(self.encode_visible(patches, visible), visible, masked)
        tgt = self.targets(patches) if targets is None else np.asarray(targets, dtype=patches.dtype)
        per_patch = T.square(pred - Tensor(tgt)).mean(axis=-1)
        weights = Tensor((mask / mask.sum()).astype(patches.dtype))
        return (per_patch * weights).sum()

    def embed(self, patches: np.ndarray) -> np.ndarray:
        """Mean-pooled encoder tokens over all patches: (B, N, P) -> (B, E)."""
        with T.no_grad():
            return self.encode_all(patches).mean(axis=1).data.copy()


EncoderModel = MAEModel


def mae_forward(image: np.ndarray, plan: MaskPlan, model: MAEModel, target: np.ndarray | None = None) -> Tensor:
    """Reconstruction loss for one preprocessed (H, W, C) image under ``plan``."""
    patches = patchify(image, model.cfg.patch_size)
    if plan.mask.shape != (patches.shape[0],):
        raise DimensionError(f"mask plan covers {plan.mask.shape[0]} patches, image has {patches.shape[0]}")
    tgt = None if target is None else patchify(target, model.cfg.patch_size)[None]
    return model.forward_loss(patches[None], plan.mask[None], tgt)


def extract_embeddings(images: Sequence[np.ndarray], model: MAEModel, batch_size: int = 256) -> np.ndarray:
    """Embeddings of already-preprocessed (H, W, C) images, in input order."""
    cfg = model.cfg
    out = []
    for i in range(0, len(images), batch_size):
        batch = np.stack(images[i:i + batch_size])
        if batch.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_chans):
            raise DimensionError(f"images of shape {batch.shape[1:]} do not match the "
                                 f"{cfg.image_size}x{cfg.image_size}x{cfg.in_chans} encoder")
        out.append(model.embed(patchify(batch, cfg.patch_size)))
    return np.concatenate(out) if out else np.zeros((0, cfg.encoder_dim), dtype=np.float32)


def extract_embedding(image: np.ndarray, model: MAEModel) -> np.ndarray:
    return extract_embeddings([image], model)[0]


# -- pretraining -------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: MAEModel
    log: list[dict] = field(default_factory=list)


def pretrain(
    corpus: Sequence[np.ndarray],
    cfg: MAEConfig,
    epochs: int,
    seed: int,
    out_dir: str | Path | None = None,
    augment: bool = True,
) -> PretrainResult:
    """Self-supervised reconstruction training on raw images (no labels involved).

    Images are raw uint8 or [0, 1] float arrays; each epoch re-augments them
    (random resized crop + flip) and draws fresh masks. With ``out_dir`` the
    checkpoint ``mae.ckpt`` and ``pretrain_log.jsonl`` are written there.
    """
    corpus = list(corpus)
    if not corpus:
        raise DataError("pretraining corpus is empty")
    init_seed, data_seed = np.random.SeedSequence(seed).generate_state(2)
    model = MAEModel(cfg, seed=int(init_seed))
    rng = np.random.default_rng(int(data_seed))
    lr_peak = scaled_lr(cfg.base_lr, cfg.batch_size)
    opt = AdamW(model.named_parameters(), betas=MAE_BETAS, weight_decay=cfg.weight_decay, no_decay=bias_or_norm)
    n_masked = cfg.num_masked
    log: list[dict] = []
    if epochs > 0:
        sched = Schedule("warmup_cosine", lr_peak, 0.0, min(cfg.warmup_epochs, epochs - 1), epochs)
    for epoch in range(epochs):
        lr = sched.lr(epoch)
        order = rng.permutation(len(corpus))
        losses, weights = [], []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            imgs = np.stack([preprocess_image(corpus[i], augment, rng, cfg.image_size) for i in idx])
            patches = patchify(imgs, cfg.patch_size)
            noise = rng.random((len(idx), cfg.num_patches))
            mask = np.zeros_like(noise, dtype=bool)
            np.put_along_axis(mask, np.argsort(noise, axis=1)[:, :n_masked], True, axis=1)
            opt.zero_grad()
            loss = model.forward_loss(patches, mask)
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
            weights.append(len(idx))
        mean_loss = float(np.dot(losses, weights) / np.sum(weights))
        log.append({"epoch": epoch + 1, "lr": lr, "loss": mean_loss})
        logger.info("mae epoch %d lr %.3g loss %.5f", epoch + 1, lr, mean_loss)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_mae(out / "mae.ckpt", model)
        with open(out / "pretrain_log.jsonl", "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
    return PretrainResult(model, log)


def save_mae(path, model: MAEModel) -> None:
    save_checkpoint(path, "mae", asdict(model.cfg), model.state_dict())


def load_mae(path) -> MAEModel:
    kind, config, state = load_checkpoint(path)
    if kind != "mae":
        raise DataError(f"{path} holds a {kind!r} checkpoint, expected 'mae'")
    try:
        model = MAEModel(MAEConfig(**config))
        model.load_state_dict(state)
    except (TypeError, KeyError, ValueError) as exc:
        raise CorruptFileError(f"{path}: checkpoint does not match its config ({exc})") from None
    return model
