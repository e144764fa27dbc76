"""Image loading, augmentation and ImageNet-statistics normalisation."""

from __future__ import annotations

import math

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import DataError

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
DESK_SIZE = 32
FULL_SIZE = 224
CROP_SCALE = (0.2, 1.0)
CROP_RATIO = (3 / 4, 4 / 3)


def load_image(path) -> np.ndarray:
    """Decode an image file to float32 HxWx3 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    return arr


def to_float_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DataError(f"expected an HxW or HxWx{{1,3}} image, got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def _resize(arr: np.ndarray, size: int, box=None) -> np.ndarray:
    h, w = arr.shape[:2]
    if box is None and (h, w) == (size, size):
        return arr.copy()
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(arr[..., c]), mode="F")
                   .resize((size, size), Image.BICUBIC, box=box))
        for c in range(arr.shape[2])
    ]
    return np.stack(channels, axis=-1).astype(np.float32)


def random_resized_crop_box(h: int, w: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*CROP_SCALE)
        ratio = math.exp(rng.uniform(math.log(CROP_RATIO[0]), math.log(CROP_RATIO[1])))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return left, top, left + cw, top + ch
    return 0, 0, w, h


def preprocess_image(image, train_mode: bool = False, rng: np.random.Generator | int | None = None,
                     size: int = DESK_SIZE) -> np.ndarray:
    """Resize (train: random resized crop + horizontal flip) and normalise.

    Returns float32 (size, size, 3).
    """
    arr = to_float_rgb(image)
    if train_mode:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        h, w = arr.shape[:2]
        out = _resize(arr, size, box=random_resized_crop_box(h, w, rng))
        if rng.random() < 0.5:
            out = out[:, ::-1]
    else:
        out = _resize(arr, size)
    return np.ascontiguousarray((out - IMAGENET_MEAN) / IMAGENET_STD, dtype=np.float32)
