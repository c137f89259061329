"""Image primitives: pooling, subsampling, photometric augmentation,
blending and resampling.

Images are float ``H x W x 3`` arrays with values in ``[0, 1]``. Every
function here is pure and returns a new array.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from skimage.color import hsv2rgb, rgb2hsv

from .errors import InvalidArgument

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgument(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidArgument("image must be at least 1x1")
    return arr


@dataclass(frozen=True)
class PhotometricParams:
    brightness_factor: float = 1.0
    contrast_factor: float = 1.0
    hue_shift: float = 0.0  # degrees

    def __post_init__(self):
        if not self.brightness_factor > 0 or not self.contrast_factor > 0:
            raise InvalidArgument("brightness and contrast factors must be > 0")
        if not -180.0 <= self.hue_shift <= 180.0:
            raise InvalidArgument("hue_shift must lie in [-180, 180] degrees")

    @classmethod
    def sample(cls, rng: np.random.Generator, brightness=(0.7, 1.3), contrast=(0.7, 1.3), hue=(-18.0, 18.0)):
        return cls(
            float(rng.uniform(*brightness)),
            float(rng.uniform(*contrast)),
            float(rng.uniform(*hue)),
        )


def avg_pool(img, m: int) -> np.ndarray:
    """Mean of each non-overlapping ``m x m`` block; trailing rows/cols are dropped."""
    img = as_image(img)
    if m < 1:
        raise InvalidArgument(f"pool size must be >= 1, got {m}")
    h, w = img.shape[:2]
    if h < m or w < m:
        raise InvalidArgument(f"image {h}x{w} is smaller than pool size {m}")
    hh, ww = h // m, w // m
    blocks = img[: hh * m, : ww * m].reshape(hh, m, ww, m, 3)
    return blocks.mean(axis=(1, 3))


def subsample(img, m: int, offset=(0, 0)) -> np.ndarray:
    """Keep every ``m``-th pixel starting at ``offset`` (row, col)."""
    img = as_image(img)
    if m < 1:
        raise InvalidArgument(f"stride must be >= 1, got {m}")
    r, c = offset
    if not (0 <= r < m and 0 <= c < m):
        raise InvalidArgument(f"offset {offset} must lie in [0, {m}) on both axes")
    return img[r::m, c::m].copy()


def _adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = img.mean()
    return np.clip((img - mean) * factor + mean, 0.0, 1.0)


def _rotate_hue(img: np.ndarray, degrees: float) -> np.ndarray:
    hsv = rgb2hsv(img)
    hsv[..., 0] = np.mod(hsv[..., 0] + degrees / 360.0, 1.0)
    return hsv2rgb(hsv)


def photometric_augment(img, params: PhotometricParams) -> np.ndarray:
    """Brightness, then contrast, then hue rotation, clamping after each step.

    Identity factors are skipped so that identity params return the input
    bit-for-bit.
    """
    out = as_image(img).copy()
    if params.brightness_factor != 1.0:
        out = np.clip(out * params.brightness_factor, 0.0, 1.0)
    if params.contrast_factor != 1.0:
        out = _adjust_contrast(out, params.contrast_factor)
    if params.hue_shift != 0.0:
        out = np.clip(_rotate_hue(out, params.hue_shift), 0.0, 1.0)
    return np.clip(out, 0.0, 1.0)


def alpha_blend(low, normal, alpha: float) -> np.ndarray:
    low, normal = as_image(low), as_image(normal)
    if low.shape != normal.shape:
        raise InvalidArgument(f"shape mismatch: {low.shape} vs {normal.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgument(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * low + (1.0 - alpha) * normal


def _source_index(out_size: int, in_size: int):
    # half-pixel centres, negative coordinates clamped to the first pixel
    scale = in_size / out_size
    src = np.maximum((np.arange(out_size) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear(arr: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resampling of an ``H x W x C`` array (half-pixel convention)."""
    if new_h < 1 or new_w < 1:
        raise InvalidArgument(f"target size must be >= 1, got {new_h}x{new_w}")
    h, w = arr.shape[:2]
    if (h, w) == (new_h, new_w):
        return arr.copy()
    r0, r1, fr = _source_index(new_h, h)
    c0, c1, fc = _source_index(new_w, w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = arr[r0][:, c0] * (1 - fc) + arr[r0][:, c1] * fc
    bottom = arr[r1][:, c0] * (1 - fc) + arr[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def resize_bilinear(img, new_h: int, new_w: int) -> np.ndarray:
    return bilinear(as_image(img), new_h, new_w)


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """``H x W x 3`` array (or a list of them) to an ``N x 3 x H x W`` tensor."""
    if isinstance(img, (list, tuple)):
        return torch.cat([to_tensor(i, dtype) for i in img])
    arr = as_image(img)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).unsqueeze(0).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    """Single-image tensor (``3 x H x W`` or ``1 x 3 x H x W``) back to an array."""
    t = t.detach().to(torch.float64).cpu()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise InvalidArgument("to_image expects a single image")
        t = t[0]
    return t.numpy().transpose(1, 2, 0).copy()


def read_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def quantize(img) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-even."""
    return np.rint(np.clip(as_image(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(quantize(img)).save(path)


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
