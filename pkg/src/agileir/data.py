"""Image I/O, bicubic degradation and the paired-patch pipeline.

The degradation convention matters: benchmark LR images are produced by
MATLAB-style bicubic resizing (cubic kernel a = -0.5, antialiased by
widening the kernel when shrinking).  ``resize_bicubic`` reimplements that
convention so synthesized LR inputs are comparable to the standard
benchmarks; a generic image library resize would not be.
"""

from __future__ import annotations

import os
import warnings
from typing import Iterable, Optional

import numpy as np
from PIL import Image


def imread(path: str) -> np.ndarray:
    """Load an 8-bit image as float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def imwrite(path: str, img: np.ndarray):
    """Save a float (H, W, 3) image in [0, 1] as 8-bit PNG (values clipped)."""
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _cubic(x: np.ndarray) -> np.ndarray:
    """Keys cubic kernel with a = -0.5 (the MATLAB/imresize choice)."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    inner = 1.5 * ax3 - 2.5 * ax2 + 1.0
    outer = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _resize_weights(in_len: int, out_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-pixel contributor indices and normalized weights.

    When shrinking, the kernel is stretched by 1/scale (antialiasing).
    Out-of-range contributors are clamped to the edge, which reproduces the
    replicated-border behaviour of the reference implementation.
    """
    scale = out_len / in_len
    kernel_width = 4.0
    if scale < 1.0:
        kernel_width /= scale
    # centers of output pixels in input coordinates
    x = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(x - kernel_width / 2)
    taps = int(np.ceil(kernel_width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = x[:, None] - idx
    if scale < 1.0:
        w = scale * _cubic(dist * scale)
    else:
        w = _cubic(dist)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1).astype(np.int64)
    # drop all-zero tap columns to keep the matmul small
    keep = np.abs(w).sum(axis=0) > 0
    return idx[:, keep], w[:, keep]


def _resize_axis(img: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    idx, w = _resize_weights(img.shape[axis], out_len)
    moved = np.moveaxis(img, axis, 0)
    out = np.einsum("ot,ot...->o...", w, moved[idx])
    return np.moveaxis(out, 0, axis)


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable antialiased bicubic resize of an (H, W[, C]) float image."""
    out = _resize_axis(img.astype(np.float64), out_h, 0)
    out = _resize_axis(out, out_w, 1)
    return out.astype(np.float32)


def downscale(img: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic 1/scale downsample; input extents must divide by scale."""
    h, w = img.shape[:2]
    if h % scale or w % scale:
        raise ValueError(f"image {h}x{w} not divisible by scale {scale}")
    return resize_bicubic(img, h // scale, w // scale)


def augment_pair(lr: np.ndarray, hr: np.ndarray,
                 flip: bool, rot: bool) -> tuple[np.ndarray, np.ndarray]:
    """Apply the same horizontal flip / 90-degree rotation to both patches."""
    if flip:
        lr = lr[:, ::-1]
        hr = hr[:, ::-1]
    if rot:
        lr = np.rot90(lr)
        hr = np.rot90(hr)
    return lr, hr


class PairedDataset:
    """HR images with cached bicubic LR counterparts.

    Args:
        hr_images: float (H, W, 3) arrays in [0, 1].
        scale: downsampling factor.
        names: optional labels used in warnings.

    Images whose extents do not divide by ``scale`` are cropped down to the
    nearest multiple first (benchmark convention).
    """

    def __init__(self, hr_images: Iterable[np.ndarray], scale: int,
                 names: Optional[list[str]] = None):
        self.scale = scale
        self.hr: list[np.ndarray] = []
        self.lr: list[np.ndarray] = []
        for img in hr_images:
            h, w = img.shape[:2]
            img = img[: h - h % scale, : w - w % scale]
            self.hr.append(np.ascontiguousarray(img))
            self.lr.append(downscale(img, scale))
        self.names = names or [f"image_{i}" for i in range(len(self.hr))]

    def __len__(self):
        return len(self.hr)

    def usable_indices(self, patch: int) -> list[int]:
        """Indices of images large enough for an LR patch of side ``patch``."""
        out = []
        for i, lr in enumerate(self.lr):
            if lr.shape[0] >= patch and lr.shape[1] >= patch:
                out.append(i)
            else:
                warnings.warn(
                    f"{self.names[i]}: LR {lr.shape[1]}x{lr.shape[0]} smaller "
                    f"than patch {patch}, skipped")
        return out

    def sample_batch(self, rng: np.random.Generator, patch: int,
                     batch: int) -> tuple[np.ndarray, np.ndarray]:
        """Aligned random crops with flip/rotation augmentation.

        Returns float32 (B, 3, p, p) LR and (B, 3, s*p, s*p) HR batches.
        """
        usable = self.usable_indices(patch)
        if not usable:
            raise ValueError(f"no image large enough for patch size {patch}")
        s = self.scale
        lr_out = np.empty((batch, 3, patch, patch), dtype=np.float32)
        hr_out = np.empty((batch, 3, patch * s, patch * s), dtype=np.float32)
        for b in range(batch):
            i = usable[rng.integers(len(usable))]
            lr, hr = self.lr[i], self.hr[i]
            y = int(rng.integers(lr.shape[0] - patch + 1))
            x = int(rng.integers(lr.shape[1] - patch + 1))
            lp = lr[y:y + patch, x:x + patch]
            hp = hr[y * s:(y + patch) * s, x * s:(x + patch) * s]
            lp, hp = augment_pair(lp, hp, rng.random() < 0.5, rng.random() < 0.5)
            lr_out[b] = lp.transpose(2, 0, 1)
            hr_out[b] = hp.transpose(2, 0, 1)
        return lr_out, hr_out


def load_dataset(dir_path: str, scale: int) -> PairedDataset:
    """Build a :class:`PairedDataset` from a directory of HR PNGs.

    Files are loaded in sorted name order (keeps sampling deterministic for
    a fixed seed).
    """
    names = sorted(f for f in os.listdir(dir_path) if f.lower().endswith(".png"))
    if not names:
        raise ValueError(f"no PNG images in {dir_path}")
    images = [imread(os.path.join(dir_path, n)) for n in names]
    return PairedDataset(images, scale, names=names)
