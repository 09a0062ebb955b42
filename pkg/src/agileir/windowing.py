"""Window partitioning, cyclic shifts, attention masks and relative positions.

Feature maps travel as (B, H, W, C) tensors.  A window pass reshapes the map
into non-overlapping M x M tiles, runs attention per tile, and reassembles.
Shifted layers first roll the map by -M//2 along both spatial axes; tokens
that wrap around then sit next to tokens from the far side of the image, and
the additive mask keeps those pairs from attending to each other.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_NEG = -100.0


def window_partition(x: Tensor, m: int, shift: int = 0) -> Tensor:
    """(B, H, W, C) -> (B*nW, M*M, C), windows in row-major order.

    A nonzero ``shift`` folds the cyclic shift by ``-shift`` into the same
    buffer rearrangement (shifted layers pay for one copy, not three).
    """
    return T.window_split(x, m, shift)


def window_reverse(x: Tensor, m: int, h: int, w: int, shift: int = 0) -> Tensor:
    """Inverse of :func:`window_partition` for an (H, W) map."""
    return T.window_merge(x, m, h, w, shift)


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    """Roll the spatial axes by ``-shift`` (use a negative shift to undo)."""
    return T.roll2d(x, -shift, -shift)


def region_id(h: int, w: int, m: int, shift: int) -> np.ndarray:
    """Label each pixel of the shifted map with its contiguity region.

    After the roll, rows [0, H-M) hold one contiguous strip of the source
    image, rows [H-M, H-shift) the strip that ended at the bottom edge, and
    rows [H-shift, H) the strip wrapped around from the top; same for
    columns.  Pixels may attend within a window only when both labels agree,
    which is exactly "they were neighbours before the shift".

    Returns an (H, W) int array with at most 9 distinct labels.
    """
    ids = np.zeros((h, w), dtype=np.int64)
    if shift == 0:
        return ids
    bounds = (slice(0, h - m), slice(h - m, h - shift), slice(h - shift, h))
    bounds_w = (slice(0, w - m), slice(w - m, w - shift), slice(w - shift, w))
    label = 0
    for hs in bounds:
        for ws in bounds_w:
            ids[hs, ws] = label
            label += 1
    return ids


def build_attn_mask(h: int, w: int, m: int, shift: int) -> Optional[np.ndarray]:
    """Additive attention mask for shifted windows.

    Returns (nW, M*M, M*M) float32 with 0 where a pair shares a region and
    ``MASK_NEG`` where it does not, or ``None`` for shift == 0 (no masking).
    """
    if shift == 0:
        return None
    ids = region_id(h, w, m, shift)
    tiles = ids.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = tiles[:, :, None] != tiles[:, None, :]
    return np.where(diff, np.float32(MASK_NEG), np.float32(0.0))


def build_rel_index(m: int) -> np.ndarray:
    """(M*M, M*M) lookup into a (2M-1)^2 relative-position bias table.

    Entry (p, q) encodes the row/col offset between window positions p and q:
    index = (drow + M - 1) * (2M - 1) + (dcol + M - 1).
    """
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    coords = coords.reshape(2, -1)  # (2, M*M) rows then cols
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)


def pad_to_multiple(x: Tensor, m: int) -> tuple[Tensor, int, int]:
    """Symmetric-pad the spatial axes of (B, H, W, C) up to multiples of M.

    Mirror padding keeps the padded strip statistically close to the image
    content (and still works for one-pixel inputs, where the edge simply
    repeats).  Returns the padded tensor and the original H, W for cropping.
    """
    b, h, w, c = x.shape
    ph = (m - h % m) % m
    pw = (m - w % m) % m
    if ph == 0 and pw == 0:
        return x, h, w
    rows = _symmetric_index(h, ph)
    cols = _symmetric_index(w, pw)
    return T.gather_hw(x, rows, cols), h, w


def _symmetric_index(n: int, pad: int) -> np.ndarray:
    """Index vector realizing edge-inclusive mirror padding on the right."""
    idx = np.concatenate([np.arange(n), np.arange(n)[::-1]])
    reps = int(np.ceil((n + pad) / (2 * n)))
    return np.tile(idx, reps)[: n + pad]
