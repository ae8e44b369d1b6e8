"""Binary mask primitives: validation, RLE, IoU, mask algebra, crop-resize.

Binary masks are plain 2-D ``numpy`` boolean arrays (row-major, 1 = foreground).
Every function here is pure and never mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BoxOutOfBounds, ChecksumError, ContainmentError, DimensionMismatch

MASK_THRESHOLD = 0.5


def as_mask(data) -> np.ndarray:
    """Coerce ``data`` to a 2-D bool array, rejecting values outside {0, 1}."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise DimensionMismatch(f"binary mask must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError("binary mask values must be 0 or 1")
        arr = arr.astype(bool)
    return arr


def binarize(soft, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    return np.asarray(soft) >= threshold


@dataclass(frozen=True)
class Box:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def check_within(self, height: int, width: int) -> None:
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise BoxOutOfBounds(f"{self} not inside {height}x{width} image")

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, xs: Sequence[int]) -> "Box":
        x0, y0, x1, y1 = (int(v) for v in xs)
        return cls(x0, y0, x1, y1)

    @classmethod
    def tight(cls, mask) -> "Box":
        """Tight bounding box of the foreground of ``mask``."""
        m = as_mask(mask)
        ys = np.flatnonzero(m.any(axis=1))
        xs = np.flatnonzero(m.any(axis=0))
        if ys.size == 0:
            raise ValueError("empty mask has no bounding box")
        return cls(int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1)


@dataclass(frozen=True)
class RleMask:
    """Row-major run-length encoding; ``counts[0]`` is always a zero run."""

    height: int
    width: int
    counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {"h": self.height, "w": self.width, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        return cls(int(obj["h"]), int(obj["w"]), tuple(int(c) for c in obj["counts"]))


def rle_encode(mask) -> RleMask:
    m = as_mask(mask)
    h, w = m.shape
    flat = m.ravel().astype(np.int8)
    if flat.size == 0:
        return RleMask(h, w, (0,))
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask(h, w, tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    counts = np.asarray(rle.counts, dtype=np.int64)
    total = rle.height * rle.width
    if (counts < 0).any():
        raise ChecksumError("negative run length")
    if int(counts.sum()) != total:
        raise ChecksumError(f"runs sum to {int(counts.sum())}, expected {total}")
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape(rle.height, rle.width)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")


def mask_iou(a, b) -> float:
    """IoU of two masks; two empty masks score 1.0."""
    a, b = as_mask(a), as_mask(b)
    _same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def derive_occluded(amodal, visible) -> np.ndarray:
    amodal, visible = as_mask(amodal), as_mask(visible)
    _same_shape(amodal, visible)
    if (visible & ~amodal).any():
        raise ContainmentError("visible mask has pixels outside the amodal mask")
    return amodal & ~visible


def nearest_indices(start: int, length: int, out: int) -> np.ndarray:
    """Source indices sampled by nearest-neighbour resize of ``length`` cells to ``out``."""
    idx = np.floor((np.arange(out) + 0.5) * length / out).astype(np.int64)
    return start + np.minimum(idx, length - 1)


def crop_resize_mask(mask, box: Box, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour crop of ``box`` resized to ``out_h x out_w``."""
    m = as_mask(mask)
    box.check_within(*m.shape)
    rows = nearest_indices(box.y0, box.height, out_h)
    cols = nearest_indices(box.x0, box.width, out_w)
    return m[np.ix_(rows, cols)]


def resize_mask(mask, out_h: int, out_w: int) -> np.ndarray:
    m = as_mask(mask)
    return crop_resize_mask(m, Box(0, 0, m.shape[1], m.shape[0]), out_h, out_w)


def paste_mask(roi_mask, box: Box, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`crop_resize_mask`: place an RoI-frame mask into an image."""
    roi = as_mask(roi_mask)
    box.check_within(height, width)
    out = np.zeros((height, width), dtype=bool)
    out[box.y0:box.y1, box.x0:box.x1] = resize_mask(roi, box.height, box.width)
    return out


@dataclass(frozen=True)
class MaskQuartet:
    visible: np.ndarray
    occluding: np.ndarray
    amodal: np.ndarray
    occluded: np.ndarray

    def __post_init__(self):
        for name in ("visible", "occluding", "amodal", "occluded"):
            object.__setattr__(self, name, as_mask(getattr(self, name)))

    @classmethod
    def from_amodal_visible(cls, amodal, visible, occluding) -> "MaskQuartet":
        return cls(visible=visible, occluding=occluding, amodal=amodal,
                   occluded=derive_occluded(amodal, visible))

    @property
    def shape(self) -> tuple[int, int]:
        return self.amodal.shape

    def validate(self) -> None:
        shapes = {m.shape for m in (self.visible, self.occluding, self.amodal, self.occluded)}
        if len(shapes) != 1:
            raise DimensionMismatch(f"quartet masks disagree in shape: {shapes}")
        if (self.visible & ~self.amodal).any():
            raise ContainmentError("visible not contained in amodal")
        if not np.array_equal(self.occluded, self.amodal & ~self.visible):
            raise ContainmentError("occluded != amodal minus visible")

    def __eq__(self, other):
        if not isinstance(other, MaskQuartet):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("visible", "occluding", "amodal", "occluded"))

    def to_json(self) -> dict:
        return {k: rle_encode(getattr(self, k)).to_json()
                for k in ("visible", "occluding", "amodal", "occluded")}

    @classmethod
    def from_json(cls, obj: dict) -> "MaskQuartet":
        return cls(**{k: rle_decode(RleMask.from_json(obj[k]))
                      for k in ("visible", "occluding", "amodal", "occluded")})
