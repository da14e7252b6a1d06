"""Slices, label masks, image stacks and connected-component analysis."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage


class Modality(str, Enum):
    MR = "MR"
    CT = "CT"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


class Slice:
    """A grayscale image with intensities in [0, 1].

    Behaves like a read-only 2D ``float64`` array through ``np.asarray``.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"slice must be a non-empty 2D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("slice intensities must lie in [0, 1]")
        self.data = _frozen(arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, Slice) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"Slice({self.height}x{self.width})"


class LabelMask:
    """A strictly binary mask; ``np.asarray`` yields a read-only bool array."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask must be a non-empty 2D grid, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("mask must be strictly binary")
            arr = arr.astype(bool)
        self.data = _frozen(arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, LabelMask) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"LabelMask({self.height}x{self.width}, fg={self.count()})"


@dataclass(frozen=True)
class ImageStack:
    """Ordered slices of one modality with their layer gap and optional labels."""

    modality: Modality
    layer_gap_mm: float
    slices: tuple
    labels: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        slices = tuple(s if isinstance(s, Slice) else Slice(s) for s in self.slices)
        labels = self.labels if self.labels else (None,) * len(slices)
        labels = tuple(None if m is None else (m if isinstance(m, LabelMask) else LabelMask(m)) for m in labels)
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "labels", labels)
        if not (self.layer_gap_mm > 0):
            raise ValueError("layer_gap_mm must be positive")
        if not slices:
            raise ValueError("stack has no slices")
        shape = slices[0].shape
        if any(s.shape != shape for s in slices):
            raise ValueError("all slices in a stack must share dimensions")
        if len(labels) != len(slices):
            raise ValueError("labels list length must equal slices list length")
        if any(m is not None and m.shape != shape for m in labels):
            raise ValueError("label dimensions must match slice dimensions")

    def __len__(self):
        return len(self.slices)

    @property
    def shape(self):
        return self.slices[0].shape

    def labeled_indices(self) -> list:
        return [i for i, m in enumerate(self.labels) if m is not None]

    def __eq__(self, other):
        if not isinstance(other, ImageStack):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.layer_gap_mm == other.layer_gap_mm
            and self.slices == other.slices
            and self.labels == other.labels
        )


@dataclass(frozen=True)
class ConnectedDomain:
    """One connected foreground region of a mask.

    ``patch`` is the region's own pixels cropped to its tight bounding box;
    other regions that intrude into the box are not part of it.
    """

    top: int
    left: int
    h: int
    w: int
    area_px: int
    rank: int
    patch: np.ndarray = field(repr=False, compare=False)

    @property
    def bbox_top_left(self):
        return (self.top, self.left)

    @property
    def bbox_area(self) -> int:
        return self.h * self.w

    @property
    def pixel_set(self) -> frozenset:
        rows, cols = np.nonzero(self.patch)
        return frozenset(zip((rows + self.top).tolist(), (cols + self.left).tolist()))

    @property
    def aspect(self) -> float:
        return self.h / self.w


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_domains(mask, connectivity: int = 8) -> list:
    """Extract connected foreground regions sorted by bounding-box area.

    Regions are ordered from the largest box (h*w) to the smallest; equal
    areas are ordered by the raster index of the box's top-left corner.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    arr = np.asarray(mask, dtype=bool)
    labeled, n = ndimage.label(arr, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    width = arr.shape[1]
    found = []
    for lab, sl in enumerate(ndimage.find_objects(labeled), start=1):
        patch = labeled[sl] == lab
        top, left = sl[0].start, sl[1].start
        h, w = patch.shape
        found.append((-(h * w), top * width + left, top, left, patch))
    found.sort(key=lambda t: (t[0], t[1]))
    domains = []
    for rank, (_, _, top, left, patch) in enumerate(found):
        patch = _frozen(patch)
        domains.append(
            ConnectedDomain(top, left, patch.shape[0], patch.shape[1], int(patch.sum()), rank, patch)
        )
    return domains


def resize_nearest(patch: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2D grid (pixel-centre mapping)."""
    h, w = patch.shape
    rows = np.minimum(((np.arange(target_h) + 0.5) * h / target_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(target_w) + 0.5) * w / target_w).astype(np.int64), w - 1)
    return patch[np.ix_(rows, cols)]


def bbox_crop_resize(domain: ConnectedDomain, target_h: int, target_w: int) -> LabelMask:
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be positive")
    return LabelMask(resize_nearest(domain.patch, target_h, target_w))


def union_of(domains: Sequence[ConnectedDomain], shape) -> np.ndarray:
    """Paint the pixels of ``domains`` onto an empty grid of ``shape``."""
    out = np.zeros(shape, dtype=bool)
    for d in domains:
        out[d.top:d.top + d.h, d.left:d.left + d.w] |= d.patch
    return out


def as_mask_array(mask) -> np.ndarray:
    return np.asarray(mask, dtype=bool)


def as_image_array(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64)


def optional_mask(mask) -> Optional[np.ndarray]:
    return None if mask is None else as_mask_array(mask)
