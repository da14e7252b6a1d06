"""ROI extraction, offset correction and SIM-driven label denoising."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .similarity import SimConfig, round_half_away, sim_domains
from .stack import LabelMask, Slice, as_image_array, as_mask_array, connected_domains, union_of


class EmptyROIError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocConfig:
    """Preprocessing options.

    ``threshold`` is either ``"otsu"`` or a fixed value in (0, 1).
    """

    out_h: int = 256
    out_w: int = 256
    threshold: Union[str, float] = "otsu"
    fill_holes: bool = True
    gamma: float = 2.0
    connectivity: int = 8

    def __post_init__(self):
        if self.out_h < 16 or self.out_w < 16:
            raise ValueError("output canvas must be at least 16x16")
        if isinstance(self.threshold, str):
            if self.threshold != "otsu":
                raise ValueError(f"unknown threshold mode {self.threshold!r}")
        elif not 0.0 < float(self.threshold) < 1.0:
            raise ValueError("fixed threshold must lie in (0, 1)")


def _threshold_value(img: np.ndarray, cfg: PreprocConfig) -> float:
    if cfg.threshold == "otsu":
        if img.min() == img.max():
            return float(img.max())
        return float(threshold_otsu(img))
    return float(cfg.threshold)


def roi_mask(slice_, cfg: PreprocConfig = PreprocConfig()) -> LabelMask:
    """Body-contour mask: threshold, keep the largest component, fill holes."""
    img = as_image_array(slice_)
    fg = img > _threshold_value(img, cfg)
    doms = connected_domains(fg, cfg.connectivity)
    if not doms:
        raise EmptyROIError("empty ROI: no pixel above threshold")
    largest = max(doms, key=lambda d: (d.area_px, -d.rank))
    mask = union_of([largest], img.shape)
    if cfg.fill_holes:
        mask = ndimage.binary_fill_holes(mask)
    return LabelMask(mask)


def roi_centroid(roi) -> tuple:
    m = as_mask_array(roi)
    if not m.any():
        raise EmptyROIError("empty ROI: centroid undefined")
    rows, cols = np.nonzero(m)
    return rows.mean(), cols.mean()


def centering_shift(roi, out_h: int, out_w: int) -> tuple:
    """Integer (row, col) shift carrying the ROI centroid to the canvas centre."""
    cy, cx = roi_centroid(roi)
    return (round_half_away((out_h - 1) / 2.0 - cy), round_half_away((out_w - 1) / 2.0 - cx))


def shift_onto_canvas(arr: np.ndarray, shift: tuple, out_h: int, out_w: int) -> np.ndarray:
    """Place ``arr`` on a zero canvas so that input (r, c) lands at (r+dr, c+dc)."""
    dr, dc = shift
    h, w = arr.shape
    out = np.zeros((out_h, out_w), dtype=arr.dtype)
    r0, r1 = max(0, dr), min(out_h, h + dr)
    c0, c1 = max(0, dc), min(out_w, w + dc)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] = arr[r0 - dr:r1 - dr, c0 - dc:c1 - dc]
    return out


def offset_correct(slice_, roi, label=None, cfg: PreprocConfig = PreprocConfig()):
    """Recentre slice, ROI and optional label on an ``out_h x out_w`` canvas.

    The same integer translation is applied to all three images.

    Returns:
        (Slice, LabelMask, LabelMask or None)
    """
    img = as_image_array(slice_)
    roi_arr = as_mask_array(roi)
    if roi_arr.shape != img.shape:
        raise ValueError("ROI dimensions must match the slice")
    shift = centering_shift(roi_arr, cfg.out_h, cfg.out_w)
    out_img = Slice(shift_onto_canvas(img, shift, cfg.out_h, cfg.out_w))
    out_roi = LabelMask(shift_onto_canvas(roi_arr, shift, cfg.out_h, cfg.out_w))
    out_lab: Optional[LabelMask] = None
    if label is not None:
        lab = as_mask_array(label)
        if lab.shape != img.shape:
            raise ValueError("label dimensions must match the slice")
        out_lab = LabelMask(shift_onto_canvas(lab, shift, cfg.out_h, cfg.out_w))
    return out_img, out_roi, out_lab


def denoise_pair(label_mr, label_ct, gamma: float = 2.0, connectivity: int = 8,
                 strict_count: bool = False):
    """Keep only the connected domains that survive SIM pairing on both sides."""
    mr, ct, _ = denoise_pair_scored(label_mr, label_ct, gamma, connectivity, strict_count)
    return mr, ct


def denoise_pair_scored(label_mr, label_ct, gamma: float = 2.0, connectivity: int = 8,
                        strict_count: bool = False):
    """Like :func:`denoise_pair` but also returns the underlying SimResult."""
    mr = as_mask_array(label_mr)
    ct = as_mask_array(label_ct)
    cfg = SimConfig(gamma=gamma, connectivity=connectivity, strict_count=strict_count)
    doms_mr = connected_domains(mr, connectivity)
    doms_ct = connected_domains(ct, connectivity)
    res = sim_domains(doms_mr, doms_ct, cfg)
    keep_mr = [doms_mr[i] for i, _, _ in res.matched_pairs]
    keep_ct = [doms_ct[j] for _, j, _ in res.matched_pairs]
    return LabelMask(union_of(keep_mr, mr.shape)), LabelMask(union_of(keep_ct, ct.shape)), res
