"""Overlap, contour and deformation-field quality metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from .regengine import Bundle, DisplacementField, warp_array
from .similarity import SimConfig, dsc, sim
from .stack import as_image_array, as_mask_array

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

REPORT_FIELDS = ("dsc", "jaccard", "hd_px", "ssim", "sim_score", "jd_std", "jd_nonpos_frac")


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    jaccard: float
    hd_px: float
    ssim: float
    sim_score: float
    jd_std: float
    jd_nonpos_frac: float

    def as_dict(self):
        return asdict(self)

    def as_tuple(self):
        return tuple(getattr(self, k) for k in REPORT_FIELDS)


def jaccard(a, b) -> float:
    a, b = as_mask_array(a), as_mask_array(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    m = as_mask_array(mask)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance in pixels between the mask boundaries."""
    a, b = as_mask_array(a), as_mask_array(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("hausdorff distance needs two non-empty masks")
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def ssim(a, b) -> float:
    """Mean SSIM over 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03, range 1)."""
    a, b = as_image_array(a), as_image_array(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    return float(structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA,
        use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def _forward_diff(a: np.ndarray, axis: int) -> np.ndarray:
    # forward differences; the last row/column repeats its neighbour's value
    d = np.diff(a, axis=axis)
    last = np.take(d, [-1], axis=axis) if a.shape[axis] > 1 else np.zeros_like(np.take(a, [0], axis=axis))
    return np.concatenate([d, last], axis=axis)


def jacobian_determinant(field) -> np.ndarray:
    """Per-pixel det(I + grad u) from forward differences."""
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field, dtype=np.float64)
    ux, uy = u[..., 0], u[..., 1]
    dux_dx = _forward_diff(ux, 1)
    dux_dy = _forward_diff(ux, 0)
    duy_dx = _forward_diff(uy, 1)
    duy_dy = _forward_diff(uy, 0)
    return (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx


def jacobian_stats(field):
    """Population std of the Jacobian determinant and the fraction with det <= 0."""
    jd = jacobian_determinant(field)
    return float(jd.std()), float(np.mean(jd <= 0))


def evaluate_pair(fixed: Bundle, moving: Bundle, field: DisplacementField,
                  sim_cfg: SimConfig = SimConfig()) -> MetricReport:
    """Warp the moving side with ``field`` and score it against the fixed side.

    Labels are warped bilinearly and thresholded at 0.5. HD is NaN when
    either label is empty.
    """
    if fixed.shape != moving.shape or field.shape != fixed.shape:
        raise ValueError("fixed, moving and field dimensions must match")
    fixed_lab = fixed.label >= 0.5
    moved_lab = warp_array(moving.label, field.u) >= 0.5
    moved_img = np.clip(warp_array(moving.image, field.u), 0.0, 1.0)
    hd = hausdorff(fixed_lab, moved_lab) if fixed_lab.any() and moved_lab.any() else float("nan")
    jd_std, jd_nonpos = jacobian_stats(field)
    return MetricReport(
        dsc=dsc(fixed_lab, moved_lab),
        jaccard=jaccard(fixed_lab, moved_lab),
        hd_px=hd,
        ssim=ssim(fixed.image, moved_img),
        sim_score=sim(moved_lab, fixed_lab, sim_cfg).score,
        jd_std=jd_std,
        jd_nonpos_frac=jd_nonpos,
    )
