"""Dense deformable registration of an aligned slice pair.

The displacement field is found by coarse-to-fine gradient descent on a
weakly supervised objective:

    loss = l1 * dice_loss(fixed bone label, warped moving bone label)
         + l2 * dice_loss(fixed ROI mask,  warped moving ROI mask)
         + l3 * diffusion(u)
         + l4 * bone-localised diffusion(u)

Fields are stored as ``(H, W, 2)`` arrays in pixel units with channel 0 the
column (x) displacement and channel 1 the row (y) displacement. Warping
samples the moving image at ``p + u(p)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn
from skimage.transform import resize

from .stack import LabelMask, Slice, as_image_array, as_mask_array

log = logging.getLogger(__name__)

BONE_TERMS = ("gradient", "field")


class NumericalError(RuntimeError):
    """Raised when the objective becomes non-finite during optimisation."""


@dataclass(frozen=True)
class DisplacementField:
    u: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64, copy=True)
        if u.ndim != 3 or u.shape[2] != 2:
            raise ValueError(f"field must have shape (H, W, 2), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("field components must be finite")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @classmethod
    def zeros(cls, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((height, width, 2)))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self):
        return self.u.shape[:2]

    def __eq__(self, other):
        return isinstance(other, DisplacementField) and np.array_equal(self.u, other.u)


@dataclass(frozen=True)
class RegConfig:
    """Registration settings.

    Attributes:
        lambdas: weights of bone Dice, ROI Dice, diffusion and bone diffusion.
        sigma: Dice smoothing constant.
        levels: pyramid depth; reduced so the coarsest short side stays >= min_size.
        iters_per_level: descent attempts per level (accepted or rejected).
        step_size: rigid shift, in pixels of the level, that sets the initial
            damping of each level's first step.
        max_step: cap on the per-pixel update of a single step.
        mask_smoothing: Gaussian sigma (pixels of the level) applied to the
            masks while descending; warping binary masks bilinearly gives a
            loss with kinks on the integer grid that stall the descent. A
            final pass on the unsmoothed objective follows; 0 disables both.
        polish_iters: descent attempts of that final pass.
        bone_term: ``"gradient"`` weights squared field gradients by the moving
            bone label; ``"field"`` takes the diffusion of the field multiplied
            pixelwise by that label.
        d, k, s1, s2: correlation neighbourhood, patch half-size and strides.
    """

    lambdas: Tuple[float, float, float, float] = (1.0, 4.0, 3.0, 4.0)
    sigma: float = 1e-5
    levels: int = 3
    iters_per_level: int = 150
    step_size: float = 0.5
    max_step: float = 2.0
    mask_smoothing: float = 1.0
    polish_iters: int = 30
    bone_term: str = "gradient"
    min_size: int = 16
    border: str = "zero"
    d: int = 4
    k: int = 1
    s1: int = 1
    s2: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if len(self.lambdas) != 4 or any(v < 0 for v in self.lambdas):
            raise ValueError("lambdas must be four non-negative weights")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iters_per_level < 0:
            raise ValueError("iters_per_level must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.mask_smoothing < 0 or self.polish_iters < 0:
            raise ValueError("mask_smoothing and polish_iters must be >= 0")
        if self.bone_term not in BONE_TERMS:
            raise ValueError(f"bone_term must be one of {BONE_TERMS}")
        if self.border not in ("zero", "clamp"):
            raise ValueError("border must be 'zero' or 'clamp'")


@dataclass(frozen=True)
class Bundle:
    """Image, bone label and ROI mask of one side of a registration pair.

    Masks are kept as float arrays so that downsampled (soft) versions can
    share the type.
    """

    image: np.ndarray
    label: np.ndarray
    roi: np.ndarray

    @classmethod
    def of(cls, image, label, roi) -> "Bundle":
        img = as_image_array(image)
        lab = np.asarray(label, dtype=np.float64)
        r = np.asarray(roi, dtype=np.float64)
        if not (img.shape == lab.shape == r.shape):
            raise ValueError("image, label and ROI dimensions must match")
        return cls(img, lab, r)

    @property
    def shape(self):
        return self.image.shape


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    lc: float
    gl: float
    df: float
    df_bone: float


@dataclass
class RegistrationResult:
    field: DisplacementField
    trace: List[Tuple[int, int, float]] = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0


# --- sampling ---------------------------------------------------------------

def _sample(img: np.ndarray, py: np.ndarray, px: np.ndarray, border: str, with_grad: bool = False):
    """Bilinear sample of ``img`` at (py, px) with derivatives w.r.t. px, py."""
    h, w = img.shape
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def at(yy, xx):
        if border == "clamp":
            return img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        return np.where(ok, img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)

    a = at(y0, x0)
    b = at(y0, x0 + 1)
    c = at(y0 + 1, x0)
    d = at(y0 + 1, x0 + 1)
    val = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
    if not with_grad:
        return val
    dx = (1 - fy) * (b - a) + fy * (d - c)
    dy = (1 - fx) * (c - a) + fx * (d - b)
    # the interpolant has a kink on grid lines; use the mean of the one-sided
    # slopes there so that moves in either direction are seen
    on_x = fx == 0
    if on_x.any():
        left = (1 - fy) * (a - at(y0, x0 - 1)) + fy * (c - at(y0 + 1, x0 - 1))
        dx = np.where(on_x, 0.5 * (dx + left), dx)
    on_y = fy == 0
    if on_y.any():
        up = (1 - fx) * (a - at(y0 - 1, x0)) + fx * (b - at(y0 - 1, x0 + 1))
        dy = np.where(on_y, 0.5 * (dy + up), dy)
    return val, dx, dy


def _grid(shape):
    return np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)


def warp_array(arr: np.ndarray, u: np.ndarray, border: str = "zero") -> np.ndarray:
    yy, xx = _grid(arr.shape)
    return _sample(np.asarray(arr, dtype=np.float64), yy + u[..., 1], xx + u[..., 0], border)


def warp(image, field: DisplacementField, border: str = "zero"):
    """Resample ``image`` at ``p + u(p)``.

    Slices are interpolated bilinearly; masks are interpolated and then
    thresholded at 0.5. Plain arrays are treated as intensity images.
    """
    if border not in ("zero", "clamp"):
        raise ValueError("border must be 'zero' or 'clamp'")
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field, dtype=np.float64)
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape != u.shape[:2]:
        raise ValueError(f"dimension mismatch: image {arr.shape} vs field {u.shape[:2]}")
    out = warp_array(arr, u, border)
    if isinstance(image, LabelMask):
        return LabelMask(out >= 0.5)
    if isinstance(image, Slice):
        return Slice(np.clip(out, 0.0, 1.0))
    return out


# --- correlation ------------------------------------------------------------

@dataclass(frozen=True)
class CostVolume:
    """Correlation values of shape (out_h, out_w, D*D); offsets in row-major order."""

    values: np.ndarray
    d: int
    s2: int

    @property
    def out_h(self) -> int:
        return self.values.shape[0]

    @property
    def out_w(self) -> int:
        return self.values.shape[1]

    def offsets(self):
        r = range(-self.d, self.d + 1)
        return [(dy * self.s2, dx * self.s2) for dy in r for dx in r]


def _as_features(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def correlation(feat_a, feat_b, k: int = 0, d: int = 0, s1: int = 1, s2: int = 1) -> CostVolume:
    """Patch correlation of two feature grids over a bounded displacement range.

    For each position x1 on the ``s1`` grid and each displacement in the
    ``(2d+1)^2`` neighbourhood (spaced by ``s2``) the value is the sum, over
    the ``(2k+1)^2`` patch and all channels, of ``a(x1+o) * b(x1+delta+o)``.
    Positions outside the grids read as zero. Products are accumulated patch
    offset by patch offset and channel by channel, in that order.
    """
    a, b = _as_features(feat_a), _as_features(feat_b)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if k < 0 or d < 0 or s1 < 1 or s2 < 1:
        raise ValueError("need k, d >= 0 and s1, s2 >= 1")
    h, w, nc = a.shape
    pad = k + d * s2
    pa = np.pad(a, ((pad, pad), (pad, pad), (0, 0)))
    pb = np.pad(b, ((pad, pad), (pad, pad), (0, 0)))
    ys = np.arange(0, h, s1) + pad
    xs = np.arange(0, w, s1) + pad
    disp = [(dy * s2, dx * s2) for dy in range(-d, d + 1) for dx in range(-d, d + 1)]
    out = np.zeros((len(ys), len(xs), len(disp)))
    for n, (dy, dx) in enumerate(disp):
        acc = np.zeros((len(ys), len(xs)))
        for oy in range(-k, k + 1):
            for ox in range(-k, k + 1):
                pa_o = pa[np.ix_(ys + oy, xs + ox)]
                pb_o = pb[np.ix_(ys + dy + oy, xs + dx + ox)]
                for ch in range(nc):
                    acc = acc + pa_o[..., ch] * pb_o[..., ch]
        out[..., n] = acc
    return CostVolume(out, d, s2)


# --- loss terms -------------------------------------------------------------

def dsc_loss(fixed, moved, sigma: float = 1e-5) -> float:
    """Soft Dice loss ``1 - (2|A.B| + sigma) / (|A| + |B| + sigma)``."""
    f = np.asarray(fixed, dtype=np.float64)
    m = np.asarray(moved, dtype=np.float64)
    if f.shape != m.shape:
        raise ValueError(f"dimension mismatch: {f.shape} vs {m.shape}")
    inter = np.sum(f * m)
    return float(1.0 - (2.0 * inter + sigma) / (f.sum() + m.sum() + sigma))


def _dice_loss_grad(f: np.ndarray, m: np.ndarray, sigma: float):
    inter = np.sum(f * m)
    denom = f.sum() + m.sum() + sigma
    num = 2.0 * inter + sigma
    loss = 1.0 - num / denom
    dm = -(2.0 * f * denom - num) / denom ** 2
    return loss, dm


def _field_array(f) -> np.ndarray:
    return f.u if isinstance(f, DisplacementField) else np.asarray(f, dtype=np.float64)


def _weighted_diffusion(u: np.ndarray, weight: Optional[np.ndarray] = None):
    """Sum of squared forward differences (far borders contribute nothing).

    With ``weight`` each difference is scaled by the weight of its base pixel.
    """
    gx = u[:, 1:] - u[:, :-1]
    gy = u[1:, :] - u[:-1, :]
    if weight is None:
        return float(np.sum(gx * gx) + np.sum(gy * gy))
    wx = weight[:, :-1, None]
    wy = weight[:-1, :, None]
    return float(np.sum(wx * gx * gx) + np.sum(wy * gy * gy))


def _weighted_diffusion_grad(u: np.ndarray, weight: Optional[np.ndarray] = None) -> np.ndarray:
    gx = u[:, 1:] - u[:, :-1]
    gy = u[1:, :] - u[:-1, :]
    if weight is not None:
        gx = gx * weight[:, :-1, None]
        gy = gy * weight[:-1, :, None]
    g = np.zeros_like(u)
    g[:, :-1] -= 2 * gx
    g[:, 1:] += 2 * gx
    g[:-1, :] -= 2 * gy
    g[1:, :] += 2 * gy
    return g


def diffusion_reg(field) -> float:
    """Diffusion regulariser: sum over pixels of the squared forward-difference gradient."""
    return _weighted_diffusion(_field_array(field))


def _bone_term(u: np.ndarray, bone: np.ndarray, mode: str, with_grad: bool):
    if mode == "field":
        v = u * bone[..., None]
        val = _weighted_diffusion(v)
        grad = _weighted_diffusion_grad(v) * bone[..., None] if with_grad else None
    else:
        val = _weighted_diffusion(u, bone)
        grad = _weighted_diffusion_grad(u, bone) if with_grad else None
    return val, grad


def _objective(fixed: Bundle, moving: Bundle, u: np.ndarray, cfg: RegConfig, with_grad: bool):
    l1, l2, l3, l4 = cfg.lambdas
    yy, xx = _grid(u.shape[:2])
    py, px = yy + u[..., 1], xx + u[..., 0]
    grad = np.zeros_like(u) if with_grad else None
    terms = []
    for lam, f, m in ((l1, fixed.label, moving.label), (l2, fixed.roi, moving.roi)):
        if with_grad:
            wm, dmx, dmy = _sample(m, py, px, cfg.border, with_grad=True)
            val, dldm = _dice_loss_grad(f, wm, cfg.sigma)
            grad[..., 0] += lam * dldm * dmx
            grad[..., 1] += lam * dldm * dmy
        else:
            wm = _sample(m, py, px, cfg.border)
            val = dsc_loss(f, wm, cfg.sigma)
        terms.append(val)
    df = _weighted_diffusion(u)
    df_bone, g_bone = _bone_term(u, moving.label, cfg.bone_term, with_grad)
    if with_grad:
        grad += l3 * _weighted_diffusion_grad(u) + l4 * g_bone
    terms += [df, df_bone]
    total = l1 * terms[0] + l2 * terms[1] + l3 * df + l4 * df_bone
    return LossBreakdown(total, *terms), grad


def _check_pair(fixed: Bundle, moving: Bundle, u: np.ndarray):
    if fixed.shape != moving.shape or u.shape[:2] != fixed.shape:
        raise ValueError(
            f"dimension mismatch: fixed {fixed.shape}, moving {moving.shape}, field {u.shape[:2]}"
        )


def total_loss(fixed: Bundle, moving: Bundle, field, cfg: RegConfig = RegConfig()) -> LossBreakdown:
    u = _field_array(field)
    _check_pair(fixed, moving, u)
    return _objective(fixed, moving, u, cfg, with_grad=False)[0]


def loss_and_grad(fixed: Bundle, moving: Bundle, field, cfg: RegConfig = RegConfig()):
    """Objective breakdown and its analytic gradient w.r.t. the field, shape (H, W, 2)."""
    u = _field_array(field)
    _check_pair(fixed, moving, u)
    return _objective(fixed, moving, u, cfg, with_grad=True)


# --- optimisation -----------------------------------------------------------

def _level_shapes(shape, cfg: RegConfig):
    shapes = [tuple(shape)]
    for _ in range(cfg.levels - 1):
        h, w = shapes[-1]
        nh, nw = (h + 1) // 2, (w + 1) // 2
        if min(nh, nw) < cfg.min_size:
            break
        shapes.append((nh, nw))
    return shapes[::-1]


def _downsample(b: Bundle, shape) -> Bundle:
    if b.shape == tuple(shape):
        return b

    def r(a):
        return resize(a, shape, order=1, anti_aliasing=True, preserve_range=True, mode="edge")

    return Bundle(r(b.image), r(b.label), r(b.roi))


def _smooth_masks(b: Bundle, sigma: float) -> Bundle:
    if sigma <= 0:
        return b
    return Bundle(b.image, ndimage.gaussian_filter(b.label, sigma), ndimage.gaussian_filter(b.roi, sigma))


def upsample_field(u: np.ndarray, shape) -> np.ndarray:
    """Resize a field to ``shape`` and rescale its components to the new pixel size."""
    if u.shape[:2] == tuple(shape):
        return u.copy()
    sy = shape[0] / u.shape[0]
    sx = shape[1] / u.shape[1]
    out = np.empty(tuple(shape) + (2,))
    out[..., 0] = resize(u[..., 0], shape, order=1, mode="edge", anti_aliasing=False) * sx
    out[..., 1] = resize(u[..., 1], shape, order=1, mode="edge", anti_aliasing=False) * sy
    return out


def _laplacian_eigs(shape) -> np.ndarray:
    # eigenvalues of the Neumann grid Laplacian in the DCT-II basis
    h, w = shape
    ey = 4 * np.sin(np.pi * np.arange(h) / (2 * h)) ** 2
    ex = 4 * np.sin(np.pi * np.arange(w) / (2 * w)) ** 2
    return ey[:, None] + ex[None, :]


def _direction(g: np.ndarray, damping: float, stiffness: float) -> np.ndarray:
    """Solve (damping * I + stiffness * L) d = g per component in the DCT basis.

    L is the Neumann grid Laplacian, whose quadratic form is the summed
    squared forward differences, so ``stiffness`` = 2 * weight gives the exact
    curvature of a diffusion term. Rigid shifts are only damped by ``damping``.
    """
    inv = 1.0 / (damping + stiffness * _laplacian_eigs(g.shape[:2]))
    out = np.empty_like(g)
    for c in range(2):
        out[..., c] = idctn(dctn(g[..., c], norm="ortho") * inv, norm="ortho")
    return out


def _finite(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss ({value}) {where}")
    return value


def _descend(fixed: Bundle, moving: Bundle, u: np.ndarray, cfg: RegConfig, level: int, trace,
             iters: Optional[int] = None):
    # damped Newton-type steps: diffusion curvature is modelled exactly, the
    # data terms by an adaptive damping (halved on success, x4 on failure)
    loss, grad = _objective(fixed, moving, u, cfg, with_grad=True)
    cur = _finite(loss.total, f"at level {level} start")
    trace.append((level, 0, cur))
    stiffness = 2.0 * (cfg.lambdas[2] + cfg.lambdas[3])
    rigid = np.max(np.abs(grad.mean(axis=(0, 1))))
    damping = (rigid if rigid > 0 else np.max(np.abs(grad))) / cfg.step_size
    if not damping > 0:
        return u, cur
    for it in range(1, (cfg.iters_per_level if iters is None else iters) + 1):
        d = _direction(grad, damping, stiffness)
        size = np.max(np.abs(d))
        if size < 1e-4:
            break
        if size > cfg.max_step:
            d *= cfg.max_step / size
        trial = u - d
        new = _finite(_objective(fixed, moving, trial, cfg, with_grad=False)[0].total,
                      f"at level {level} iteration {it}")
        if new < cur:
            u, cur = trial, new
            grad = _objective(fixed, moving, u, cfg, with_grad=True)[1]
            damping *= 0.5
        else:
            damping *= 4.0
        trace.append((level, it, cur))
    return u, cur


def register(fixed: Bundle, moving: Bundle, cfg: RegConfig = RegConfig(),
             init: Optional[DisplacementField] = None) -> RegistrationResult:
    """Coarse-to-fine minimisation of the registration objective.

    Only steps that lower the loss are accepted, and a level whose upsampled
    starting field is worse than its zero field restarts from zero, so the
    returned field never scores worse than the initial one.
    """
    if fixed.shape != moving.shape:
        raise ValueError(f"dimension mismatch: fixed {fixed.shape} vs moving {moving.shape}")
    full = fixed.shape
    u0 = np.zeros(full + (2,)) if init is None else np.array(init.u, dtype=np.float64)
    _check_pair(fixed, moving, u0)
    initial = _finite(total_loss(fixed, moving, u0, cfg).total, "for the initial field")
    trace: List[Tuple[int, int, float]] = []
    shapes = _level_shapes(full, cfg)
    u = None
    for level, shape in enumerate(shapes):
        fl = _smooth_masks(_downsample(fixed, shape), cfg.mask_smoothing)
        mv = _smooth_masks(_downsample(moving, shape), cfg.mask_smoothing)
        start = upsample_field(u0, shape) if u is None else upsample_field(u, shape)
        if u is not None:
            base = upsample_field(u0, shape)
            if total_loss(fl, mv, start, cfg).total > total_loss(fl, mv, base, cfg).total:
                start = base
        u, _ = _descend(fl, mv, start, cfg, level, trace)
        log.debug("level %d %s: loss %.6f", level, shape, trace[-1][2])
    if cfg.mask_smoothing > 0 and cfg.polish_iters > 0 and cfg.iters_per_level > 0:
        u, _ = _descend(fixed, moving, u, cfg, len(shapes), trace, iters=cfg.polish_iters)
    # fields are stored as float32; return exactly what a field file holds
    u = u.astype(np.float32).astype(np.float64)
    final = total_loss(fixed, moving, u, cfg).total
    if final > initial:
        u, final = u0, initial
    return RegistrationResult(DisplacementField(u), trace, initial, final)
