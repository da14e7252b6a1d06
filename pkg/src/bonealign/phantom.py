"""Synthetic MR/CT slice stacks with exact ground truth.

A shared 3D scene holds an elliptical body and a few tube-like "bones"
whose cross-sections change size, aspect and orientation along z. Both
stacks sample the same scene at their own layer gaps; the MR stack is
additionally displaced in-plane (translation plus optional smooth warp) and
rendered with inverted soft-tissue/bone contrast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .stack import ImageStack, Modality


class DegenerateSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a synthetic stack pair.

    ``contrast_mode`` selects how the MR stack is rendered: ``mr_like``
    (dark bone, bright soft tissue) or ``ct_like`` (same contrast as CT,
    a monomodal control). ``translation_px`` is the (dx, dy) offset at which
    the MR slices sample the scene, so ``mr(p) = scene(p + t)``.
    ``label_noise`` spurious islands (squares or strips, never touching other
    foreground) are added to every MR label and half as many to every CT label. ``opposed_scan`` orders the CT stack
    against the MR stack along z. ``body_scale`` shrinks or grows the whole
    anatomy relative to the canvas.
    """

    seed: int = 0
    canvas: Tuple[int, int] = (128, 128)
    n_bones: int = 3
    depth_mr: int = 12
    depth_ct: int = 24
    gap_mr_mm: float = 5.0
    gap_ct_mm: float = 2.5
    contrast_mode: str = "mr_like"
    noise_sigma: float = 0.0
    warp_amplitude_px: float = 0.0
    translation_px: Tuple[float, float] = (0.0, 0.0)
    label_noise: int = 0
    opposed_scan: bool = True
    body_scale: float = 1.0

    def __post_init__(self):
        if self.depth_mr < 1 or self.depth_ct < 1:
            raise ValueError("stack depths must be >= 1")
        if not (self.gap_mr_mm > 0 and self.gap_ct_mm > 0):
            raise ValueError("layer gaps must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.contrast_mode not in ("mr_like", "ct_like"):
            raise ValueError("contrast_mode must be 'mr_like' or 'ct_like'")
        if self.n_bones < 1:
            raise ValueError("n_bones must be >= 1")
        if not 0.3 <= self.body_scale <= 1.25:
            raise ValueError("body_scale must lie in [0.3, 1.25]")


@dataclass
class PhantomTruth:
    """Ground truth of a generated pair.

    Attributes:
        mr_to_ct: fractional CT index of every MR slice.
        mr_z, ct_z: slice positions along z in mm.
        field: displacement field (H, W, 2) that maps the MR slices back onto
            the CT geometry, i.e. ``mr(p + field(p)) = scene(p)``.
        mr_labels, ct_labels: noise-free bone labels.
        mr_roi, ct_roi: exact body masks.
    """

    mr_to_ct: np.ndarray
    mr_z: np.ndarray
    ct_z: np.ndarray
    field: np.ndarray
    mr_labels: list = field(repr=False)
    ct_labels: list = field(repr=False)
    mr_roi: list = field(repr=False)
    ct_roi: list = field(repr=False)


@dataclass(frozen=True)
class _Bone:
    cy: float
    cx: float
    drift_y: float
    drift_x: float
    a0: float
    b0: float
    period_a: float
    period_b: float
    phase_a: float
    phase_b: float
    theta0: float
    omega: float
    z_lo: float
    z_hi: float


@dataclass(frozen=True)
class _Warp:
    amp: float
    kx: np.ndarray
    ky: np.ndarray
    phase: np.ndarray


def _make_bones(spec: PhantomSpec, rng: np.random.Generator, z_span: float):
    h, w = spec.canvas
    s = spec.body_scale * min(h, w) / 128.0
    radius = 0.2 * spec.body_scale * min(h, w)
    span = max(z_span, 1e-9)
    bones = []
    for b in range(spec.n_bones):
        ang = 2 * np.pi * b / spec.n_bones + rng.uniform(-0.3, 0.3)
        trim_lo, trim_hi = (0.0, 0.0) if b == 0 else rng.uniform(0.0, 0.2, size=2) * z_span
        bones.append(_Bone(
            cy=h / 2 + radius * np.sin(ang),
            cx=w / 2 + radius * np.cos(ang),
            drift_y=rng.uniform(-3, 3) * s,
            drift_x=rng.uniform(-3, 3) * s,
            a0=rng.uniform(6, 10) * s,
            b0=rng.uniform(4, 7) * s,
            period_a=rng.uniform(0.5, 0.9) * span,
            period_b=rng.uniform(0.3, 0.6) * span,
            phase_a=rng.uniform(0, 2 * np.pi),
            phase_b=rng.uniform(0, 2 * np.pi),
            theta0=rng.uniform(0, np.pi),
            omega=rng.choice([-1, 1]) * rng.uniform(1.5, 3.0) * np.pi / span,
            z_lo=trim_lo - 1e-6,
            z_hi=z_span - trim_hi + 1e-6,
        ))
    return bones


def _bone_mask(bone: _Bone, z: float, z_span: float, yy, xx) -> np.ndarray:
    if not bone.z_lo <= z <= bone.z_hi:
        return np.zeros(yy.shape, dtype=bool)
    t = z / max(z_span, 1e-9) - 0.5
    cy = bone.cy + bone.drift_y * t
    cx = bone.cx + bone.drift_x * t
    a = bone.a0 * (1 + 0.35 * np.sin(2 * np.pi * z / bone.period_a + bone.phase_a))
    b = bone.b0 * (1 + 0.35 * np.sin(2 * np.pi * z / bone.period_b + bone.phase_b))
    th = bone.theta0 + bone.omega * z
    dy, dx = yy - cy, xx - cx
    r1 = dx * np.cos(th) + dy * np.sin(th)
    r2 = -dx * np.sin(th) + dy * np.cos(th)
    return (r1 / a) ** 2 + (r2 / b) ** 2 <= 1.0


def _body_mask(spec: PhantomSpec, z: float, z_span: float, yy, xx) -> np.ndarray:
    h, w = spec.canvas
    wobble = 1 + 0.05 * np.sin(2 * np.pi * z / max(z_span, 1e-9))
    ay, ax = 0.34 * h * wobble * spec.body_scale, 0.38 * w * spec.body_scale
    return ((yy - h / 2) / ay) ** 2 + ((xx - w / 2) / ax) ** 2 <= 1.0


def _render(spec: PhantomSpec, bones, z: float, z_span: float, yy, xx, contrast: str):
    body = _body_mask(spec, z, z_span, yy, xx)
    bone = np.zeros(yy.shape, dtype=bool)
    for b in bones:
        bone |= _bone_mask(b, z, z_span, yy, xx)
    bone &= body
    texture = 0.05 * np.sin(xx / 7.0) * np.cos(yy / 9.0)
    if contrast == "ct_like":
        img = np.where(body, 0.35 + texture, 0.0)
        img = np.where(bone, 0.9, img)
    else:
        img = np.where(body, 0.65 + texture, 0.0)
        img = np.where(bone, 0.15, img)
    return img, bone, body


def _make_warp(spec: PhantomSpec, rng: np.random.Generator) -> _Warp:
    h, w = spec.canvas
    n = 3
    return _Warp(
        amp=spec.warp_amplitude_px,
        kx=rng.uniform(0.5, 1.5, size=(2, n)) * 2 * np.pi / w,
        ky=rng.uniform(0.5, 1.5, size=(2, n)) * 2 * np.pi / h,
        phase=rng.uniform(0, 2 * np.pi, size=(2, n)),
    )


def _offset(spec: PhantomSpec, warp: _Warp, yy, xx):
    """MR sampling offset w(p) as (dx, dy)."""
    tx, ty = spec.translation_px
    ox = np.full(yy.shape, float(tx))
    oy = np.full(yy.shape, float(ty))
    if warp.amp > 0:
        n = warp.kx.shape[1]
        for c, out in enumerate((ox, oy)):
            acc = np.zeros(yy.shape)
            for j in range(n):
                acc += np.sin(warp.kx[c, j] * xx + warp.ky[c, j] * yy + warp.phase[c, j])
            out += warp.amp * acc / np.sqrt(n)
    return ox, oy


def _inverse_field(spec: PhantomSpec, warp: _Warp, yy, xx) -> np.ndarray:
    # fixed point of u = -w(p + u)
    ux = np.zeros(yy.shape)
    uy = np.zeros(yy.shape)
    for _ in range(50):
        ox, oy = _offset(spec, warp, yy + uy, xx + ux)
        nx, ny = -ox, -oy
        done = max(np.abs(nx - ux).max(), np.abs(ny - uy).max()) < 1e-12
        ux, uy = nx, ny
        if done:
            break
    return np.stack([ux, uy], axis=-1)


def _add_label_noise(label: np.ndarray, body: np.ndarray, count: int, rng: np.random.Generator):
    # spurious islands (squares or 1-px strips) that never touch other foreground
    out = label.copy()
    h, w = label.shape
    inside = np.argwhere(body)
    if len(inside) == 0:
        return out
    placed, tries = 0, 0
    while placed < count and tries < 50 * max(count, 1):
        tries += 1
        y, x = inside[rng.integers(len(inside))]
        if rng.random() < 0.5:
            r = int(rng.integers(1, 3))
            y0, y1, x0, x1 = y - r, y + r + 1, x - r, x + r + 1
        else:
            length = int(rng.integers(8, 16))
            if rng.random() < 0.5:
                y0, y1, x0, x1 = y, y + 1, x, x + length
            else:
                y0, y1, x0, x1 = y, y + length, x, x + 1
        if y0 < 1 or x0 < 1 or y1 > h - 1 or x1 > w - 1:
            continue
        if out[y0 - 1:y1 + 1, x0 - 1:x1 + 1].any() or not body[y0:y1, x0:x1].all():
            continue
        out[y0:y1, x0:x1] = True
        placed += 1
    return out


def generate(spec: PhantomSpec):
    """Render an MR and a CT stack of the same scene.

    Returns:
        (mr ImageStack, ct ImageStack, PhantomTruth)
    """
    h, w = spec.canvas
    if min(h, w) < 32:
        raise DegenerateSpecError("canvas must be at least 32x32 to hold the bones")
    span_ct = (spec.depth_ct - 1) * spec.gap_ct_mm
    span_mr = (spec.depth_mr - 1) * spec.gap_mr_mm
    if span_mr > span_ct + 1e-9:
        raise DegenerateSpecError("MR stack extends beyond the CT stack along z")
    tx, ty = spec.translation_px
    reach = 2 * spec.warp_amplitude_px
    margin_x = (0.5 - 0.38 * spec.body_scale) * w - 1
    margin_y = (0.5 - 0.34 * 1.05 * spec.body_scale) * h - 1
    if abs(tx) + reach > margin_x or abs(ty) + reach > margin_y:
        raise DegenerateSpecError("displacement would push the body outside the canvas")

    rng = np.random.default_rng(spec.seed)
    bones = _make_bones(spec, rng, span_ct)
    warp = _make_warp(spec, rng)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    n_off = int(np.floor((span_ct - span_mr) / 2.0 / spec.gap_ct_mm + 0.5))
    z_off = n_off * spec.gap_ct_mm
    mr_z = np.round(z_off + np.arange(spec.depth_mr) * spec.gap_mr_mm, 9)
    if spec.opposed_scan:
        ct_z = np.round((spec.depth_ct - 1 - np.arange(spec.depth_ct)) * spec.gap_ct_mm, 9)
        mr_to_ct = (spec.depth_ct - 1) - mr_z / spec.gap_ct_mm
    else:
        ct_z = np.round(np.arange(spec.depth_ct) * spec.gap_ct_mm, 9)
        mr_to_ct = mr_z / spec.gap_ct_mm

    ox, oy = _offset(spec, warp, yy, xx)
    my, mx = yy + oy, xx + ox
    noise_rng = np.random.default_rng([spec.seed, 1])

    ct_slices, ct_labels, ct_clean, ct_roi = [], [], [], []
    for z in ct_z:
        img, bone, body = _render(spec, bones, z, span_ct, yy, xx, "ct_like")
        if spec.noise_sigma > 0:
            img = img + noise_rng.normal(0, spec.noise_sigma, img.shape)
        ct_slices.append(np.clip(img, 0, 1))
        ct_clean.append(bone)
        ct_roi.append(body)
        ct_labels.append(_add_label_noise(bone, body, spec.label_noise // 2, noise_rng))

    mr_slices, mr_labels, mr_clean, mr_roi = [], [], [], []
    for z in mr_z:
        img, bone, body = _render(spec, bones, z, span_ct, my, mx, spec.contrast_mode)
        if spec.noise_sigma > 0:
            img = img + noise_rng.normal(0, spec.noise_sigma, img.shape)
        mr_slices.append(np.clip(img, 0, 1))
        mr_clean.append(bone)
        mr_roi.append(body)
        mr_labels.append(_add_label_noise(bone, body, spec.label_noise, noise_rng))

    mr = ImageStack(Modality.MR, spec.gap_mr_mm, tuple(mr_slices), tuple(mr_labels))
    ct = ImageStack(Modality.CT, spec.gap_ct_mm, tuple(ct_slices), tuple(ct_labels))
    truth = PhantomTruth(
        mr_to_ct=mr_to_ct,
        mr_z=mr_z,
        ct_z=ct_z,
        field=_inverse_field(spec, warp, yy, xx),
        mr_labels=mr_clean,
        ct_labels=ct_clean,
        mr_roi=mr_roi,
        ct_roi=ct_roi,
    )
    return mr, ct, truth


@dataclass
class CorpusPair:
    """One MR/CT slice pair of a noisy corpus, with its noise-free labels."""

    mr_image: np.ndarray
    mr_label: np.ndarray
    ct_image: np.ndarray
    ct_label: np.ndarray
    mr_truth: np.ndarray
    ct_truth: np.ndarray
    spec: PhantomSpec


def noisy_corpus(n_pairs: int, seed: int = 0, canvas: int = 128, offset_px=(10.0, 20.0),
                 label_noise: int = 4, noise_sigma: float = 0.03, warp_amplitude_px: float = 1.5,
                 body_scale: float = 0.8):
    """Corresponding slice pairs with label noise and a random in-plane MR offset.

    Each pair comes from its own three-slice phantom; the MR offset has a
    uniform direction and a magnitude drawn from ``offset_px``.
    """
    pairs = []
    for j in range(n_pairs):
        rng = np.random.default_rng([seed, j])
        mag = rng.uniform(*offset_px)
        ang = rng.uniform(0, 2 * np.pi)
        spec = PhantomSpec(
            seed=int(rng.integers(2**31)), canvas=(canvas, canvas), depth_mr=3, depth_ct=3,
            gap_mr_mm=5.0, gap_ct_mm=5.0, noise_sigma=noise_sigma,
            warp_amplitude_px=warp_amplitude_px, translation_px=(mag * np.cos(ang), mag * np.sin(ang)),
            label_noise=label_noise, body_scale=body_scale,
        )
        mr, ct, truth = generate(spec)
        i = int(round(truth.mr_to_ct[1]))
        pairs.append(CorpusPair(
            mr.slices[1].data, mr.labels[1].data, ct.slices[i].data, ct.labels[i].data,
            truth.mr_labels[1], truth.ct_labels[i], spec,
        ))
    return pairs
