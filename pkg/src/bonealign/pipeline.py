"""Per-pair preprocessing and registration used by the CLI and the experiments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .metrics import MetricReport, evaluate_pair
from .preprocess import PreprocConfig, centering_shift, denoise_pair, roi_mask, shift_onto_canvas
from .regengine import Bundle, RegConfig, RegistrationResult, register
from .similarity import SimConfig
from .stack import as_image_array, as_mask_array


@dataclass
class PreparedPair:
    fixed: Bundle
    moving: Bundle
    fixed_shift: tuple
    moving_shift: tuple
    canvas: tuple

    def place_fixed(self, arr):
        return shift_onto_canvas(np.asarray(arr), self.fixed_shift, *self.canvas)

    def place_moving(self, arr):
        return shift_onto_canvas(np.asarray(arr), self.moving_shift, *self.canvas)


def prepare_pair(moving_image, moving_label, fixed_image, fixed_label,
                 cfg: PreprocConfig, offset: bool = True, denoise: bool = True) -> PreparedPair:
    """ROI extraction, optional offset correction and optional label denoising.

    Without offset correction both sides keep their own grid, which then has
    to be shared.
    """
    m_img, f_img = as_image_array(moving_image), as_image_array(fixed_image)
    m_lab, f_lab = as_mask_array(moving_label), as_mask_array(fixed_label)
    m_roi = as_mask_array(roi_mask(m_img, cfg))
    f_roi = as_mask_array(roi_mask(f_img, cfg))
    if offset:
        canvas = (cfg.out_h, cfg.out_w)
        m_shift = centering_shift(m_roi, *canvas)
        f_shift = centering_shift(f_roi, *canvas)
    else:
        if m_img.shape != f_img.shape:
            raise ValueError("without offset correction both slices must share dimensions")
        canvas = m_img.shape
        m_shift = f_shift = (0, 0)
    pair = PreparedPair(None, None, f_shift, m_shift, canvas)
    m_img, m_lab, m_roi = (pair.place_moving(a) for a in (m_img, m_lab, m_roi))
    f_img, f_lab, f_roi = (pair.place_fixed(a) for a in (f_img, f_lab, f_roi))
    if denoise:
        m_lab, f_lab = (as_mask_array(x) for x in denoise_pair(m_lab, f_lab, cfg.gamma, cfg.connectivity))
    pair.moving = Bundle.of(m_img, m_lab, m_roi)
    pair.fixed = Bundle.of(f_img, f_lab, f_roi)
    return pair


def register_and_evaluate(pair: PreparedPair, reg_cfg: RegConfig, sim_cfg: SimConfig = SimConfig(),
                          eval_fixed: Optional[Bundle] = None, eval_moving: Optional[Bundle] = None):
    """Register a prepared pair and score it.

    ``eval_fixed``/``eval_moving`` (already on the prepared canvas) replace
    the bundles used for scoring, e.g. to score against clean labels.

    Returns:
        (RegistrationResult, MetricReport)
    """
    result: RegistrationResult = register(pair.fixed, pair.moving, reg_cfg)
    report: MetricReport = evaluate_pair(
        eval_fixed or pair.fixed, eval_moving or pair.moving, result.field, sim_cfg
    )
    return result, report
