"""Slice-stack correspondence search between an MR and a CT stack.

Every labeled MR slice is matched to its most similar CT slice. Each match
is then tried as an anchor: the layer-gap ratio predicts where every other
MR slice should land in the CT stack, matches off that prediction by more
than one slice are filtered out, and the anchor with the largest consistent
set wins. Final CT positions are recomputed without rounding so they can
fall between CT slices.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .similarity import SimConfig, round_half_away, sim_domains
from .stack import ImageStack, LabelMask, Slice, connected_domains

BLEND_MODES = ("standard", "paper")


@dataclass(frozen=True)
class BestPair:
    mr_index: int
    ct_index: int
    score: float


@dataclass(frozen=True)
class CorrespondenceSet:
    anchor: BestPair
    pairs: Tuple[Tuple[int, float, float], ...]
    gap_mr_mm: float
    gap_ct_mm: float

    def __len__(self):
        return len(self.pairs)

    @property
    def mr_indices(self):
        return [p[0] for p in self.pairs]

    @property
    def ct_fracs(self):
        return [p[1] for p in self.pairs]

    @property
    def scores(self):
        return [p[2] for p in self.pairs]


def _domains_per_slice(stack: ImageStack, indices, connectivity):
    return {i: connected_domains(stack.labels[i], connectivity) for i in indices}


def best_pairs(mr: ImageStack, ct: ImageStack, cfg: SimConfig = SimConfig(),
               threads: int = 1) -> List[BestPair]:
    """Best-scoring CT slice for every labeled MR slice.

    Ties go to the smaller CT index; MR slices whose best score is 0 are
    left out.
    """
    mr_idx = mr.labeled_indices()
    if not mr_idx:
        raise ValueError("MR stack has no labeled slices")
    ct_idx = ct.labeled_indices()
    doms_mr = _domains_per_slice(mr, mr_idx, cfg.connectivity)
    doms_ct = _domains_per_slice(ct, ct_idx, cfg.connectivity)

    def best_for(j):
        best_i, best_s = -1, 0.0
        for i in ct_idx:
            s = sim_domains(doms_mr[j], doms_ct[i], cfg).score
            if s > best_s:
                best_i, best_s = i, s
        return BestPair(j, best_i, best_s) if best_s > 0 else None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            found = list(pool.map(best_for, mr_idx))
    else:
        found = [best_for(j) for j in mr_idx]
    return [bp for bp in found if bp is not None]


def _signed_offset(anchor: BestPair, mr_k: int, gap_mr: float, gap_ct: float,
                   orientation: int) -> float:
    # CT index moves opposite to MR index by default (opposed scan directions)
    steps = abs(mr_k - anchor.mr_index) * gap_mr / gap_ct
    direction = -1 if mr_k > anchor.mr_index else 1
    return orientation * direction * steps


def layer_gap_range(anchor: BestPair, mr_k: int, gap_mr: float, gap_ct: float,
                    ct_count: Optional[int] = None, orientation: int = 1):
    """Predicted CT index for ``mr_k`` and the +-1 window around it.

    Returns:
        (ct_compute, window) where window holds the candidates that are valid
        CT indices when ``ct_count`` is given.
    """
    if gap_mr <= 0 or gap_ct <= 0:
        raise ValueError("layer gaps must be positive")
    steps = round_half_away(abs(mr_k - anchor.mr_index) * gap_mr / gap_ct)
    direction = -1 if mr_k > anchor.mr_index else 1
    ct_compute = anchor.ct_index + orientation * direction * steps
    window = [ct_compute - 1, ct_compute, ct_compute + 1]
    if ct_count is not None:
        window = [c for c in window if 0 <= c < ct_count]
    return ct_compute, window


def fractional_ct_index(anchor: BestPair, mr_k: int, gap_mr: float, gap_ct: float,
                        orientation: int = 1) -> float:
    """Unrounded CT position of ``mr_k`` relative to the anchor."""
    if mr_k == anchor.mr_index:
        return float(anchor.ct_index)
    return anchor.ct_index + _signed_offset(anchor, mr_k, gap_mr, gap_ct, orientation)


def filter_set(best: Sequence[BestPair], anchor: BestPair, gap_mr: float, gap_ct: float,
               ct_count: Optional[int] = None, orientation: int = 1) -> List[BestPair]:
    """Pairs of ``best`` whose CT index lies in the anchor's predicted window."""
    kept = []
    for bp in best:
        if bp.mr_index == anchor.mr_index:
            if bp == anchor:
                kept.append(bp)
            continue
        _, window = layer_gap_range(anchor, bp.mr_index, gap_mr, gap_ct, ct_count, orientation)
        if bp.ct_index in window:
            kept.append(bp)
    return kept


def longest_filter_set(best: Sequence[BestPair], gap_mr: float, gap_ct: float,
                       ct_count: Optional[int] = None, orientation: int = 1):
    """Try every pair as anchor in descending-score order; keep the longest set.

    Equal lengths keep the earlier (higher-scoring) anchor.

    Returns:
        (anchor, filtered pairs sorted by MR index)
    """
    by_mr = sorted(best, key=lambda bp: bp.mr_index)
    anchors = sorted(best, key=lambda bp: (-bp.score, bp.mr_index))
    winner, winner_set = None, []
    for anchor in anchors:
        ep = filter_set(by_mr, anchor, gap_mr, gap_ct, ct_count, orientation)
        if len(ep) > len(winner_set):
            winner, winner_set = anchor, ep
    return winner, winner_set


def align(mr: ImageStack, ct: ImageStack, cfg: SimConfig = SimConfig(),
          orientation: int = 1, threads: int = 1) -> CorrespondenceSet:
    """Full MR -> CT correspondence search.

    ``orientation`` = 1 assumes CT indices run opposite to MR indices;
    -1 assumes both stacks are ordered the same way.
    """
    if orientation not in (1, -1):
        raise ValueError("orientation must be 1 or -1")
    best = best_pairs(mr, ct, cfg, threads=threads)
    gap_mr, gap_ct = mr.layer_gap_mm, ct.layer_gap_mm
    if not best:
        raise ValueError("no MR slice has a non-zero similarity to any CT slice")
    anchor, chosen = longest_filter_set(best, gap_mr, gap_ct, len(ct), orientation)
    pairs = []
    for bp in chosen:
        frac = fractional_ct_index(anchor, bp.mr_index, gap_mr, gap_ct, orientation)
        # a window clipped at the stack end can retain a pair whose exact
        # position lies past the last CT slice
        if -1e-9 <= frac <= len(ct) - 1 + 1e-9:
            pairs.append((bp.mr_index, min(max(frac, 0.0), len(ct) - 1.0), bp.score))
    return CorrespondenceSet(anchor, tuple(pairs), gap_mr, gap_ct)


def blend_arrays(lower: np.ndarray, upper: np.ndarray, frac: float, blend: str) -> np.ndarray:
    if blend == "standard":
        return (1.0 - frac) * lower + frac * upper
    if blend == "paper":
        return (1.0 - frac) * upper + frac * lower
    raise ValueError(f"unknown blend mode {blend!r}")


def blend_ct_slice(ct: ImageStack, ct_index_frac: float, blend: str = "standard") -> Slice:
    """Interpolate a CT slice at a fractional index.

    ``standard`` weights the floor slice by (1 - f); ``paper`` swaps the
    weights so the ceil slice gets (1 - f).
    """
    if blend not in BLEND_MODES:
        raise ValueError(f"unknown blend mode {blend!r}")
    if not 0.0 <= ct_index_frac <= len(ct) - 1:
        raise IndexError(f"CT index {ct_index_frac} outside [0, {len(ct) - 1}]")
    lo = int(math.floor(ct_index_frac))
    f = ct_index_frac - lo
    if f == 0.0:
        return ct.slices[lo]
    out = blend_arrays(np.asarray(ct.slices[lo]), np.asarray(ct.slices[lo + 1]), f, blend)
    return Slice(np.clip(out, 0.0, 1.0))


def blend_ct_label(ct: ImageStack, ct_index_frac: float, blend: str = "standard"):
    """Blended CT label at a fractional index, re-binarized at 0.5.

    Returns None when either neighbouring slice is unlabeled.
    """
    lo = int(math.floor(ct_index_frac))
    f = ct_index_frac - lo
    if f == 0.0:
        return ct.labels[lo]
    a, b = ct.labels[lo], ct.labels[lo + 1]
    if a is None or b is None:
        return None
    out = blend_arrays(np.asarray(a, float), np.asarray(b, float), f, blend)
    return LabelMask(out >= 0.5)
