"""Connected-domain shape similarity (SIM) and scalar image similarities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .stack import ConnectedDomain, as_image_array, as_mask_array, connected_domains, resize_nearest


@dataclass(frozen=True)
class SimConfig:
    """Settings for the connected-domain similarity.

    Attributes:
        gamma: aspect-ratio gate limit; a domain pair counts only when the
            rounded absolute difference of their h/w ratios is below it.
        connectivity: 4 or 8 neighbourhood for domain extraction.
        strict_count: score 0 whenever the two masks have different domain
            counts, instead of pairing ranks up to the smaller count.
    """

    gamma: float = 2.0
    connectivity: int = 8
    strict_count: bool = False

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be non-negative")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class SimResult:
    score: float
    matched_pairs: List[Tuple[int, int, float]] = field(default_factory=list)

    @property
    def n_matched(self) -> int:
        return len(self.matched_pairs)

    @property
    def normalized(self) -> float:
        """Score rescaled to [0, 1] (Dice-like); for reporting only."""
        return 2.0 * self.score


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def aspect_gate(dom_ct: ConnectedDomain, dom_mr: ConnectedDomain, gamma: float) -> bool:
    diff = dom_ct.h / dom_ct.w - dom_mr.h / dom_mr.w
    return abs(round_half_away(diff)) < gamma


def domain_overlap(dom_mr: ConnectedDomain, dom_ct: ConnectedDomain) -> float:
    """|A∩B| / (|A|+|B|) with the MR patch resized into the CT box frame."""
    a = resize_nearest(dom_mr.patch, dom_ct.h, dom_ct.w)
    b = dom_ct.patch
    inter = np.count_nonzero(a & b)
    return inter / (np.count_nonzero(a) + np.count_nonzero(b))


def sim_domains(doms_mr, doms_ct, cfg: SimConfig) -> SimResult:
    """SIM over pre-extracted domain lists (both sorted by rank)."""
    if cfg.strict_count and len(doms_mr) != len(doms_ct):
        return SimResult(0.0, [])
    pairs = []
    for dm, dc in zip(doms_mr, doms_ct):
        if aspect_gate(dc, dm, cfg.gamma):
            pairs.append((dm.rank, dc.rank, domain_overlap(dm, dc)))
    if not pairs:
        return SimResult(0.0, [])
    return SimResult(float(np.mean([p[2] for p in pairs])), pairs)


def sim(label_mr, label_ct, cfg: SimConfig = SimConfig()) -> SimResult:
    """Connected-domain similarity of an MR and a CT label mask.

    Domains are paired by equal area rank, pairs failing the aspect gate are
    dropped, and the surviving per-domain overlaps are averaged. Perfect
    overlap gives 0.5 (the ratio carries no factor 2).
    """
    doms_mr = connected_domains(label_mr, cfg.connectivity)
    doms_ct = connected_domains(label_ct, cfg.connectivity)
    return sim_domains(doms_mr, doms_ct, cfg)


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def dsc(a, b) -> float:
    a, b = as_mask_array(a), as_mask_array(b)
    _same_shape(a, b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


def mutual_information(a, b, bins: int = 32) -> float:
    """Mutual information (nats) of the joint intensity histogram on [0, 1]."""
    a, b = as_image_array(a), as_image_array(b)
    _same_shape(a, b)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def ncc(a, b) -> float:
    """Global normalized cross-correlation (Pearson) of two images."""
    a, b = as_image_array(a).ravel(), as_image_array(b).ravel()
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if na == 0 or nb == 0:
        raise ValueError("ncc undefined for zero-variance input")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))
