"""MR/CT bone slice alignment, label denoising and deformable registration."""

__version__ = "0.1.0"

from .align import CorrespondenceSet, align
from .metrics import MetricReport, evaluate_pair
from .phantom import PhantomSpec, generate
from .regengine import Bundle, DisplacementField, RegConfig, register, total_loss, warp
from .similarity import SimConfig, SimResult, sim
from .stack import ConnectedDomain, ImageStack, LabelMask, Modality, Slice, connected_domains

__all__ = [
    "CorrespondenceSet", "align", "MetricReport", "evaluate_pair", "PhantomSpec", "generate",
    "Bundle", "DisplacementField", "RegConfig", "register", "total_loss", "warp",
    "SimConfig", "SimResult", "sim", "ConnectedDomain", "ImageStack", "LabelMask", "Modality",
    "Slice", "connected_domains",
]
