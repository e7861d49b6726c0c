"""Synthetic tumor simulation, layer-decomposition losses and segmentation metrics."""

__version__ = "0.1.0"

from .composer import SyntheticSample, blend, compose_multi, generate_sample
from .losses import Decomposition, LossReport, LossTarget, LossWeights, total_loss
from .metrics import MetricReport, confusion, evaluate, hd95
from .volume import BinaryMask, Volume, read_nifti, read_raw, write_nifti, write_raw

__all__ = [
    "BinaryMask", "Decomposition", "LossReport", "LossTarget", "LossWeights", "MetricReport",
    "SyntheticSample", "Volume", "blend", "compose_multi", "confusion", "evaluate",
    "generate_sample", "hd95", "read_nifti", "read_raw", "total_loss", "write_nifti", "write_raw",
]
