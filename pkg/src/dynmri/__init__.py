"""Causal dynamic MRI reconstruction with grouped Bayesian dictionary learning."""

from .config import RunConfig
from .data import Dataset, generate_phantom, read_dataset, write_dataset
from .metrics import gini_index, psnr
from .pipeline import SequenceJob, ablation_baseline, iter_sequence, reconstruct_sequence
from .sampling import KSpaceFrame, SamplingMask, mask_for_rate, measure, radial_mask

__all__ = [
    "Dataset", "KSpaceFrame", "RunConfig", "SamplingMask", "SequenceJob",
    "ablation_baseline", "generate_phantom", "gini_index", "iter_sequence", "mask_for_rate",
    "measure", "psnr", "radial_mask", "read_dataset", "reconstruct_sequence", "write_dataset",
]

__version__ = "0.1.0"
