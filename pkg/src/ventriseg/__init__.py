"""Ventricle segmentation on synthetic cardiac MR: a small numpy CNN framework,
the DeepVentricle/FastVentricle model pair, phantom data and clinical metrics."""

__version__ = "0.1.0"

from .data import PHASES, STRUCTURES, LabeledSlice
from .graph import ModelGraph, count_flops, count_parameters, peak_activation_bytes
from .metrics import bland_altman, dice, frustum_volume, mann_whitney_u, rave
from .models import DV_REF, FV_REF, DeepVentricleConfig, FastVentricleConfig, build
from .phantom import PhantomSpec, PhantomStudy, generate_dataset, generate_study
from .tensor import Rng, percentile, rng_normal
from .train import TrainConfig, infer_masks, masked_bce_loss, train

__all__ = [
    "PHASES", "STRUCTURES", "LabeledSlice", "ModelGraph", "count_flops", "count_parameters",
    "peak_activation_bytes", "bland_altman", "dice", "frustum_volume", "mann_whitney_u", "rave",
    "DV_REF", "FV_REF", "DeepVentricleConfig", "FastVentricleConfig", "build", "PhantomSpec",
    "PhantomStudy", "generate_dataset", "generate_study", "Rng", "percentile", "rng_normal",
    "TrainConfig", "infer_masks", "masked_bce_loss", "train",
]
