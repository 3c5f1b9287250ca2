"""Rotation/reflection equivariant DenseNets for histopathology patches.

A small numpy autograd core, p4/p4m group convolutions, a fully
convolutional DenseNet and the evaluation tools around it (patch metrics,
FROC with bootstrap intervals, rotation-stability maps).
"""

from eqdense._kernels import BACKEND
from eqdense.checks import EquivarianceReport, measure_equivariance
from eqdense.data import DatasetSplit, PatchSet, generate_synthetic, load_dataset, tissue_filter
from eqdense.evaluation import Candidate, bootstrap_ci, froc, metrics, square_nms, stability_map
from eqdense.groups import StabilizerElement, compose, elements, inverse
from eqdense.model import PRESETS, DenseNet, ModelConfig, build_model, match_baseline_growth, param_count
from eqdense.training import PROFILES, TrainSchedule, run_training, schedule_for

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Candidate",
    "DatasetSplit",
    "DenseNet",
    "EquivarianceReport",
    "ModelConfig",
    "PRESETS",
    "PROFILES",
    "PatchSet",
    "StabilizerElement",
    "TrainSchedule",
    "bootstrap_ci",
    "build_model",
    "compose",
    "elements",
    "froc",
    "generate_synthetic",
    "inverse",
    "load_dataset",
    "match_baseline_growth",
    "measure_equivariance",
    "metrics",
    "param_count",
    "run_training",
    "schedule_for",
    "square_nms",
    "stability_map",
    "tissue_filter",
]
