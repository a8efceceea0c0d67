"""Lightweight 3D attention U-Net with parallel convolutions.

Self-contained volumetric segmentation stack: a numpy autodiff core,
the network builder with exact per-layer parameter accounting, weighted
Dice training, DSC/HD95 evaluation, Grad-CAM, phantom data generation,
and a CLI (``latup``).
"""

from .errors import LatupError
from .loss import ClassWeights, dice_score_loss, enet_weight, weighted_dice_loss
from .metrics import (
    MetricsRecord,
    RegionMasks,
    aggregate,
    confusion_matrix,
    dice_coefficient,
    hd95,
    hd95_bruteforce,
    prediction_to_labels,
    region_masks,
)
from .model import (
    Network,
    NetworkSpec,
    build_latupnet,
    count_parameters,
    estimate_flops,
    forward,
    pc_block,
    summary,
)
from .data import LabeledVolume, generate_phantom, split_folds
from .gradcam import grad_cam
from .tensor import Tensor, backward, finite_diff_check, make_tensor
from .train import Adam, PlateauScheduler, TrainConfig, fit, l2_penalty

__version__ = "0.1.0"

__all__ = [
    "Adam", "ClassWeights", "LabeledVolume", "LatupError", "MetricsRecord",
    "Network", "NetworkSpec", "PlateauScheduler", "RegionMasks", "Tensor",
    "TrainConfig", "aggregate", "backward", "build_latupnet",
    "confusion_matrix", "count_parameters", "dice_coefficient",
    "dice_score_loss", "enet_weight", "estimate_flops", "finite_diff_check",
    "fit", "forward", "generate_phantom", "grad_cam", "hd95",
    "hd95_bruteforce", "l2_penalty", "make_tensor", "pc_block",
    "prediction_to_labels", "region_masks", "split_folds", "summary",
    "weighted_dice_loss",
]
