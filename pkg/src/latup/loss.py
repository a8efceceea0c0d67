"""Training losses: per-class Dice score loss, inverse-frequency class
weights, and the weighted Dice score loss combining the three tumor regions.

Output channels are ordered (BG, NCR/NET, ED, ET).  Background is excluded
from the loss.  Region weights enter through nesting: the ET channel is part
of all three evaluated regions so it carries w_wt + w_tc + w_et, NCR/NET
carries w_wt + w_tc, and ED carries w_wt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ShapeError
from .tensor import Tensor, mul, reduce_sum, take_channel

WEIGHT_LOG_OFFSET = 1.02  # inverse-frequency weighting constant

# Published region weights (WT, TC, ET).
PAPER_WEIGHTS = (1.64, 2.55, 3.40)

CHANNEL_NAMES = ("bg", "ncr_net", "ed", "et")


def dice_score_loss(y_true: Tensor, y_pred: Tensor, eps: float = 1e-5) -> Tensor:
    """Soft Dice loss: 1 - (2*sum(t*p) + eps) / (sum(t^2) + sum(p^2) + eps).

    Differentiable in ``y_pred``; exactly 0 for a perfect binary match and
    for the empty-empty case (numerator and denominator both reduce to eps).
    """
    if y_true.shape != y_pred.shape:
        raise ShapeError(
            f"dice_score_loss: shapes {y_true.shape} vs {y_pred.shape} differ")
    intersection = reduce_sum(mul(y_true, y_pred))
    denom = reduce_sum(mul(y_true, y_true)) + reduce_sum(mul(y_pred, y_pred))
    return 1.0 - (2.0 * intersection + eps) / (denom + eps)


def enet_weight(c_i: float, total: float) -> float:
    """Inverse-frequency class weight 1 / ln(1.02 + c_i/total).

    Natural logarithm; decreasing in the class fraction, bounded above by
    1/ln(1.02) ~ 50.5 as the fraction vanishes.
    """
    if c_i <= 0:
        raise ValueError(f"enet_weight: voxel count must be positive, got {c_i}")
    if c_i > total:
        raise ValueError(
            f"enet_weight: voxel count {c_i} exceeds total {total}")
    return 1.0 / math.log(WEIGHT_LOG_OFFSET + c_i / total)


@dataclass(frozen=True)
class ClassWeights:
    """Region weights for the whole-tumor / tumor-core / enhancing regions."""

    w_wt: float = PAPER_WEIGHTS[0]
    w_tc: float = PAPER_WEIGHTS[1]
    w_et: float = PAPER_WEIGHTS[2]

    def __post_init__(self):
        if min(self.w_wt, self.w_tc, self.w_et) <= 0:
            raise ValueError("class weights must be positive")

    @classmethod
    def from_counts(cls, wt_count: float, tc_count: float, et_count: float,
                    total: float) -> "ClassWeights":
        """Compute the weights from region voxel counts (opt-in alternative
        to the fixed defaults)."""
        return cls(
            w_wt=enet_weight(wt_count, total),
            w_tc=enet_weight(tc_count, total),
            w_et=enet_weight(et_count, total),
        )

    @property
    def channel_coefficients(self) -> tuple[float, float, float]:
        """Combined multipliers for the (ET, NCR/NET, ED) channel losses."""
        return (self.w_wt + self.w_tc + self.w_et,
                self.w_wt + self.w_tc,
                self.w_wt)


def weighted_dice_loss(y_pred: Tensor, y_true: Tensor,
                       weights: ClassWeights | None = None,
                       eps: float = 1e-5) -> Tensor:
    """Weighted Dice score loss over the three non-background channels.

    ``y_pred`` holds per-voxel probabilities, ``y_true`` the one-hot labels;
    both are (..., 4) with channels (BG, NCR/NET, ED, ET).
    """
    if y_pred.shape != y_true.shape:
        raise ShapeError(
            f"weighted_dice_loss: shapes {y_pred.shape} vs {y_true.shape} differ")
    if y_pred.shape[-1] != 4:
        raise ShapeError(
            f"weighted_dice_loss: expected 4 channels, got {y_pred.shape[-1]}")
    weights = weights or ClassWeights()
    et_coef, ncr_coef, ed_coef = weights.channel_coefficients
    dsl = {
        name: dice_score_loss(take_channel(y_true, i), take_channel(y_pred, i), eps)
        for i, name in ((1, "ncr_net"), (2, "ed"), (3, "et"))
    }
    return et_coef * dsl["et"] + ncr_coef * dsl["ncr_net"] + ed_coef * dsl["ed"]
