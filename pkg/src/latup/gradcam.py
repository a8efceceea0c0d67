"""Gradient-weighted class activation maps for the segmentation network.

The class score is the sum over voxels of one channel of the pre-softmax
logits.  Channel weights are the spatial means of the score's gradient at
the chosen activation layer; the heatmap is the ReLU of the weighted
channel sum.  Adding a constant to the logits shifts the score but not its
gradient, so the map is invariant to logit offsets.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .model import Network, forward
from .tensor import Tensor, backward, reduce_sum, take_channel

CHANNEL_INDEX = {"bg": 0, "ncr_net": 1, "ed": 2, "et": 3}

# Default activation layer: the features feeding the pre-softmax conv.
DEFAULT_LAYER = "prob_map-input"


def resolve_channel(target_channel) -> int:
    if isinstance(target_channel, str):
        key = target_channel.lower().replace("/", "_").replace("-", "_")
        if key not in CHANNEL_INDEX:
            raise ConfigError(
                f"grad_cam: unknown channel {target_channel!r}; "
                f"expected one of {sorted(CHANNEL_INDEX)} or an index 0..3")
        return CHANNEL_INDEX[key]
    idx = int(target_channel)
    if not 0 <= idx <= 3:
        raise ConfigError(f"grad_cam: channel index {idx} out of range 0..3")
    return idx


def grad_cam(network: Network, x: Tensor, target_channel,
             layer_name: str = DEFAULT_LAYER, normalize: bool = False) -> np.ndarray:
    """Non-negative heatmap (D,H,W) at the named layer's spatial resolution.

    ``target_channel`` is an output-channel index or one of
    bg/ncr_net/ed/et.  ``layer_name`` must be a capturable layer name
    (``"<name>-input"`` addresses a layer's input tensor).  With
    ``normalize`` the map is min-max scaled to [0,1] when it is not flat.
    """
    idx = resolve_channel(target_channel)
    _, captured = forward(network, x, training=False,
                          capture=(layer_name, "prob_map"))
    activations = captured[layer_name]
    logits = captured["prob_map"]
    score = reduce_sum(take_channel(logits, idx))
    backward(score)

    if activations.grad is None:
        # Layer not on the path to the logits: zero gradient everywhere.
        grad = np.zeros_like(activations.data)
    else:
        grad = activations.grad
    alpha = grad.mean(axis=(1, 2, 3), keepdims=True)
    heat = np.maximum((alpha * activations.data).sum(axis=-1)[0], 0.0)
    if normalize:
        lo, hi = float(heat.min()), float(heat.max())
        if hi > lo:
            heat = (heat - lo) / (hi - lo)
    return heat
