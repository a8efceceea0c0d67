"""Network layers: 3D convolution, pooling, trilinear upsampling, instance
normalization, dense, activations, dropout, channel concat, and the
squeeze-and-excitation block.

Data tensors are laid out (batch, depth, height, width, channels) with
batch fixed at 1.  Conv kernels are (k, k, k, Cin, Cout).  All spatial ops
are shape-preserving under same-padding and stride 1; pooling halves and
upsampling doubles each spatial extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    accumulate_grad,
    add,
    from_op,
    make_tensor,
    matmul,
    mul,
    reduce_mean,
)

INSTANCE_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.1


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass
class Conv3dParams:
    """Stride-1, same-padded conv weights: kernel (k,k,k,Cin,Cout), bias (Cout,)."""

    kernel: Tensor
    bias: Tensor

    @property
    def param_count(self) -> int:
        return self.kernel.size + self.bias.size

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[0]


@dataclass
class SEParams:
    """Bias-free excitation weights: w_reduce (C, C/r), w_expand (C/r, C)."""

    w_reduce: Tensor
    w_expand: Tensor
    reduction: int

    @property
    def param_count(self) -> int:
        return self.w_reduce.size + self.w_expand.size


@dataclass
class InstanceNormParams:
    """Per-channel scale/shift: gamma (C,), beta (C,)."""

    gamma: Tensor
    beta: Tensor
    eps: float = INSTANCE_NORM_EPS

    @property
    def param_count(self) -> int:
        return self.gamma.size + self.beta.size


def conv3d_params(k: int, cin: int, cout: int, seed: int = 0, dtype=np.float32,
                  name: str = "conv") -> Conv3dParams:
    kernel = make_tensor((k, k, k, cin, cout), "he_normal", seed=seed, dtype=dtype,
                         requires_grad=True, name=f"{name}.kernel")
    bias = make_tensor((cout,), "zeros", dtype=dtype, requires_grad=True,
                       name=f"{name}.bias")
    return Conv3dParams(kernel, bias)


def se_params(channels: int, reduction: int = 8, seed: int = 0, dtype=np.float32,
              name: str = "se") -> SEParams:
    if channels % reduction != 0:
        raise ConfigError(
            f"se_params: channels {channels} not divisible by reduction {reduction}")
    hidden = channels // reduction
    w_reduce = make_tensor((channels, hidden), "he_normal", seed=seed, dtype=dtype,
                           requires_grad=True, name=f"{name}.w_reduce")
    w_expand = make_tensor((hidden, channels), "he_normal", seed=seed + 1, dtype=dtype,
                           requires_grad=True, name=f"{name}.w_expand")
    return SEParams(w_reduce, w_expand, reduction)


def instance_norm_params(channels: int, dtype=np.float32,
                         name: str = "in") -> InstanceNormParams:
    gamma = make_tensor((channels,), "constant", value=1.0, dtype=dtype,
                        requires_grad=True, name=f"{name}.gamma")
    beta = make_tensor((channels,), "zeros", dtype=dtype, requires_grad=True,
                       name=f"{name}.beta")
    return InstanceNormParams(gamma, beta)


# ---------------------------------------------------------------------------
# Convolution


def same_padding(k: int) -> tuple[int, int]:
    """(before, after) zero padding that preserves extent at stride 1.

    Odd kernels split evenly; even kernels put the smaller half first.
    """
    total = k - 1
    return total // 2, total - total // 2


def conv3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Stride-1 same-padded 3D convolution (1,D,H,W,Cin) -> (1,D,H,W,Cout).

    Implemented as k^3 shifted GEMMs against the padded input, which keeps
    peak memory at one input copy and runs on BLAS.
    """
    if x.data.ndim != 5 or x.shape[0] != 1:
        raise ShapeError(f"conv3d: expected (1,D,H,W,Cin), got {x.shape}")
    kd, kh, kw, cin, cout = p.kernel.shape
    if x.shape[4] != cin:
        raise ShapeError(f"conv3d: input has {x.shape[4]} channels, kernel wants {cin}")
    _, D, H, W, _ = x.shape
    pd = same_padding(kd)
    ph = same_padding(kh)
    pw = same_padding(kw)

    def padded(arr):
        return np.pad(arr, ((0, 0), pd, ph, pw, (0, 0)))

    kern = p.kernel.data
    xp = padded(x.data)
    acc = np.zeros((D * H * W, cout), dtype=x.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                window = xp[0, a:a + D, b:b + H, c:c + W, :].reshape(-1, cin)
                acc += window @ kern[a, b, c]
    acc += p.bias.data
    out_data = acc.reshape(1, D, H, W, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if p.bias.requires_grad:
            accumulate_grad(p.bias, g2.sum(axis=0))
        if p.kernel.requires_grad:
            xpb = padded(x.data)
            gk = np.empty_like(kern)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        window = xpb[0, a:a + D, b:b + H, c:c + W, :].reshape(-1, cin)
                        gk[a, b, c] = window.T @ g2
            accumulate_grad(p.kernel, gk)
        if x.requires_grad:
            gxp = np.zeros((1, D + sum(pd), H + sum(ph), W + sum(pw), cin), dtype=g.dtype)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gxp[0, a:a + D, b:b + H, c:c + W, :] += (
                            g2 @ kern[a, b, c].T).reshape(D, H, W, cin)
            accumulate_grad(
                x, gxp[:, pd[0]:pd[0] + D, ph[0]:ph[0] + H, pw[0]:pw[0] + W, :])

    return from_op(out_data, (x, p.kernel, p.bias), backward, "conv3d")


# ---------------------------------------------------------------------------
# Pooling / upsampling


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling; gradient goes to the first maximum in block scan
    order (depth, then height, then width)."""
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d: expected 5-d tensor, got {x.shape}")
    _, D, H, W, C = x.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"maxpool3d: spatial extents must be even, got {(D, H, W)}")
    d2, h2, w2 = D // 2, H // 2, W // 2
    blocks = (x.data.reshape(1, d2, 2, h2, 2, w2, 2, C)
              .transpose(0, 1, 3, 5, 2, 4, 6, 7)
              .reshape(1, d2, h2, w2, 8, C))
    out_data = blocks.max(axis=4)
    argmax = blocks.argmax(axis=4)

    def backward(g):
        gb = np.zeros((1, d2, h2, w2, 8, C), dtype=g.dtype)
        np.put_along_axis(gb, argmax[:, :, :, :, None, :], g[:, :, :, :, None, :], axis=4)
        gx = (gb.reshape(1, d2, h2, w2, 2, 2, 2, C)
              .transpose(0, 1, 4, 2, 5, 3, 6, 7)
              .reshape(1, D, H, W, C))
        accumulate_grad(x, gx)

    return from_op(out_data, (x,), backward, "maxpool3d")


def _lerp_indices(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gather indices and weights for 2x upsampling of an extent-n axis.

    Output sample j reads input coordinate (j + 0.5)/2 - 0.5, clamped to
    [0, n-1] (half-pixel-centered sampling with edge replication).
    """
    coord = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    coord = np.clip(coord, 0.0, float(n - 1))
    i0 = np.floor(coord).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, coord - i0


def _upsample_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    i0, i1, w = _lerp_indices(arr.shape[axis])
    shape = [1] * arr.ndim
    shape[axis] = w.size
    w = w.reshape(shape).astype(arr.dtype)
    return np.take(arr, i0, axis=axis) * (1.0 - w) + np.take(arr, i1, axis=axis) * w


def _upsample_axis_transpose(g: np.ndarray, n: int, axis: int) -> np.ndarray:
    i0, i1, w = _lerp_indices(n)
    gm = np.moveaxis(g, axis, 0)
    w = w.reshape((-1,) + (1,) * (gm.ndim - 1)).astype(g.dtype)
    out = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
    np.add.at(out, i0, gm * (1.0 - w))
    np.add.at(out, i1, gm * w)
    return np.moveaxis(out, 0, axis)


def upsample_trilinear2x(x: Tensor) -> Tensor:
    """Double each spatial extent by separable linear interpolation.

    Linear operator, so the backward pass is its exact transpose.
    """
    if x.data.ndim != 5:
        raise ShapeError(f"upsample_trilinear2x: expected 5-d tensor, got {x.shape}")
    _, D, H, W, _ = x.shape
    out_data = x.data
    for axis in (1, 2, 3):
        out_data = _upsample_axis(out_data, axis)

    def backward(g):
        gx = g
        for axis, n in ((3, W), (2, H), (1, D)):
            gx = _upsample_axis_transpose(gx, n, axis)
        accumulate_grad(x, gx)

    return from_op(out_data, (x,), backward, "upsample_trilinear2x")


# ---------------------------------------------------------------------------
# Normalization


def instance_norm(x: Tensor, p: InstanceNormParams) -> Tensor:
    """Standardize each channel over its spatial voxels (population
    variance), then apply the learned per-channel scale and shift."""
    if x.data.ndim != 5:
        raise ShapeError(f"instance_norm: expected 5-d tensor, got {x.shape}")
    _, D, H, W, C = x.shape
    if D * H * W < 2:
        raise ShapeError("instance_norm: needs at least 2 voxels per channel")
    if p.gamma.shape != (C,):
        raise ShapeError(f"instance_norm: gamma shape {p.gamma.shape} != ({C},)")
    spatial = (1, 2, 3)
    mu = x.data.mean(axis=spatial, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=spatial, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(p.eps, dtype=x.dtype))
    xhat = centered * inv_std
    out_data = p.gamma.data * xhat + p.beta.data

    def backward(g):
        if p.gamma.requires_grad:
            accumulate_grad(p.gamma, (g * xhat).sum(axis=(0, 1, 2, 3)))
        if p.beta.requires_grad:
            accumulate_grad(p.beta, g.sum(axis=(0, 1, 2, 3)))
        if x.requires_grad:
            dxhat = g * p.gamma.data
            m1 = dxhat.mean(axis=spatial, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=spatial, keepdims=True)
            accumulate_grad(x, inv_std * (dxhat - m1 - xhat * m2))

    return from_op(out_data, (x, p.gamma, p.beta), backward, "instance_norm")


# ---------------------------------------------------------------------------
# Activations


def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    out_data = np.where(x.data > 0, x.data, x.data * np.asarray(alpha, dtype=x.dtype))

    def backward(g):
        accumulate_grad(x, g * np.where(x.data > 0, 1.0, alpha).astype(g.dtype))

    return from_op(out_data, (x,), backward, "leaky_relu")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g):
        accumulate_grad(x, g * (x.data > 0).astype(g.dtype))

    return from_op(out_data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out_data = np.empty_like(z)
    pos = z >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out_data[~pos] = ez / (1.0 + ez)

    def backward(g):
        accumulate_grad(x, g * out_data * (1.0 - out_data))

    return from_op(out_data, (x,), backward, "sigmoid")


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the trailing (channel) axis, numerically stabilized."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        accumulate_grad(x, out_data * (g - inner))

    return from_op(out_data, (x,), backward, "softmax_channels")


_ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_channels": softmax_channels,
}


def activation(kind: str, x: Tensor) -> Tensor:
    """Dispatch an activation by name."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"activation: unknown kind {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# Regularization / pooling / misc


def dropout(x: Tensor, rate: float, training: bool, seed: int = 0) -> Tensor:
    """Inverted dropout: zero each value with probability ``rate`` and scale
    survivors by 1/(1-rate).  Identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    out_data = x.data * scale

    def backward(g):
        accumulate_grad(x, g * scale)

    return from_op(out_data, (x,), backward, "dropout")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (1,D,H,W,C) -> (1,1,1,1,C)."""
    if x.data.ndim != 5:
        raise ShapeError(f"global_avg_pool: expected 5-d tensor, got {x.shape}")
    return reduce_mean(x, axes=(1, 2, 3))


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: (..., Cin) -> (..., Cout)."""
    out = matmul(x, weights)
    if bias is not None:
        out = add(out, bias)
    return out


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Stack tensors along the channel axis in argument order."""
    if not xs:
        raise ShapeError("concat_channels: need at least one tensor")
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_channels: leading shapes differ, {t.shape[:-1]} vs {lead}")
    out_data = np.concatenate([t.data for t in xs], axis=-1)
    widths = [t.shape[-1] for t in xs]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                accumulate_grad(t, g[..., lo:hi])

    return from_op(out_data, tuple(xs), backward, "concat_channels")


def se_block(x: Tensor, p: SEParams) -> Tensor:
    """Squeeze-and-excitation channel gate.

    Global average pool -> bottleneck dense (ReLU) -> expanding dense
    (sigmoid) -> per-channel rescale of the input.
    """
    channels = x.shape[-1]
    if channels % p.reduction != 0:
        raise ConfigError(
            f"se_block: {channels} channels not divisible by reduction {p.reduction}")
    if p.w_reduce.shape[0] != channels:
        raise ShapeError(
            f"se_block: weights built for {p.w_reduce.shape[0]} channels, input has {channels}")
    squeezed = global_avg_pool(x)
    gate = sigmoid(matmul(relu(matmul(squeezed, p.w_reduce)), p.w_expand))
    return mul(x, gate)
