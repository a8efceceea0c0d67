"""LATUP-Net: a lightweight 3D attention U-Net with parallel convolutions.

The network is described declaratively: :func:`layer_table` expands a
:class:`NetworkSpec` into an ordered list of :class:`LayerSpec` rows from
which parameters, shapes, FLOPs, the executable graph, and the printable
architecture summary are all derived.  With the default spec the table
totals 3,069,060 trainable parameters.

Topology (F = base_filters, input (D,H,W,3)):

* enc1 is a parallel-convolution block: a shared 3x3x3 embedding conv,
  three parallel paths (1x1x1, 3x3x3, 5x5x5 convs, F filters each), each
  max-pooled 2x2x2, concatenated to 3F channels at half resolution.
* enc2/enc3: SE gate, conv 3x3x3, instance norm, conv 3x3x3, dropout,
  max-pool (2F and 4F filters).
* Bottleneck: SE gate.
* dec3/dec2/dec1: trilinear 2x upsample, conv 2x2x2, instance norm, SE
  gate, skip concat, conv 3x3x3, dropout, and a trailing 3x3x3 refinement
  conv.  Skips come from the pre-pool encoder outputs; the dec1 skip is the
  enc1 embedding conv output (the only full-resolution F-channel tensor).
* Head: 1x1x1 conv to 4 channels, softmax over channels.

Every hidden conv is followed by LeakyReLU(0.1) (applied before instance
norm where both are present); the head conv has no activation.  The same
layer names appear in checkpoints, captures, summaries and logs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# Conv kernels of the last two encoder and decoder blocks; the default
# scope of the L2 penalty.
DEFAULT_L2_SCOPE = (
    "enc2_conv1", "enc2_conv2",
    "enc3_conv1", "enc3_conv2",
    "dec3_conv1", "dec3_conv2", "dec3_conv3",
    "dec2_conv1", "dec2_conv2", "dec2_conv3",
)

OUTPUT_CHANNELS = 4  # BG, NCR/NET, ED, ET


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative description of the network.

    input_shape is (D, H, W, modalities).  Spatial extents must be
    divisible by 8 (three pooling stages) and base_filters by se_reduction
    (the narrowest SE gate sits on base_filters channels).
    """

    input_shape: tuple[int, int, int, int] = (128, 128, 128, 3)
    base_filters: int = 32
    se_reduction: int = 8
    dropout_rate: float = 0.2
    l2_lambda: float = 0.02
    l2_scope: tuple[str, ...] = DEFAULT_L2_SCOPE

    def validate(self) -> None:
        if len(self.input_shape) != 4:
            raise ConfigError(f"input_shape must be (D,H,W,C), got {self.input_shape}")
        d, h, w, c = self.input_shape
        if min(d, h, w) < 8 or any(e % 8 for e in (d, h, w)):
            raise ConfigError(
                f"spatial extents must be divisible by 8, got {(d, h, w)}")
        if c < 1:
            raise ConfigError("input needs at least one modality channel")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be positive")
        if self.base_filters % self.se_reduction != 0:
            raise ConfigError(
                f"base_filters {self.base_filters} not divisible by "
                f"se_reduction {self.se_reduction}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.l2_lambda < 0.0:
            raise ConfigError("l2_lambda must be non-negative")


@dataclass(frozen=True)
class LayerSpec:
    """One row of the architecture table."""

    name: str
    kind: str  # input|conv|se|instance_norm|maxpool|upsample|dropout|concat|softmax
    inputs: tuple[str, ...]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel_size: int = 0
    filters: int = 0
    params: int = 0
    activated: bool = False  # LeakyReLU fused after this conv


def _conv_params_count(k: int, cin: int, cout: int) -> int:
    return k ** 3 * cin * cout + cout


def layer_table(spec: NetworkSpec) -> list[LayerSpec]:
    """Expand a spec into the full ordered layer list with shapes and
    per-layer parameter counts."""
    spec.validate()
    d, h, w, cmod = spec.input_shape
    f = spec.base_filters
    r = spec.se_reduction

    rows: list[LayerSpec] = []
    shapes: dict[str, tuple[int, ...]] = {}

    def emit(name, kind, inputs, out_shape, **kw):
        in_shape = shapes[inputs[0]] if inputs else out_shape
        rows.append(LayerSpec(name, kind, tuple(inputs), in_shape, out_shape, **kw))
        shapes[name] = out_shape

    def conv(name, src, k, cout, activated=True):
        cin = shapes[src][-1]
        emit(name, "conv", (src,), shapes[src][:3] + (cout,), kernel_size=k,
             filters=cout, params=_conv_params_count(k, cin, cout), activated=activated)

    def se(name, src):
        c = shapes[src][-1]
        emit(name, "se", (src,), shapes[src], params=2 * c * c // r)

    def instance_norm(name, src):
        c = shapes[src][-1]
        emit(name, "instance_norm", (src,), shapes[src], params=2 * c)

    def maxpool(name, src):
        sd, sh, sw, c = shapes[src]
        emit(name, "maxpool", (src,), (sd // 2, sh // 2, sw // 2, c))

    def upsample(name, src):
        sd, sh, sw, c = shapes[src]
        emit(name, "upsample", (src,), (sd * 2, sh * 2, sw * 2, c))

    def dropout(name, src):
        emit(name, "dropout", (src,), shapes[src])

    def concat(name, srcs):
        c = sum(shapes[s][-1] for s in srcs)
        emit(name, "concat", tuple(srcs), shapes[srcs[0]][:3] + (c,))

    emit("input", "input", (), (d, h, w, cmod))

    # Encoder block 1: parallel convolutions.
    conv("enc1_pc_embed", "input", 3, f)
    conv("enc1_pc_1_conv", "enc1_pc_embed", 1, f)
    conv("enc1_pc_2_conv", "enc1_pc_embed", 3, f)
    conv("enc1_pc_3_conv", "enc1_pc_embed", 5, f)
    maxpool("enc1_pc_1_maxpool", "enc1_pc_1_conv")
    maxpool("enc1_pc_2_maxpool", "enc1_pc_2_conv")
    maxpool("enc1_pc_3_maxpool", "enc1_pc_3_conv")
    concat("enc1_pc_concat", ("enc1_pc_1_maxpool", "enc1_pc_2_maxpool", "enc1_pc_3_maxpool"))

    # Encoder blocks 2 and 3.
    for blk, filters, src in (("enc2", 2 * f, "enc1_pc_concat"),
                              ("enc3", 4 * f, "enc2_maxpool")):
        se(f"{blk}_SE_mult", src)
        conv(f"{blk}_conv1", f"{blk}_SE_mult", 3, filters)
        instance_norm(f"{blk}_instance_norm", f"{blk}_conv1")
        conv(f"{blk}_conv2", f"{blk}_instance_norm", 3, filters)
        dropout(f"{blk}_dropout", f"{blk}_conv2")
        maxpool(f"{blk}_maxpool", f"{blk}_dropout")

    # Bottleneck attention.
    se("bn_SE_mult", "enc3_maxpool")

    # Decoder blocks.  Skips: pre-pool encoder outputs; dec1 uses the
    # full-resolution embedding conv output.
    for blk, filters, src, skip in (("dec3", 4 * f, "bn_SE_mult", "enc3_dropout"),
                                    ("dec2", 2 * f, "dec3_conv3", "enc2_dropout"),
                                    ("dec1", f, "dec2_conv3", "enc1_pc_embed")):
        upsample(f"{blk}_upsample", src)
        conv(f"{blk}_conv1", f"{blk}_upsample", 2, filters)
        instance_norm(f"{blk}_instance_norm", f"{blk}_conv1")
        se(f"{blk}_SE_mult", f"{blk}_instance_norm")
        concat(f"{blk}_concat", (f"{blk}_SE_mult", skip))
        conv(f"{blk}_conv2", f"{blk}_concat", 3, filters)
        dropout(f"{blk}_dropout", f"{blk}_conv2")
        conv(f"{blk}_conv3", f"{blk}_dropout", 3, filters)

    conv("prob_map", "dec1_conv3", 1, OUTPUT_CHANNELS, activated=False)
    emit("softmax", "softmax", ("prob_map",), shapes["prob_map"])
    return rows


def spec_digest(spec: NetworkSpec) -> str:
    """Stable hex digest of the structural fields (checkpoint compatibility)."""
    payload = json.dumps(
        {
            "input_shape": list(spec.input_shape),
            "base_filters": spec.base_filters,
            "se_reduction": spec.se_reduction,
            "layers": [[row.name, row.kind, row.kernel_size, list(row.out_shape)]
                       for row in layer_table(spec)],
        },
        sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _layer_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


class Network:
    """Executable network: a spec, its layer table, and parameter tensors."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.dtype = dtype
        self.seed = seed
        self.layers = layer_table(spec)
        self.params: dict[str, object] = {}
        for i, row in enumerate(self.layers):
            lseed = _layer_seed(seed, i)
            if row.kind == "conv":
                cin = row.in_shape[-1]
                self.params[row.name] = nn.conv3d_params(
                    row.kernel_size, cin, row.filters, seed=lseed, dtype=dtype,
                    name=row.name)
            elif row.kind == "se":
                self.params[row.name] = nn.se_params(
                    row.in_shape[-1], spec.se_reduction, seed=lseed, dtype=dtype,
                    name=row.name)
            elif row.kind == "instance_norm":
                self.params[row.name] = nn.instance_norm_params(
                    row.in_shape[-1], dtype=dtype, name=row.name)

    def named_parameters(self) -> dict[str, Tensor]:
        """Parameter tensors in fixed topological order, keyed name.field."""
        out: dict[str, Tensor] = {}
        for row in self.layers:
            p = self.params.get(row.name)
            if isinstance(p, nn.Conv3dParams):
                out[f"{row.name}.kernel"] = p.kernel
                out[f"{row.name}.bias"] = p.bias
            elif isinstance(p, nn.SEParams):
                out[f"{row.name}.w_reduce"] = p.w_reduce
                out[f"{row.name}.w_expand"] = p.w_expand
            elif isinstance(p, nn.InstanceNormParams):
                out[f"{row.name}.gamma"] = p.gamma
                out[f"{row.name}.beta"] = p.beta
        return out

    def forward(self, x: Tensor, training: bool = False, seed: int = 0,
                capture=None) -> tuple[Tensor, dict[str, Tensor]]:
        return forward(self, x, training=training, seed=seed, capture=capture)


def build_latupnet(spec: NetworkSpec | None = None, seed: int = 0,
                   dtype=np.float32) -> Network:
    """Construct the network with seeded He-normal/zeros/ones initialization."""
    return Network(spec or NetworkSpec(), seed=seed, dtype=dtype)


def pc_block(x: Tensor, embed: nn.Conv3dParams, path1: nn.Conv3dParams,
             path2: nn.Conv3dParams, path3: nn.Conv3dParams) -> Tensor:
    """Parallel-convolution block as a standalone op.

    Shared embedding conv, then 1/3/5-kernel paths, each LeakyReLU
    activated and max-pooled, concatenated in path order.
    """
    e = nn.leaky_relu(nn.conv3d(x, embed))
    paths = [nn.maxpool3d(nn.leaky_relu(nn.conv3d(e, p)))
             for p in (path1, path2, path3)]
    return nn.concat_channels(paths)


def forward(network: Network, x: Tensor, training: bool = False, seed: int = 0,
            capture=None) -> tuple[Tensor, dict[str, Tensor]]:
    """Run the network on ``x`` of shape (1, D, H, W, modalities).

    Returns the per-voxel probability volume and a dict of captured
    activations.  ``capture`` takes layer names; ``"<name>-input"`` resolves
    to the tensor feeding that layer.  Dropout draws a per-layer stream from
    ``seed``, so training passes are reproducible.
    """
    expected = (1,) + tuple(network.spec.input_shape)
    if x.shape != expected:
        raise ShapeError(f"forward: input shape {x.shape} != {expected}")
    wanted = set(capture or ())
    captured: dict[str, Tensor] = {}
    values: dict[str, Tensor] = {}
    dropout_ordinal = 0

    for row in network.layers:
        if row.kind == "input":
            out = x
        elif row.kind == "conv":
            out = nn.conv3d(values[row.inputs[0]], network.params[row.name])
            if row.activated:
                out = nn.leaky_relu(out)
        elif row.kind == "se":
            out = nn.se_block(values[row.inputs[0]], network.params[row.name])
        elif row.kind == "instance_norm":
            out = nn.instance_norm(values[row.inputs[0]], network.params[row.name])
        elif row.kind == "maxpool":
            out = nn.maxpool3d(values[row.inputs[0]])
        elif row.kind == "upsample":
            out = nn.upsample_trilinear2x(values[row.inputs[0]])
        elif row.kind == "dropout":
            out = nn.dropout(values[row.inputs[0]], network.spec.dropout_rate,
                             training, seed=_layer_seed(seed, dropout_ordinal))
            dropout_ordinal += 1
        elif row.kind == "concat":
            out = nn.concat_channels([values[s] for s in row.inputs])
        elif row.kind == "softmax":
            out = nn.softmax_channels(values[row.inputs[0]])
        else:  # pragma: no cover - layer kinds are fixed above
            raise ConfigError(f"unknown layer kind {row.kind!r}")
        values[row.name] = out
        if row.name in wanted:
            captured[row.name] = out
        alias = f"{row.name}-input"
        if alias in wanted and row.inputs:
            captured[alias] = values[row.inputs[0]]

    missing = wanted - set(captured)
    if missing:
        raise ConfigError(f"forward: unknown capture names {sorted(missing)}")
    return values["softmax"], captured


# ---------------------------------------------------------------------------
# Accounting


def count_parameters(network: Network) -> tuple[int, dict[str, int]]:
    """Total trainable scalar count and per-layer breakdown, from the
    actual parameter tensors."""
    per_layer: dict[str, int] = {}
    for row in network.layers:
        p = network.params.get(row.name)
        per_layer[row.name] = p.param_count if p is not None else 0
    return sum(per_layer.values()), per_layer


@dataclass(frozen=True)
class FlopsRecord:
    name: str
    macs: int
    flops: int


def estimate_flops(spec_or_network, input_shape=None) -> tuple[dict[str, int], list[FlopsRecord]]:
    """Deterministic dense-compute estimate per layer.

    Conventions (documented, not profiler-compatible): conv MACs =
    D*H*W*k^3*Cin*Cout over the output grid; conv FLOPs = 2*MACs + bias adds
    + 1/elem for a fused activation.  SE counts its two dense products, the
    pooled adds, gate nonlinearities (4 FLOPs per sigmoid element) and the
    rescale.  Instance norm 8/elem, max-pool 7 comparisons per output
    element, trilinear upsample 15/elem, softmax 5/elem.
    """
    spec = spec_or_network.spec if isinstance(spec_or_network, Network) else spec_or_network
    if input_shape is not None:
        spec = replace(spec, input_shape=tuple(input_shape))
    records: list[FlopsRecord] = []
    for row in layer_table(spec):
        vox_out = int(np.prod(row.out_shape[:3]))
        c_out = row.out_shape[-1]
        c_in = row.in_shape[-1]
        macs = 0
        flops = 0
        if row.kind == "conv":
            macs = vox_out * row.kernel_size ** 3 * c_in * c_out
            flops = 2 * macs + vox_out * c_out
            if row.activated:
                flops += vox_out * c_out
        elif row.kind == "se":
            hidden = c_in // spec.se_reduction
            macs = 2 * c_in * hidden
            flops = 2 * macs + 2 * vox_out * c_out + hidden + 4 * c_in
        elif row.kind == "instance_norm":
            flops = 8 * vox_out * c_out
        elif row.kind == "maxpool":
            flops = 7 * vox_out * c_out
        elif row.kind == "upsample":
            flops = 15 * vox_out * c_out
        elif row.kind == "softmax":
            flops = 5 * vox_out * c_out
        records.append(FlopsRecord(row.name, macs, flops))
    totals = {"macs": sum(r.macs for r in records),
              "flops": sum(r.flops for r in records)}
    return totals, records


_KIND_DISPLAY = {
    "input": ("Input", "-"),
    "conv": ("Conv3D", "(1,1,1)"),
    "se": ("Squeeze and Excitation", "-"),
    "instance_norm": ("Instance Normalization", "-"),
    "maxpool": ("MaxPooling3D", "(2,2,2)"),
    "upsample": ("UpSampling3D", "(2,2,2)"),
    "dropout": ("Dropout", "-"),
    "concat": ("Concatenate", "-"),
    "softmax": ("Softmax", "-"),
}


def summary(spec_or_network) -> str:
    """Architecture table: layer, input shape, type, stride, output shape,
    parameters - one row per layer plus the total."""
    spec = spec_or_network.spec if isinstance(spec_or_network, Network) else spec_or_network
    rows = layer_table(spec)
    header = ("Layer", "Input Shape", "Layer Type", "Stride", "Output Shape", "Parameters")
    body = []
    for row in rows:
        kind, stride = _KIND_DISPLAY[row.kind]
        if row.kind == "conv":
            kind = f"Conv3D ({row.filters} filters)"
        body.append((
            row.name,
            str(tuple(row.in_shape)),
            kind,
            stride,
            str(tuple(row.out_shape)),
            str(row.params),
        ))
    total = sum(r.params for r in rows)
    widths = [max(len(header[i]), *(len(b[i]) for b in body)) for i in range(6)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines.append("  ".join("-" * wd for wd in widths))
    for b in body:
        lines.append("  ".join(b[i].ljust(widths[i]) for i in range(6)))
    lines.append("-" * len(lines[1]))
    lines.append(f"Total Parameters  {total:,}")
    return "\n".join(lines)
