"""Training: bias-corrected Adam, scoped L2 penalty, the epoch loop,
optional reduce-on-plateau learning-rate scheduling, and checkpoints.

Checkpoint layout (all little-endian):

    magic    4 bytes  b"LTPC"
    version  u16      currently 1
    digest   32 bytes sha256 of the network's structural description
    count    u32      number of parameter tensors
    per parameter, in the network's fixed topological order:
        name_len u16, name utf-8, ndim u8, ndim x u32 extents,
        float32 values (C order)

Loading validates the digest, names, and shapes before touching the
network, so a checkpoint from a different spec fails cleanly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledVolume, one_hot_labels
from .errors import CheckpointError, ConfigError, NumericError, TrainingError, TruncatedError
from .loss import ClassWeights, weighted_dice_loss
from .metrics import dice_coefficient, prediction_to_labels, region_masks
from .model import Network, spec_digest
from .tensor import Tensor, backward, mul, reduce_sum

ADAM_EPS = 1e-7


@dataclass
class PlateauConfig:
    enabled: bool = False
    factor: float = 0.5
    patience: int = 10
    min_delta: float = 1e-4
    min_lr: float = 0.0


@dataclass
class TrainConfig:
    """Hyperparameters of the training loop (batch size is fixed at 1)."""

    lr: float = 1e-4
    epochs: int = 200
    batch: int = 1
    dropout: float = 0.2
    l2: float = 0.02
    seed: int = 0
    plateau: PlateauConfig = field(default_factory=PlateauConfig)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch != 1:
            raise ConfigError(f"batch size is fixed at 1, got {self.batch}")


class Adam:
    """Bias-corrected Adam over named parameter tensors.

    Reads each parameter's ``.grad`` (missing gradients count as zero) and
    updates ``.data`` in place.  Non-finite gradients abort with the
    parameter name and step number.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = ADAM_EPS):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for {name} at step {self.t}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)


def adam_step(state: Adam) -> Adam:
    """One optimizer step over the parameters bound to ``state``."""
    state.step()
    return state


def l2_penalty(network: Network, lam: float | None = None,
               scope: tuple[str, ...] | None = None) -> Tensor:
    """lam * sum of squared conv-kernel entries over the scoped layers.

    Biases are excluded.  The result participates in backward like any
    other loss term.  Defaults come from the network spec.
    """
    lam = network.spec.l2_lambda if lam is None else lam
    scope = network.spec.l2_scope if scope is None else tuple(scope)
    layer_names = {row.name for row in network.layers}
    total: Tensor | None = None
    for name in scope:
        if name not in layer_names:
            raise ConfigError(f"l2_penalty: unknown layer {name!r} in scope")
        kernel = network.params[name].kernel
        term = reduce_sum(mul(kernel, kernel))
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=network.dtype))
    return float(lam) * total


class PlateauScheduler:
    """Reduce the optimizer's learning rate after ``patience`` consecutive
    non-improving values (lower is better).  The bad-step counter resets on
    every reduction; the best seen value is kept."""

    def __init__(self, config: PlateauConfig, optimizer: Adam):
        self.config = config
        self.optimizer = optimizer
        self.best: float | None = None
        self.bad_steps = 0

    def step(self, value: float) -> float:
        cfg = self.config
        if not cfg.enabled:
            return self.optimizer.lr
        if self.best is None or self.best - value > cfg.min_delta:
            self.best = value if self.best is None else min(self.best, value)
            self.bad_steps = 0
        else:
            self.bad_steps += 1
            if self.bad_steps >= cfg.patience:
                self.optimizer.lr = max(self.optimizer.lr * cfg.factor, cfg.min_lr)
                self.bad_steps = 0
        return self.optimizer.lr


def plateau_step(scheduler: PlateauScheduler, value: float) -> float:
    """Feed one monitored value; returns the (possibly reduced) lr."""
    return scheduler.step(value)


# ---------------------------------------------------------------------------
# Fit loop


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    sample_id: str
    loss: float
    wdl: float
    l2: float
    dsc_wt: float
    dsc_tc: float
    dsc_et: float
    lr: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    wdl: float
    dsc_wt: float
    dsc_tc: float
    dsc_et: float
    lr: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def jsonl_lines(self) -> list[str]:
        import json

        lines = []
        for rec in self.steps:
            lines.append(json.dumps({"kind": "step", **rec.__dict__}, sort_keys=True))
        for rec in self.epochs:
            lines.append(json.dumps({"kind": "epoch", **rec.__dict__}, sort_keys=True))
        return lines


def _shuffle_seed(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))


def _step_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def _train_dsc(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    pred = region_masks(prediction_to_labels(probs))
    true = region_masks(labels)
    return (dice_coefficient(pred.wt, true.wt),
            dice_coefficient(pred.tc, true.tc),
            dice_coefficient(pred.et, true.et))


def fit(network: Network, dataset: list[LabeledVolume], config: TrainConfig,
        weights: ClassWeights | None = None, run_dir=None,
        max_steps: int | None = None) -> TrainLog:
    """Train with per-sample steps (batch 1) and return the full log.

    Per epoch the sample order is reshuffled from the config seed; each
    step runs forward (training mode), weighted Dice loss plus the scoped
    L2 penalty, backward, and one Adam step.  Giving ``run_dir`` writes a
    checkpoint after every epoch plus ``final.ltpc``; on a non-finite loss
    the run aborts with the last epoch checkpoint still on disk.
    ``max_steps`` optionally stops mid-epoch (used by short calibration
    runs).
    """
    config.validate()
    if not dataset:
        raise ConfigError("fit: dataset is empty")
    if abs(network.spec.dropout_rate - config.dropout) > 1e-12:
        raise ConfigError(
            f"fit: network dropout {network.spec.dropout_rate} != config {config.dropout}")
    if abs(network.spec.l2_lambda - config.l2) > 1e-12:
        raise ConfigError(
            f"fit: network l2 {network.spec.l2_lambda} != config {config.l2}")
    weights = weights or ClassWeights()

    checkpoint_dir = None
    if run_dir is not None:
        checkpoint_dir = Path(run_dir) / "checkpoints"
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    opt = Adam(network.named_parameters(), lr=config.lr)
    scheduler = PlateauScheduler(config.plateau, opt)
    log = TrainLog()
    one_hot = {v.sample_id: one_hot_labels(v.labels)[None] for v in dataset}

    global_step = 0
    for epoch in range(1, config.epochs + 1):
        order = _shuffle_seed(config.seed, epoch).permutation(len(dataset))
        epoch_losses: list[StepRecord] = []
        for i in (int(v) for v in order):
            volume = dataset[i]
            x = Tensor(volume.modalities[None])
            y_true = Tensor(one_hot[volume.sample_id])
            try:
                probs, _ = network.forward(
                    x, training=True, seed=_step_seed(config.seed, epoch, int(i)))
                wdl = weighted_dice_loss(probs, y_true, weights)
                penalty = l2_penalty(network)
                total = wdl + penalty
                backward(total)
            except NumericError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, sample {volume.sample_id}: {exc}"
                ) from exc
            opt.step()
            global_step += 1
            dsc_wt, dsc_tc, dsc_et = _train_dsc(probs.data, volume.labels)
            rec = StepRecord(
                epoch=epoch, step=global_step, sample_id=volume.sample_id,
                loss=float(total.data), wdl=float(wdl.data), l2=float(penalty.data),
                dsc_wt=dsc_wt, dsc_tc=dsc_tc, dsc_et=dsc_et, lr=opt.lr)
            log.steps.append(rec)
            epoch_losses.append(rec)
            if max_steps is not None and global_step >= max_steps:
                break

        mean = lambda vals: float(np.mean(vals))  # noqa: E731
        log.epochs.append(EpochRecord(
            epoch=epoch,
            loss=mean([r.loss for r in epoch_losses]),
            wdl=mean([r.wdl for r in epoch_losses]),
            dsc_wt=mean([r.dsc_wt for r in epoch_losses]),
            dsc_tc=mean([r.dsc_tc for r in epoch_losses]),
            dsc_et=mean([r.dsc_et for r in epoch_losses]),
            lr=opt.lr))
        scheduler.step(log.epochs[-1].loss)
        if checkpoint_dir is not None:
            save_checkpoint(network, checkpoint_dir / f"epoch_{epoch:04d}.ltpc")
        if max_steps is not None and global_step >= max_steps:
            break

    if checkpoint_dir is not None:
        save_checkpoint(network, checkpoint_dir / "final.ltpc")
    return log


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"LTPC"
CHECKPOINT_VERSION = 1


def save_checkpoint(network: Network, path) -> None:
    params = network.named_parameters()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
              bytes.fromhex(spec_digest(network.spec)),
              struct.pack("<I", len(params))]
    for name, tensor in params.items():
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", tensor.data.ndim))
        chunks.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(network: Network, path) -> Network:
    """Restore parameters saved by :func:`save_checkpoint` into ``network``.

    The stored digest must match the network spec; every parameter name and
    shape must line up.  Values are float32, so a float32 network restores
    bit-identically.
    """
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"checkpoint: truncated at byte {pos} (+{n})")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("checkpoint: bad magic")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint: unsupported version {version}")
    digest = bytes(take(32)).hex()
    if digest != spec_digest(network.spec):
        raise CheckpointError(
            "checkpoint: digest mismatch (saved from a different network spec)")
    (count,) = struct.unpack("<I", take(4))
    params = network.named_parameters()
    if count != len(params):
        raise CheckpointError(
            f"checkpoint: has {count} parameters, network has {len(params)}")
    for name, tensor in params.items():
        (name_len,) = struct.unpack("<H", take(2))
        stored_name = bytes(take(name_len)).decode()
        if stored_name != name:
            raise CheckpointError(
                f"checkpoint: parameter order mismatch ({stored_name!r} vs {name!r})")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if shape != tensor.data.shape:
            raise CheckpointError(
                f"checkpoint: {name} shape {shape} != {tensor.data.shape}")
        n_bytes = int(np.prod(shape)) * 4
        values = np.frombuffer(take(n_bytes), dtype="<f4").reshape(shape)
        tensor.data = values.astype(network.dtype, copy=True)
    if pos != len(data):
        raise CheckpointError(f"checkpoint: {len(data) - pos} trailing bytes")
    return network


def checkpoint_roundtrip(network: Network, path) -> Network:
    """Save then reload into a freshly built network of the same spec."""
    save_checkpoint(network, path)
    fresh = Network(network.spec, seed=network.seed, dtype=network.dtype)
    return load_checkpoint(fresh, path)
