"""Training configurations, SGD with a geometric learning-rate decay, and
volume-level prediction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .nn import UNet, UNetConfig, build_unet, loss_l2, loss_l2_grad
from .slicing import SliceSample, reassemble, strided_inputs

log = logging.getLogger(__name__)

DOMAINS = ("xy", "xt-yt", "xy-t-channels")
TARGETS = ("residual-learning", "image-learning")


@dataclass(frozen=True)
class TrainConfig:
    domain: str = "xt-yt"
    target: str = "image-learning"
    batch_size: int = 8
    total_backprops: int = 2000
    lr_start: float = 3e-4
    lr_end: float = 3e-6
    seed: int = 0
    stages: int = 3
    convs_per_stage: int = 2
    base_features: int = 16
    n_phases: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if self.batch_size < 1 or self.total_backprops < 1:
            raise ValueError("batch_size and total_backprops must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")

    @property
    def pool_shape(self) -> tuple[int, int]:
        return (2, 1) if self.domain == "xt-yt" else (2, 2)

    @property
    def channels(self) -> int:
        return self.n_phases if self.domain == "xy-t-channels" else 1

    def unet_config(self) -> UNetConfig:
        return UNetConfig(self.stages, self.convs_per_stage, self.base_features, self.pool_shape,
                          self.channels, self.channels, True)

    @classmethod
    def from_kv(cls, values: dict[str, str], **overrides) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = type(f.default)(values[f.name]) if f.default is not None else values[f.name]
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_kv(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) if isinstance(getattr(self, f.name), float)
                else str(getattr(self, f.name)) for f in fields(self)}


# Pixel parity: 44 slices of 220 x 30 carry as many pixels as 6 frames of 220 x 220.
FULL_BATCH = {"xt-yt": 44, "xy": 6, "xy-t-channels": 1}
FULL_LR = {"xt-yt": (1e-5, 1e-7), "xy": (1e-6, 1e-8), "xy-t-channels": (1e-6, 1e-8)}
DESK_BATCH = {"xt-yt": 8, "xy": 3, "xy-t-channels": 1}
DESK_LR = {"xt-yt": (3e-4, 3e-6), "xy": (1e-4, 1e-6), "xy-t-channels": (1e-4, 1e-6)}


def default_train_config(domain: str = "xt-yt", target: str = "image-learning", profile: str = "desk",
                         **overrides) -> TrainConfig:
    """Per-domain defaults for the desk profile or the full reference setup."""
    if profile == "full":
        kw = dict(batch_size=FULL_BATCH[domain], total_backprops=50_000, lr_start=FULL_LR[domain][0],
                  lr_end=FULL_LR[domain][1], stages=3, convs_per_stage=4, base_features=64)
    elif profile == "desk":
        kw = dict(batch_size=DESK_BATCH[domain], total_backprops=2000, lr_start=DESK_LR[domain][0],
                  lr_end=DESK_LR[domain][1], stages=3, convs_per_stage=2, base_features=16)
    else:
        raise ValueError(f"unknown profile {profile!r}")
    kw.update(overrides)
    return TrainConfig(domain=domain, target=target, **kw)


@dataclass
class LossTrace:
    steps: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    train: list[float] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val: list[float] = field(default_factory=list)

    def to_csv(self, path):
        vals = dict(zip(self.val_steps, self.val))
        rows = [(s, repr(lr), repr(l), repr(vals[s]) if s in vals else "")
                for s, lr, l in zip(self.steps, self.lrs, self.train)]
        io.write_csv(path, ("step", "lr", "train_loss", "val_loss"), rows)

    @classmethod
    def from_csv(cls, path) -> "LossTrace":
        trace = cls()
        for row in io.read_csv(path):
            s = int(row["step"])
            trace.steps.append(s)
            trace.lrs.append(float(row["lr"]))
            trace.train.append(float(row["train_loss"]))
            if row["val_loss"]:
                trace.val_steps.append(s)
                trace.val.append(float(row["val_loss"]))
        return trace


def select_labels(config: TrainConfig) -> str:
    """Dataset label mode for a residual-connected network.

    Learning the residual means fitting x; learning the image means fitting
    the residual r_I, so the trunk reproduces -x.
    """
    return "ground-truth" if config.target == "residual-learning" else "residual"


def lr_schedule(step: int, config: TrainConfig) -> float:
    s_total = config.total_backprops
    if s_total == 1:
        return config.lr_start
    frac = step / (s_total - 1)
    return config.lr_start * (config.lr_end / config.lr_start) ** frac


def sgd_step(net: UNet, lr: float):
    for _, layer, k in net.parameters():
        layer.params[k] -= lr * layer.grads[k]


def to_tensor(arrays, domain: str, dtype) -> np.ndarray:
    """Stack 2D samples (or H x W x Nt channel stacks) into (B, C, H, W)."""
    a = np.stack(arrays).astype(dtype, copy=False)
    if domain == "xy-t-channels":
        return a.transpose(0, 3, 1, 2)
    return a[:, None]


def from_tensor(t: np.ndarray, domain: str) -> np.ndarray:
    if domain == "xy-t-channels":
        return t.transpose(0, 2, 3, 1)
    return t[:, 0]


def _check_dataset(samples: list[SliceSample], config: TrainConfig):
    if not samples:
        raise ValueError("empty dataset")
    kinds = {s.kind for s in samples}
    allowed = {"xy": {"xy-frame"}, "xt-yt": {"xt-slice", "yt-slice"},
               "xy-t-channels": {"xyt-channels"}}[config.domain]
    if not kinds <= allowed:
        raise ValueError(f"dataset kinds {sorted(kinds)} do not match domain {config.domain!r}")
    shapes = {s.input.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples must share one shape, got {sorted(shapes)}")


def evaluate_loss(net: UNet, samples, config: TrainConfig, batch_size: int | None = None) -> float:
    dtype = np.dtype(config.dtype)
    bs = batch_size or config.batch_size
    total, n = 0.0, 0
    for i in range(0, len(samples), bs):
        chunk = samples[i:i + bs]
        x = to_tensor([s.input for s in chunk], config.domain, dtype)
        y = to_tensor([s.label for s in chunk], config.domain, dtype)
        total += loss_l2(net.forward(x, "eval"), y) * len(chunk)
        n += len(chunk)
    return total / n


def train(dataset: list[SliceSample], val_dataset: list[SliceSample] | None, config: TrainConfig,
          net: UNet | None = None, start_step: int = 0, trace: LossTrace | None = None,
          augment=None, stop_step: int | None = None) -> tuple[UNet, LossTrace]:
    """Run SGD steps ``start_step .. stop_step - 1`` (default: to the end).

    Mini-batches come from a seeded shuffle that is replayed from step 0,
    so a resumed run sees the same batches as an uninterrupted one.
    ``augment`` optionally maps ``(sample, rng)`` to a new sample.
    """
    _check_dataset(dataset, config)
    dtype = np.dtype(config.dtype)
    if net is None:
        net = build_unet(config.unet_config(), seed=config.seed).astype(dtype)
    trace = trace or LossTrace()
    shuffle_rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])
    val_every = max(1, config.total_backprops // 100)
    stop = config.total_backprops if stop_step is None else min(stop_step, config.total_backprops)
    order, pos = shuffle_rng.permutation(len(dataset)), 0
    for step in range(stop):
        idx = []
        while len(idx) < config.batch_size:
            if pos == len(order):
                order, pos = shuffle_rng.permutation(len(dataset)), 0
            take = min(config.batch_size - len(idx), len(order) - pos)
            idx.extend(order[pos:pos + take])
            pos += take
        if step < start_step:
            continue
        batch = [dataset[i] for i in idx]
        if augment is not None:
            batch = [augment(s, aug_rng) for s in batch]
        x = to_tensor([s.input for s in batch], config.domain, dtype)
        y = to_tensor([s.label for s in batch], config.domain, dtype)
        net.zero_grad()
        pred = net.forward(x, "train")
        loss = loss_l2(pred, y)
        if not math.isfinite(loss):
            raise FloatingPointError(f"training loss became {loss} at step {step}")
        net.backward(loss_l2_grad(pred, y).astype(dtype))
        lr = lr_schedule(step, config)
        sgd_step(net, lr)
        trace.steps.append(step)
        trace.lrs.append(lr)
        trace.train.append(loss)
        if val_dataset and ((step + 1) % val_every == 0 or step == config.total_backprops - 1):
            trace.val_steps.append(step)
            trace.val.append(evaluate_loss(net, val_dataset, config))
    return net, trace


def predict_volume(net: UNet, x_in: np.ndarray, config: TrainConfig, window: int | None = None,
                   stride: int | None = None, batch_size: int = 64,
                   return_coverage: bool = False):
    """Estimate the clean volume from an artefact-laden magnitude volume.

    Windows of ``window`` pixels (default: the full extent) are cut with
    ``stride`` along the spatial axes, passed through the network in eval
    mode, turned into image estimates and averaged back together.
    """
    dtype = np.dtype(config.dtype)
    nx, ny, nt = x_in.shape
    window = window or min(nx, ny)
    stride = stride or window
    pieces = list(strided_inputs(x_in, config.domain, window, stride))
    outputs = []
    for i in range(0, len(pieces), batch_size):
        chunk = pieces[i:i + batch_size]
        x = to_tensor([a for _, a in chunk], config.domain, dtype)
        out = from_tensor(net.forward(x, "eval"), config.domain).astype(np.float64)
        for (place, a), o in zip(chunk, out):
            est = o if config.target == "residual-learning" else a - o
            outputs.append((place, est))
    volume, coverage = reassemble(outputs, x_in.shape)
    return (volume, coverage) if return_coverage else volume
