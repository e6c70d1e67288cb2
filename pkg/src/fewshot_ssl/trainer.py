"""Merged meta-training: SGD with momentum, multi-step schedule, EMA targets."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import LabeledDataset
from .model import (
    AugmentSet,
    MultiTaskModel,
    ema_update,
    make_views,
    parse_tasks,
    parse_view_policy,
    task_losses,
)
from .rng import stream
from .tensor import Parameter, backward

__all__ = [
    "TrainConfig",
    "SGD",
    "MissingGradientError",
    "NonFiniteLossError",
    "MetricsRecord",
    "StepRecord",
    "TrainResult",
    "CsvMetricsSink",
    "merge_meta_training",
    "epoch_batches",
    "decayed_parameter_names",
    "train",
    "train_step",
    "CSV_HEADER",
]

CSV_HEADER = ["epoch", "lr", "loss_total", "loss_sup", "loss_rot", "loss_byol", "wall_time_s"]
CSV_VERSION_LINE = "# fewshot-ssl train metrics v1"


@dataclass
class TrainConfig:
    epochs: int = 90
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple[int, ...] = (45, 60, 75)
    decay_factor: float = 0.1
    tau: float = 0.99
    active_tasks: frozenset[str] = frozenset({"supervised"})
    view_policy: str = "separate_views"
    seed: int = 0
    symmetric_byol: bool = False
    task_weights: dict[str, float] = field(default_factory=dict)
    checkpoint_every: int = 0

    def __post_init__(self):
        self.active_tasks = parse_tasks(self.active_tasks)
        self.view_policy = parse_view_policy(self.view_policy)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay be >= 0")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and (self.decay_epochs[0] < 0 or self.decay_epochs[-1] >= self.epochs):
            raise ValueError(f"decay_epochs must lie in [0, epochs), got {self.decay_epochs}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: decayed once per milestone <= epoch."""
        passed = sum(1 for d in self.decay_epochs if d <= epoch)
        return self.lr * self.decay_factor**passed if passed else self.lr

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        """Named schedules: ``cifar_fs``, ``cifar_fs_byol``, ``miniimagenet``."""
        presets = {
            "cifar_fs": dict(epochs=90, decay_epochs=(45, 60, 75)),
            "cifar_fs_byol": dict(epochs=90, decay_epochs=(60, 80)),
            "miniimagenet": dict(epochs=100, decay_epochs=(60, 80)),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


class MissingGradientError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, step: int, losses: dict, records: list | None = None):
        self.epoch, self.step, self.losses = epoch, step, losses
        self.records = records or []
        shown = ", ".join(f"{k}={v}" for k, v in losses.items() if v is not None)
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {shown}")


def decayed_parameter_names(params: dict[str, Parameter]) -> set[str]:
    """Conv and linear weights; biases and batch-norm scale/shift are excluded."""
    return {n for n, p in params.items() if n.endswith("weight") and p.ndim >= 2}


class SGD:
    """``v <- m v + (g + wd p); p <- p - lr v``, then gradients are cleared."""

    def __init__(self, params: dict[str, Parameter], lr: float, momentum: float = 0.9,
                 weight_decay: float = 5e-4, decay: set[str] | None = None):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay = decayed_parameter_names(self.params) if decay is None else set(decay)
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.step_count = 0

    def step(self) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise MissingGradientError(f"no gradient for trainable parameters: {missing[:5]}")
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay and name in self.decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v
            p.grad = None
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def merge_meta_training(tasks: Sequence[LabeledDataset]) -> LabeledDataset:
    """Union of labelled training sets with one global class index.

    Classes are indexed by sorted name, so equal names across inputs share an
    index. Examples are concatenated in input order without deduplication.
    """
    if not tasks:
        raise ValueError("nothing to merge")
    shapes = {t.image_shape for t in tasks}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent image shapes across tasks: {sorted(shapes)}")
    names = sorted({c for t in tasks for c in t.class_names})
    index = {c: i for i, c in enumerate(names)}
    labels = [np.array([index[t.class_names[k]] for k in t.labels], dtype=np.int64) for t in tasks]
    return LabeledDataset(np.concatenate([t.images for t in tasks]), np.concatenate(labels),
                          names, split=tasks[0].split)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation split into ceil(n / batch_size) near-equal batches."""
    perm = stream(seed, "shuffle", epoch).permutation(n)
    return np.array_split(perm, math.ceil(n / batch_size))


@dataclass
class StepRecord:
    epoch: int
    step: int
    losses: dict[str, float | None]
    n_views: int
    batch_size: int
    seconds: float


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_sup: float | None
    loss_rot: float | None
    loss_byol: float | None
    wall_time_s: float
    steps: int = 0

    def csv_row(self) -> list[str]:
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [str(self.epoch), repr(self.lr), fmt(self.loss_total), fmt(self.loss_sup),
                fmt(self.loss_rot), fmt(self.loss_byol), f"{self.wall_time_s:.3f}"]


class CsvMetricsSink:
    """Appends one CSV row per epoch, after a versioned header comment."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            fh.write(CSV_VERSION_LINE + "\n")
            csv.writer(fh).writerow(CSV_HEADER)

    def __call__(self, record: MetricsRecord) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(record.csv_row())


@dataclass
class TrainResult:
    model: MultiTaskModel
    records: list[MetricsRecord]
    steps: list[StepRecord]

    def loss_curve(self, task: str = "total") -> list[float]:
        key = {"total": "total", "sup": "supervised", "rot": "rotation"}.get(task, task)
        return [s.losses[key] for s in self.steps]


def _mean(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def train_step(
    model: MultiTaskModel,
    opt: SGD,
    config: TrainConfig,
    data: LabeledDataset,
    idx: np.ndarray,
    epoch: int,
    step: int,
    augment: AugmentSet,
    aug_traces: list | None = None,
) -> StepRecord:
    """One optimisation step on the batch ``data[idx]``.

    Builds views, computes the active losses, backprops their sum, steps
    ``opt`` and then moves the target network when BYOL is active.
    """
    t0 = time.perf_counter()
    active = config.active_tasks
    images, labels = data.images[idx], data.labels[idx]
    views = make_views(images, idx, active, config.view_policy, augment, config.seed, epoch, aug_traces)
    losses = task_losses(model, views, labels, active, config.view_policy,
                         rotation_rng=stream(config.seed, "rotation", epoch, step),
                         weights=config.task_weights)
    values = losses.as_floats()
    if not all(math.isfinite(v) for v in values.values() if v is not None):
        raise NonFiniteLossError(epoch, step, values)
    backward(losses.total)
    opt.step()
    if "byol" in active:
        ema_update(model)
    model.step += 1
    return StepRecord(epoch, step, values, views.n_generated, len(idx), time.perf_counter() - t0)


def train(
    config: TrainConfig,
    data: LabeledDataset,
    model: MultiTaskModel,
    sink: Callable[[MetricsRecord], None] | None = None,
    augment: AugmentSet | None = None,
    output_dir=None,
    trace: list | None = None,
    aug_traces: list | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of ``ceil(N / batch_size)`` steps each.

    Per step: build views, compute the active losses, backprop the sum, take
    an SGD step on the online parameters of the active tasks, then update
    the target network when BYOL is active. A non-finite loss aborts with
    :class:`NonFiniteLossError`. With ``output_dir`` set, checkpoints are
    written every ``config.checkpoint_every`` epochs and at the end.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.num_classes != model.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes but classifier has {model.num_classes}")
    size = model.encoder_config.input_size
    augment = augment or AugmentSet.standard(size)
    model.tau = config.tau
    model.symmetric_byol = config.symmetric_byol
    active = config.active_tasks
    params = model.online_parameters(active)
    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records: list[MetricsRecord] = []
    steps: list[StepRecord] = []
    t_start = time.perf_counter()

    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        epoch_steps: list[StepRecord] = []
        for step, idx in enumerate(epoch_batches(len(data), config.batch_size, config.seed, epoch)):
            try:
                rec = train_step(model, opt, config, data, idx, epoch, step, augment, aug_traces)
            except NonFiniteLossError as exc:
                exc.records = records
                raise
            epoch_steps.append(rec)
            if trace is not None:
                trace.append(rec)
        steps.extend(epoch_steps)
        record = MetricsRecord(
            epoch=epoch,
            lr=opt.lr,
            loss_total=_mean([s.losses["total"] for s in epoch_steps]),
            loss_sup=_mean([s.losses["supervised"] for s in epoch_steps]),
            loss_rot=_mean([s.losses["rotation"] for s in epoch_steps]),
            loss_byol=_mean([s.losses["byol"] for s in epoch_steps]),
            wall_time_s=time.perf_counter() - t_start,
            steps=len(epoch_steps),
        )
        records.append(record)
        if sink is not None:
            sink(record)
        if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            model.save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:04d}.bin")
    if out is not None:
        model.save_checkpoint(out / "checkpoint_final.bin")
    return TrainResult(model, records, steps)
