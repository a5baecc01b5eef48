"""Supervision transfer: distil the depth teacher into an RGB or RGB-D student.

Each training step draws a batch of (opaque scene, augmentation) pairs,
scores the augmented depth with the teacher, and fits the student's output on
the matching RGB (or RGB-D) channels to those scores.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, DimensionError, NonFiniteError, Tensor, log, mean, mul, sigmoid, softplus
from .net import (MODALITY_CHANNELS, OUTPUT_STRIDE, NetworkParams, build_network, forward_logits,
                  save_network, student_input)
from .scene import PairedSample, augment_variant, filter_opaque
from .teacher import AnalyticTeacher, ScoreVolume, ScoreVolume4D, max_over_z, pool_volume

LOSS_KINDS = ("bce", "mse")


class ConfigurationError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """The training loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and schedule settings; defaults are the full-scale values."""
    learning_rate: float = 1e-5
    batch_size: int = 64
    augmentations_per_image: int = 32
    loss: str = "bce"
    max_steps: int = 2000
    validation_every: int = 100
    seed: int = 0
    patience: int = 5          # validations without improvement before stopping
    min_delta: float = 1e-4
    jitter: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1")
        if self.augmentations_per_image < 1:
            raise ConfigurationError("need at least one augmentation per image")
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.max_steps < 0 or self.validation_every < 1 or self.patience < 1:
            raise ConfigurationError("max_steps >= 0, validation_every >= 1 and patience >= 1 required")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# CPU-friendly schedule: the full-scale learning rate barely moves a network this small.
DESK_CONFIG = TrainConfig(learning_rate=1e-3, batch_size=16, max_steps=2000, validation_every=100)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[tuple[int, float]] = field(default_factory=list)   # (step, loss)
    checkpoint: str | None = None
    steps: int = 0
    stopped_early: bool = False
    initial_val_loss: float | None = None      # validation loss of the untrained network

    def __post_init__(self):
        if any(not math.isfinite(v) or v < 0 for v in self.train_loss):
            raise ValueError("training losses must be finite and non-negative")


def compute_targets(teacher_vol: ScoreVolume4D, student_stride: int = OUTPUT_STRIDE) -> ScoreVolume:
    """Max over grasp height, then max-pool onto the student grid.

    Each student cell takes the best teacher grasp among those it covers.
    """
    if student_stride % teacher_vol.stride:
        raise DimensionError(f"student stride {student_stride} is not a multiple of "
                             f"teacher stride {teacher_vol.stride}")
    factor = student_stride // teacher_vol.stride
    _, _, rows, cols = teacher_vol.scores.shape
    if rows % factor or cols % factor:
        raise DimensionError(f"teacher grid {rows}x{cols} not divisible by {factor}")
    vol = max_over_z(teacher_vol)
    return pool_volume(vol, factor) if factor > 1 else vol


def _scores(v) -> np.ndarray:
    return v.scores if isinstance(v, ScoreVolume) else np.asarray(v, dtype=np.float64)


def distill_loss(predicted, target, kind: str = "bce"):
    """Mean MSE or soft-target BCE between student scores and teacher targets.

    A Tensor prediction gives a differentiable Tensor loss; volumes or arrays
    give a float.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss must be one of {LOSS_KINDS}, got {kind!r}")
    t = _scores(target)
    p = predicted if isinstance(predicted, Tensor) else Tensor(_scores(predicted))
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and target {t.shape} differ in shape")
    if t.min(initial=0) < 0 or t.max(initial=0) > 1:
        raise ValueError("targets must lie in [0, 1]")
    if kind == "mse":
        diff = p - Tensor(t)
        loss = mean(mul(diff, diff))
    else:
        if p.data.min(initial=0.5) <= 0 or p.data.max(initial=0.5) >= 1:
            raise ValueError("predicted probabilities must lie strictly inside (0, 1)")
        loss = -mean(mul(Tensor(t), log(p)) + mul(Tensor(1.0 - t), log(1.0 - p)))
    return loss if isinstance(predicted, Tensor) else loss.item()


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Soft-target BCE of ``sigmoid(logits)``, in the overflow-free form softplus(z) - t*z."""
    if logits.shape != target.shape:
        raise DimensionError(f"logits {logits.shape} and target {target.shape} differ in shape")
    return mean(softplus(logits) - mul(logits, Tensor(target)))


def _loss_from_logits(logits: Tensor, target: np.ndarray, kind: str) -> Tensor:
    if kind == "bce":
        return bce_with_logits(logits, target)
    return distill_loss(sigmoid(logits), target, "mse")


class _Batcher:
    """Deterministic draws of augmented (input, target) pairs with a target cache."""

    def __init__(self, samples: Sequence[PairedSample], modality: str, teacher: AnalyticTeacher,
                 config: TrainConfig):
        self.samples = samples
        self.modality = modality
        self.teacher = teacher
        self.config = config
        self._targets: dict[tuple[int, int], np.ndarray] = {}

    def item(self, index: int, variant: int) -> tuple[np.ndarray, np.ndarray]:
        sample = self.samples[index]
        aug = augment_variant(sample, seed=self.config.seed * 100_003 + index, index=variant,
                              jitter=self.config.jitter)
        key = (index, variant)
        if key not in self._targets:
            vol = self.teacher.dense(aug.depth, aug.resolution)
            self._targets[key] = compute_targets(vol).scores
        return student_input(aug, self.modality), self._targets[key]

    def batch(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.samples) * self.config.augmentations_per_image
        picks = rng.choice(n, size=self.config.batch_size, replace=n < self.config.batch_size)
        xs, ts = zip(*(self.item(int(p) // self.config.augmentations_per_image,
                                 int(p) % self.config.augmentations_per_image) for p in picks))
        return np.stack(xs), np.stack(ts)


def _validation_set(samples: Sequence[PairedSample], modality: str,
                    teacher: AnalyticTeacher) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([student_input(s, modality) for s in samples])
    ts = np.stack([compute_targets(teacher.dense(s.depth, s.resolution)).scores for s in samples])
    return xs, ts


def evaluate_loss(params: NetworkParams, xs: np.ndarray, ts: np.ndarray, kind: str = "bce",
                  chunk: int = 32) -> float:
    total = 0.0
    for i in range(0, len(xs), chunk):
        logits = forward_logits(params, Tensor(xs[i:i + chunk]))
        total += _loss_from_logits(logits, ts[i:i + chunk], kind).item() * len(xs[i:i + chunk])
    return total / len(xs)


def _check_finite(value: float, step: int) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite training loss at step {step}")
    return value


def train(config: TrainConfig, dataset: Sequence[PairedSample], modality: str = "rgb",
          teacher: AnalyticTeacher | None = None, validation: Sequence[PairedSample] | None = None,
          out_dir=None, on_step: Callable[[int, float], None] | None = None
          ) -> tuple[NetworkParams, TrainReport]:
    """Distil ``teacher`` into a fresh student on the opaque part of ``dataset``.

    ``out_dir`` (optional) receives a checkpoint per validation, ``best.stg``
    and ``loss_log.csv``.  Returns the weights with the lowest validation loss.
    """
    if modality not in ("rgb", "rgbd"):
        raise ConfigurationError(f"student modality must be 'rgb' or 'rgbd', got {modality!r}")
    teacher = teacher or AnalyticTeacher(grid_stride=OUTPUT_STRIDE)
    opaque = filter_opaque(dataset)
    if not opaque:
        raise ConfigurationError("no opaque training data")
    val = filter_opaque(validation) if validation is not None else opaque[:16]
    if not val:
        raise ConfigurationError("no opaque validation data")

    params = build_network(MODALITY_CHANNELS[modality], seed=config.seed)
    report = TrainReport()
    if config.max_steps == 0:
        return params, report

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_rows: list[tuple[int, float, float | None]] = []
    batcher = _Batcher(opaque, modality, teacher, config)
    val_x, val_t = _validation_set(val, modality, teacher)
    rng = np.random.default_rng(config.seed)
    opt = Adam(params.weights, lr=config.learning_rate)
    report.initial_val_loss = evaluate_loss(params, val_x, val_t, config.loss)

    best_loss, best_weights, stale = math.inf, [w.data for w in params.weights], 0
    for step in range(1, config.max_steps + 1):
        xs, ts = batcher.batch(rng)
        x = Tensor(xs)
        opt.zero_grad()
        try:
            loss = _loss_from_logits(forward_logits(params, x), ts, config.loss)
            value = _check_finite(loss.item(), step)
            loss.backward()
            opt.step()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite values at step {step}: {exc}") from exc
        report.train_loss.append(value)
        report.steps = step
        if on_step is not None:
            on_step(step, value)
        val_loss = None
        if step % config.validation_every == 0 or step == config.max_steps:
            try:
                val_loss = _check_finite(evaluate_loss(params, val_x, val_t, config.loss), step)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite validation loss at step {step}") from exc
            report.val_loss.append((step, val_loss))
            if out is not None:
                save_network(out / f"step_{step:06d}.stg", params, {"step": step, "val_loss": val_loss})
            if val_loss < best_loss - config.min_delta:
                best_loss, best_weights, stale = val_loss, [w.data for w in params.weights], 0
            else:
                stale += 1
        log_rows.append((step, value, val_loss))
        if stale >= config.patience:
            report.stopped_early = True
            break

    for w, data in zip(params.weights, best_weights):
        w.data = data
    if out is not None:
        best = out / "best.stg"
        save_network(best, params, {"modality": modality, "train": config.to_dict(),
                                    "best_val_loss": best_loss, "initial_val_loss": report.initial_val_loss})
        report.checkpoint = str(best)
        with open(out / "loss_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "train_loss", "val_loss"])
            for step, tr, vl in log_rows:
                writer.writerow([step, repr(tr), "" if vl is None else repr(vl)])
    return params, report
