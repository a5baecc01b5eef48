"""Grasp policies and selection from dense score volumes.

Every policy reduces an observation to a ScoreVolume on the student grid
(stride 4), so the depth baseline, both students and the late-fusion
combination all share the same selection code.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator

import numpy as np

from .autodiff import DimensionError
from .gripper import GraspCandidate
from .net import OUTPUT_STRIDE, NetworkParams, forward_dense, student_input
from .scene import PairedSample
from .teacher import AnalyticTeacher, ScoreVolume


class ContractError(ValueError):
    """An observation does not carry the channels a policy needs."""


class PolicyKind(str, Enum):
    DEPTH_ONLY = "DepthOnly"
    RGB_STUDENT = "RgbStudent"
    RGBD_STUDENT = "RgbdStudent"
    LATE_FUSION = "LateFusion"


# short names used on the command line and in reports
POLICY_NAMES = {
    "depth": PolicyKind.DEPTH_ONLY,
    "rgb-st": PolicyKind.RGB_STUDENT,
    "rgbd-st": PolicyKind.RGBD_STUDENT,
    "rgbd-m": PolicyKind.LATE_FUSION,
}
_SHORT = {kind: name for name, kind in POLICY_NAMES.items()}


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind
    teacher: AnalyticTeacher | None = None
    student: NetworkParams | None = None

    def __post_init__(self):
        kind = PolicyKind(self.kind)
        object.__setattr__(self, "kind", kind)
        needs_teacher = kind in (PolicyKind.DEPTH_ONLY, PolicyKind.LATE_FUSION)
        channels = {PolicyKind.RGB_STUDENT: 3, PolicyKind.RGBD_STUDENT: 4, PolicyKind.LATE_FUSION: 3}.get(kind)
        if needs_teacher and self.teacher is None:
            raise ValueError(f"{kind.value} needs a depth teacher")
        if channels is not None:
            if self.student is None:
                raise ValueError(f"{kind.value} needs a student network")
            if self.student.input_channels != channels:
                raise ValueError(f"{kind.value} needs a {channels}-channel student, "
                                 f"got {self.student.input_channels}")

    @property
    def name(self) -> str:
        return _SHORT[self.kind]

    def __call__(self, sample: PairedSample) -> ScoreVolume:
        return score_scene(self, sample)


def _check_sample(sample: PairedSample, need_depth: bool, need_rgb: bool) -> None:
    rows, cols = sample.shape
    if need_depth and (sample.depth is None or sample.depth.shape != (1, rows, cols)):
        raise ContractError("policy needs a [1,H,W] depth image")
    if need_rgb and (sample.rgb is None or sample.rgb.shape != (3, rows, cols)):
        raise ContractError("policy needs a [3,H,W] RGB image")
    if rows % OUTPUT_STRIDE or cols % OUTPUT_STRIDE:
        raise ContractError(f"image {rows}x{cols} not divisible by the student stride {OUTPUT_STRIDE}")


def score_scene(policy: Policy, sample: PairedSample) -> ScoreVolume:
    kind = policy.kind
    _check_sample(sample, need_depth=kind != PolicyKind.RGB_STUDENT,
                  need_rgb=kind != PolicyKind.DEPTH_ONLY)
    if kind == PolicyKind.DEPTH_ONLY:
        return policy.teacher.volume(sample.depth, sample.resolution, OUTPUT_STRIDE)
    if kind == PolicyKind.RGB_STUDENT:
        return forward_dense(policy.student, student_input(sample, "rgb"), "rgb")
    if kind == PolicyKind.RGBD_STUDENT:
        return forward_dense(policy.student, student_input(sample, "rgbd"), "rgbd")
    depth = policy.teacher.volume(sample.depth, sample.resolution, OUTPUT_STRIDE)
    rgb = forward_dense(policy.student, student_input(sample, "rgb"), "rgb")
    return fuse_late(depth, rgb)


def fuse_late(vol_depth: ScoreVolume, vol_rgb: ScoreVolume) -> ScoreVolume:
    """Average of the depth and RGB grasp probabilities."""
    if vol_depth.scores.shape != vol_rgb.scores.shape:
        raise DimensionError(f"cannot fuse {vol_depth.scores.shape} with {vol_rgb.scores.shape}")
    if vol_depth.stride != vol_rgb.stride:
        raise DimensionError(f"cannot fuse grids of stride {vol_depth.stride} and {vol_rgb.stride}")
    return ScoreVolume(0.5 * (vol_depth.scores + vol_rgb.scores), modality="fused", stride=vol_depth.stride)


def select_argmax(vol: ScoreVolume) -> GraspCandidate:
    """Highest-scoring grasp; ties go to the smallest (theta, y, x)."""
    if vol.scores.size == 0:
        raise ValueError("empty score volume")
    # np.argmax returns the first maximum in C order, which is lexicographic (theta, y, x)
    k, y, x = np.unravel_index(int(np.argmax(vol.scores)), vol.scores.shape)
    return GraspCandidate(int(x), int(y), int(k), stride=vol.stride)


@dataclass(frozen=True)
class CropSamplerConfig:
    crop_size: float = 0.2        # meters
    score_threshold: float = 0.4
    max_resamples: int = 20

    def __post_init__(self):
        if not self.crop_size > 0:
            raise ValueError("crop size must be positive")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score threshold must lie in [0, 1]")
        if self.max_resamples < 1:
            raise ValueError("need at least one crop attempt")


@dataclass(frozen=True)
class NoValidCrop:
    """Every sampled crop scored below threshold; the policy declines to grasp."""
    attempts: int


def crop_cells(vol: ScoreVolume, cfg: CropSamplerConfig, resolution: float) -> int:
    cells = int(round(cfg.crop_size / (resolution * vol.stride)))
    _, rows, cols = vol.scores.shape
    if cells < 1 or cells > rows or cells > cols:
        raise ValueError(f"a {cfg.crop_size} m crop is {cells} cells, which does not fit a {rows}x{cols} grid")
    return cells


def crop_origins(vol: ScoreVolume, cells: int, seed) -> Iterator[tuple[int, int]]:
    """The (row, col) crop corners select_cropped tries, in order."""
    _, rows, cols = vol.scores.shape
    rng = np.random.default_rng(seed)
    while True:
        r = int(rng.integers(0, rows - cells + 1))
        c = int(rng.integers(0, cols - cells + 1))
        yield r, c


def select_cropped(vol: ScoreVolume, cfg: CropSamplerConfig, resolution: float,
                   seed) -> GraspCandidate | NoValidCrop:
    """Best grasp inside a random square crop whose best score clears the threshold.

    Crops lie fully inside the grid; up to ``cfg.max_resamples`` are tried.
    """
    cells = crop_cells(vol, cfg, resolution)
    origins = crop_origins(vol, cells, seed)
    for _ in range(cfg.max_resamples):
        r, c = next(origins)
        window = vol.scores[:, r:r + cells, c:c + cells]
        if window.max() >= cfg.score_threshold:
            k, y, x = np.unravel_index(int(np.argmax(window)), window.shape)
            return GraspCandidate(int(c + x), int(r + y), int(k), stride=vol.stride)
    return NoValidCrop(attempts=cfg.max_resamples)


Scorer = Callable[[PairedSample], ScoreVolume]
