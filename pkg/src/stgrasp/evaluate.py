"""Evaluation protocols: isolated-object grasping, clutter clearing, heatmaps, reports.

Policies only ever receive rendered PairedSamples; the ground-truth Scene is
seen by :func:`execute_grasp` alone.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .execute import GraspOutcome, closing_extent, execute_grasp
from .gripper import GraspCandidate, GripperModel
from .pnm import write_pgm
from .policy import CropSamplerConfig, NoValidCrop, Policy, score_scene, select_argmax, select_cropped
from .scene import (DEFAULT_CAMERA_HEIGHT, DEFAULT_RESOLUTION, DEFAULT_WORKSPACE, DepthModel, Material,
                    ObjectTemplate, PairedSample, Scene, SceneSpec, generate_scene, place_objects,
                    random_template, render_pair)
from .teacher import N_THETA, ScoreVolume

__all__ = [
    "EvalSetup", "SuccessStats", "Attempt", "Termination", "TrialResult", "execute_grasp",
    "GraspOutcome", "closing_extent", "isolated_object_set", "run_isolated", "run_clutter",
    "clutter_stats", "export_heatmap", "heatmap_pixels", "write_summary_csv", "write_results_json",
]

MATERIALS = (Material.OPAQUE, Material.TRANSPARENT, Material.SPECULAR)
Scorer = Callable[[PairedSample], ScoreVolume]


@dataclass(frozen=True)
class EvalSetup:
    """Workspace, sensors and gripper shared by every evaluation episode."""
    size_x: float = DEFAULT_WORKSPACE[0]
    size_y: float = DEFAULT_WORKSPACE[1]
    resolution: float = DEFAULT_RESOLUTION
    camera_height: float = DEFAULT_CAMERA_HEIGHT
    illum: float = 1.0
    depth_model: DepthModel = DepthModel()
    gripper: GripperModel = GripperModel()

    def render(self, scene: Scene, seed: int, scene_id: str = "eval") -> PairedSample:
        return render_pair(scene, scene_id, seed=seed, camera_height=self.camera_height,
                           illum=self.illum, depth_model=self.depth_model)


def _scorer(policy) -> Scorer:
    if isinstance(policy, Policy):
        return lambda sample: score_scene(policy, sample)
    if callable(policy):
        return policy
    raise TypeError(f"not a policy: {policy!r}")


def _derive(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass
class SuccessStats:
    """Per-material success rate of each trial."""
    rates: dict[str, list[float]] = field(default_factory=dict)

    @property
    def trials(self) -> int:
        return max((len(v) for v in self.rates.values()), default=0)

    def mean(self, material: str) -> float:
        return float(np.mean(self.rates[material]))

    def std(self, material: str) -> float:
        r = self.rates[material]
        return float(np.std(r, ddof=1)) if len(r) > 1 else 0.0

    def overall_mean(self) -> float:
        return float(np.mean([self.mean(m) for m in self.rates]))

    def to_dict(self) -> dict:
        return {m: {"mean": self.mean(m), "std": self.std(m), "per_trial": list(r)}
                for m, r in self.rates.items()}


def isolated_object_set(seed: int, count: int = 15,
                        materials: Sequence[Material] = MATERIALS) -> list[tuple[ObjectTemplate, Material]]:
    """``count`` random object shapes, each made once in every material."""
    rng = np.random.default_rng(seed)
    templates = [random_template(rng) for _ in range(count)]
    return [(t, m) for m in materials for t in templates]


def run_isolated(policy, objects: Sequence[tuple[ObjectTemplate, Material]], trials: int = 5,
                 seed: int = 0, setup: EvalSetup = EvalSetup()) -> SuccessStats:
    """One grasp attempt per object per trial, each object alone at a fresh random pose."""
    if trials < 1:
        raise ValueError("need at least one trial")
    score = _scorer(policy)
    stats = SuccessStats()
    for trial in range(trials):
        hits: dict[str, list[bool]] = {}
        for i, (template, material) in enumerate(objects):
            rng = np.random.default_rng([seed, trial, i])
            placed = place_objects([template], [material], rng, setup.size_x, setup.size_y)
            spec = SceneSpec(setup.size_x, setup.size_y, setup.resolution, placed)
            scene = generate_scene(spec, seed=_derive(seed, trial, i, 0))
            sample = setup.render(scene, seed=_derive(seed, trial, i, 1), scene_id=f"iso-{trial}-{i}")
            q = select_argmax(score(sample))
            hits.setdefault(Material(material).value, []).append(
                execute_grasp(scene, q, setup.gripper).success)
        for material, h in hits.items():
            stats.rates.setdefault(material, []).append(sum(h) / len(h))
    return stats


class Termination(str, Enum):
    ALL_GRASPED = "AllGrasped"
    THREE_FAILURES = "ThreeConsecutiveFailures"
    OUT_OF_WORKSPACE = "ObjectsOutOfWorkspace"
    NO_VALID_CROP = "NoValidCrop"     # attempt outcome only; never ends a trial


@dataclass(frozen=True)
class Attempt:
    candidate: GraspCandidate | None     # None when the crop sampler declined
    success: bool
    score: float | None
    object_id: int | None = None

    @property
    def declined(self) -> bool:
        return self.candidate is None

    def to_dict(self) -> dict:
        return {"candidate": None if self.candidate is None else self.candidate.to_dict(),
                "success": self.success, "score": self.score, "object_id": self.object_id}


@dataclass
class TrialResult:
    attempts: list[Attempt]
    termination: Termination
    object_count: int

    def __post_init__(self):
        if self.successes > self.object_count:
            raise ValueError("more successful grasps than objects")

    @property
    def successes(self) -> int:
        return sum(a.success for a in self.attempts)

    @property
    def success_rate(self) -> float:
        """Successful grasps per attempt (declined crops count as attempts)."""
        return self.successes / len(self.attempts) if self.attempts else 0.0

    def to_dict(self) -> dict:
        return {"termination": self.termination.value, "object_count": self.object_count,
                "successes": self.successes, "attempts": [a.to_dict() for a in self.attempts]}


def _visible(scene: Scene) -> list[int]:
    return [oid for oid in scene.object_ids if scene.object_mask(oid).any()]


def run_clutter(policy, spec: SceneSpec, crop: CropSamplerConfig | None = None, seed: int = 0,
                setup: EvalSetup = EvalSetup()) -> TrialResult:
    """Grasp from a pile until it is cleared, three attempts fail in a row, or nothing is reachable."""
    if len(spec.objects) < 2:
        raise ValueError("a clutter scene needs at least two objects")
    score = _scorer(policy)
    scene = generate_scene(spec, seed=_derive(seed, 0))
    attempts: list[Attempt] = []
    failures = 0
    while True:
        if not scene.object_ids:
            reason = Termination.ALL_GRASPED
            break
        if not _visible(scene):
            reason = Termination.OUT_OF_WORKSPACE
            break
        if failures >= 3:
            reason = Termination.THREE_FAILURES
            break
        n = len(attempts) + 1
        sample = setup.render(scene, seed=_derive(seed, n, 1), scene_id=f"clutter-{n}")
        vol = score(sample)
        if crop is None:
            q = select_argmax(vol)
        else:
            q = select_cropped(vol, crop, sample.resolution, seed=_derive(seed, n, 2))
        if isinstance(q, NoValidCrop):
            attempts.append(Attempt(None, False, None))
            failures += 1
            continue
        outcome = execute_grasp(scene, q, setup.gripper)
        value = float(vol.scores[q.theta_bin, q.y, q.x])
        attempts.append(Attempt(q, outcome.success, value, outcome.object_id))
        scene = outcome.scene
        failures = 0 if outcome.success else failures + 1
    return TrialResult(attempts, reason, len(spec.objects))


def clutter_spec(templates: Sequence[ObjectTemplate], material: Material, seed: int,
                 setup: EvalSetup = EvalSetup()) -> SceneSpec:
    rng = np.random.default_rng(seed)
    placed = place_objects(list(templates), [material] * len(templates), rng, setup.size_x, setup.size_y)
    return SceneSpec(setup.size_x, setup.size_y, setup.resolution, placed)


def clutter_stats(policy, templates: Sequence[ObjectTemplate], trials: int = 5, seed: int = 0,
                  crop: CropSamplerConfig | None = None, setup: EvalSetup = EvalSetup(),
                  materials: Sequence[Material] = MATERIALS) -> tuple[SuccessStats, list[dict]]:
    """Clutter trials per material; rate = successes / attempts of each trial."""
    stats = SuccessStats()
    records = []
    for material in materials:
        for trial in range(trials):
            spec = clutter_spec(templates, material, _derive(seed, trial, 7), setup)
            result = run_clutter(policy, spec, crop, seed=_derive(seed, trial, 8), setup=setup)
            stats.rates.setdefault(Material(material).value, []).append(result.success_rate)
            records.append({"material": Material(material).value, "trial": trial, **result.to_dict()})
    return stats, records


def heatmap_pixels(vol: ScoreVolume, theta_bin: int | str = "max") -> np.ndarray:
    """8-bit heatmap: score 0 -> 0, 1 -> 255, rounded half up, upsampled by the grid stride."""
    if theta_bin == "max":
        plane = vol.scores.max(axis=0)
    elif isinstance(theta_bin, (int, np.integer)) and 0 <= theta_bin < N_THETA:
        plane = vol.scores[int(theta_bin)]
    else:
        raise ValueError(f"theta bin must be in [0, {N_THETA}) or 'max', got {theta_bin!r}")
    pixels = np.floor(plane * 255.0 + 0.5).astype(np.int64)
    s = vol.stride
    return np.repeat(np.repeat(pixels, s, axis=0), s, axis=1)


def export_heatmap(vol: ScoreVolume, theta_bin: int | str, path) -> np.ndarray:
    pixels = heatmap_pixels(vol, theta_bin)
    write_pgm(path, pixels, maxval=255)
    return pixels


SUMMARY_COLUMNS = ["method"] + [f"{m.value}_{k}" for m in MATERIALS for k in ("mean", "std")]


def write_summary_csv(path, table: dict[str, SuccessStats]) -> None:
    """One row per method; mean and stddev of the per-trial rates for each material."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for method, stats in table.items():
            row = [method]
            for m in MATERIALS:
                if m.value in stats.rates:
                    row += [f"{stats.mean(m.value):.4f}", f"{stats.std(m.value):.4f}"]
                else:
                    row += ["", ""]
            writer.writerow(row)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_results_json(path, results: dict) -> None:
    text = json.dumps(results, indent=2, sort_keys=True, default=_json_default)
    Path(path).write_text(text + "\n")
