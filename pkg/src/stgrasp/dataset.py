"""Paired RGB-D datasets on disk.

Layout::

    <root>/manifest.json
    <root>/scenes/<id>/scene.json   ground-truth scene description and render settings
    <root>/scenes/<id>/depth.pgm    16-bit depth in millimetres (0 = no return)
    <root>/scenes/<id>/rgb.ppm      8-bit colour

All JSON is written with sorted keys, so equal inputs give byte-identical trees.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .pnm import read_pgm, read_ppm, write_pgm, write_ppm
from .scene import (DEFAULT_CAMERA_HEIGHT, DEFAULT_RESOLUTION, DEFAULT_WORKSPACE, DepthModel, Material,
                    PairedSample, SceneSpec, generate_scene, lux_to_illum, random_scene_spec, render_pair)

MANIFEST_FORMAT = "stgrasp.dataset/1"
DEPTH_MAXVAL = 65535


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_opaque: int = 200
    n_transparent: int = 25
    n_specular: int = 25
    n_validation: int = 50            # opaque-only
    max_objects: int = 4
    size_x: float = DEFAULT_WORKSPACE[0]
    size_y: float = DEFAULT_WORKSPACE[1]
    resolution: float = DEFAULT_RESOLUTION
    camera_height: float = DEFAULT_CAMERA_HEIGHT
    lux_range: tuple[float, float] = (350.0, 500.0)
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_opaque, self.n_transparent, self.n_specular, self.n_validation)
        if min(counts) < 0:
            raise DatasetError("scene counts must be non-negative")
        if self.max_objects < 1:
            raise DatasetError("scenes need at least one object")


def encode_depth(depth: np.ndarray) -> np.ndarray:
    """[1,H,W] meters -> [H,W] integer millimetres."""
    mm = np.floor(depth[0] * 1000.0 + 0.5)
    if mm.min() < 0 or mm.max() > DEPTH_MAXVAL:
        raise DatasetError("depth outside the 16-bit millimetre range")
    return mm.astype(np.int64)


def decode_depth(mm: np.ndarray) -> np.ndarray:
    return (mm.astype(np.float64) / 1000.0)[None]


def encode_rgb(rgb: np.ndarray) -> np.ndarray:
    """[3,H,W] in [0,1] -> [H,W,3] 8-bit."""
    return np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64).transpose(1, 2, 0)


def decode_rgb(pixels: np.ndarray) -> np.ndarray:
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_sample(folder: Path, sample: PairedSample, spec: SceneSpec, render: dict) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    write_pgm(folder / "depth.pgm", encode_depth(sample.depth), maxval=DEPTH_MAXVAL)
    write_ppm(folder / "rgb.ppm", encode_rgb(sample.rgb))
    _dump(folder / "scene.json", {"scene": spec.to_dict(), "render": render,
                                  "opaque_only": sample.opaque_only})


def read_sample(folder: Path, scene_id: str | None = None) -> PairedSample:
    meta = json.loads((folder / "scene.json").read_text())
    depth, _ = read_pgm(folder / "depth.pgm")
    rgb, _ = read_ppm(folder / "rgb.ppm")
    return PairedSample(depth=decode_depth(depth), rgb=decode_rgb(rgb), opaque_only=bool(meta["opaque_only"]),
                        scene_id=scene_id or folder.name, resolution=meta["scene"]["resolution"],
                        camera_height=meta["render"]["camera_height"])


def _plan(cfg: DatasetConfig) -> list[tuple[str, str, Material]]:
    plan = []
    for split, material, count in (("train", Material.OPAQUE, cfg.n_opaque),
                                    ("train", Material.TRANSPARENT, cfg.n_transparent),
                                    ("train", Material.SPECULAR, cfg.n_specular),
                                    ("val", Material.OPAQUE, cfg.n_validation)):
        for i in range(count):
            plan.append((split, f"{split}-{material.value}-{i:04d}", material))
    return plan


def generate_dataset(cfg: DatasetConfig, out_dir, force: bool = False) -> dict:
    """Render every scene, write the layout above, and return the manifest."""
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()) and not force:
        raise DatasetError(f"{root} exists and is not empty (use force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[dict]] = {"train": [], "val": []}
    depth_model = DepthModel()
    for index, (split, scene_id, material) in enumerate(_plan(cfg)):
        rng = np.random.default_rng([cfg.seed, index])
        n_objects = int(rng.integers(1, cfg.max_objects + 1))
        spec = random_scene_spec(rng, n_objects, material, cfg.size_x, cfg.size_y, cfg.resolution)
        lux = float(rng.uniform(*cfg.lux_range))
        scene_seed = int(rng.integers(2**31))
        scene = generate_scene(spec, seed=scene_seed)
        sample = render_pair(scene, scene_id, seed=scene_seed, camera_height=cfg.camera_height,
                             illum=lux_to_illum(lux), depth_model=depth_model)
        render = {"camera_height": cfg.camera_height, "lux": lux, "seed": scene_seed}
        write_sample(root / "scenes" / scene_id, sample, spec, render)
        splits[split].append({"id": scene_id, "opaque_only": sample.opaque_only, "material": material.value})
    manifest = {"format": MANIFEST_FORMAT, "seed": cfg.seed, "resolution": cfg.resolution,
                "camera_height": cfg.camera_height, "workspace": [cfg.size_x, cfg.size_y],
                "splits": splits}
    _dump(root / "manifest.json", manifest)
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    return manifest


def load_split(root, split: str) -> list[PairedSample]:
    manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise DatasetError(f"dataset has no split {split!r}")
    return [read_sample(Path(root) / "scenes" / e["id"], e["id"]) for e in manifest["splits"][split]]


def load_scene_spec(root, scene_id: str) -> SceneSpec:
    meta = json.loads((Path(root) / "scenes" / scene_id / "scene.json").read_text())
    return SceneSpec.from_dict(meta["scene"])


def split_ids(manifest: dict, split: str) -> Sequence[str]:
    return [e["id"] for e in manifest["splits"].get(split, [])]
