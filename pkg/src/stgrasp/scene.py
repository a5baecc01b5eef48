"""Synthetic tabletop scenes and co-registered depth / RGB rendering.

Scenes are heightmaps rasterized from a few primitive shapes.  The depth
renderer reproduces the two failure modes of structured-light sensors:
transparent surfaces let the pattern through (the table is seen instead),
specular surfaces scatter it (missing or random readings).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

MAX_OBJECT_HEIGHT = 0.15
DEFAULT_CAMERA_HEIGHT = 0.7
DEFAULT_RESOLUTION = 0.005
DEFAULT_WORKSPACE = (0.24, 0.24)
TABLE_COLOR = (0.55, 0.50, 0.45)
DEPTH_SENTINEL = 0.0
SHAPES = ("box", "cylinder", "ridge")

# light direction for Lambertian shading, (x, y, up); flat surfaces get shade 1
_LIGHT = np.array([-0.3, -0.4, 1.0]) / np.linalg.norm([-0.3, -0.4, 1.0])

_EPS = 1e-9


class Material(str, Enum):
    OPAQUE = "opaque"
    TRANSPARENT = "transparent"
    SPECULAR = "specular"

    @property
    def code(self) -> int:
        return _MATERIAL_ORDER.index(self)


_MATERIAL_ORDER = (Material.OPAQUE, Material.TRANSPARENT, Material.SPECULAR)


def material_from_code(code: int) -> Material:
    return _MATERIAL_ORDER[code]


@dataclass(frozen=True)
class SceneObject:
    """One primitive on the table.

    ``x``/``y`` locate the footprint center in meters from the workspace's
    top-left corner (x to the right, y down); ``rotation`` turns the local
    width axis away from +x.  Cylinders use ``width`` as their diameter.
    """
    shape: str
    x: float
    y: float
    rotation: float
    width: float
    length: float
    height: float
    material: Material = Material.OPAQUE
    albedo: tuple[float, float, float] = (0.2, 0.4, 0.8)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("shape", "x", "y", "rotation", "width", "length", "height")}
        d["material"] = self.material.value
        d["albedo"] = list(self.albedo)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(shape=d["shape"], x=d["x"], y=d["y"], rotation=d["rotation"],
                   width=d["width"], length=d["length"], height=d["height"],
                   material=Material(d["material"]), albedo=tuple(d["albedo"]))

    def corners(self) -> np.ndarray:
        if self.shape == "cylinder":
            r = self.width / 2
            return np.array([[self.x - r, self.y - r], [self.x + r, self.y + r]])
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        hw, hl = self.width / 2, self.length / 2
        local = np.array([[hw, hl], [hw, -hl], [-hw, hl], [-hw, -hl]])
        return np.stack([self.x + local[:, 0] * c - local[:, 1] * s,
                         self.y + local[:, 0] * s + local[:, 1] * c], axis=1)


@dataclass(frozen=True)
class SceneSpec:
    size_x: float = DEFAULT_WORKSPACE[0]
    size_y: float = DEFAULT_WORKSPACE[1]
    resolution: float = DEFAULT_RESOLUTION
    objects: tuple[SceneObject, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return round(self.size_y / self.resolution), round(self.size_x / self.resolution)

    @property
    def opaque_only(self) -> bool:
        return all(o.material is Material.OPAQUE for o in self.objects)

    def validate(self) -> None:
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.size_x <= 0 or self.size_y <= 0:
            raise ValueError("workspace must have positive size")
        for i, obj in enumerate(self.objects):
            if obj.shape not in SHAPES:
                raise ValueError(f"object {i}: unknown shape {obj.shape!r}")
            if not 0 < obj.height <= MAX_OBJECT_HEIGHT:
                raise ValueError(f"object {i}: height {obj.height} outside (0, {MAX_OBJECT_HEIGHT}]")
            if obj.width <= 0 or obj.length <= 0:
                raise ValueError(f"object {i}: footprint dims must be positive")
            pts = obj.corners()
            if (pts.min() < -_EPS or pts[:, 0].max() > self.size_x + _EPS
                    or pts[:, 1].max() > self.size_y + _EPS):
                raise ValueError(f"object {i}: footprint leaves the workspace")

    def to_dict(self) -> dict:
        return {"size_x": self.size_x, "size_y": self.size_y, "resolution": self.resolution,
                "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(size_x=d["size_x"], size_y=d["size_y"], resolution=d["resolution"],
                   objects=tuple(SceneObject.from_dict(o) for o in d["objects"]))


@dataclass
class Scene:
    """Ground truth for one tabletop: heights in meters above the table.

    ``object_map`` holds the id of the topmost object per pixel (-1 = table);
    ids are positions in ``spec.objects`` at generation time and survive
    :meth:`remove_object`.
    """
    spec: SceneSpec
    seed: int
    heightmap: np.ndarray
    material_map: np.ndarray
    albedo_map: np.ndarray
    object_map: np.ndarray
    highlight_map: np.ndarray
    object_ids: tuple[int, ...]
    _layers: dict[int, tuple[np.ndarray, np.ndarray]] = field(repr=False, default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.heightmap.shape

    @property
    def resolution(self) -> float:
        return self.spec.resolution

    def object(self, obj_id: int) -> SceneObject:
        return self.spec.objects[self.object_ids.index(obj_id)]

    def object_mask(self, obj_id: int) -> np.ndarray:
        """Full footprint of one object, including parts hidden under others."""
        return self._layers[obj_id][0] > 0

    def volume(self) -> float:
        return float(self.heightmap.sum()) * self.spec.resolution ** 2

    def remove_object(self, obj_id: int) -> "Scene":
        keep = [i for i in self.object_ids if i != obj_id]
        if len(keep) == len(self.object_ids):
            raise KeyError(f"no object {obj_id} in scene")
        spec = replace(self.spec, objects=tuple(self.object(i) for i in keep))
        layers = {i: self._layers[i] for i in keep}
        return _composite(spec, self.seed, tuple(keep), layers)


def _pixel_centers(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = spec.shape
    xs = (np.arange(cols) + 0.5) * spec.resolution
    ys = (np.arange(rows) + 0.5) * spec.resolution
    return np.meshgrid(xs, ys)


def rasterize_object(obj: SceneObject, spec: SceneSpec) -> np.ndarray:
    """Height raster of a single object sampled at pixel centers (0 off the footprint)."""
    px, py = _pixel_centers(spec)
    dx, dy = px - obj.x, py - obj.y
    c, s = math.cos(obj.rotation), math.sin(obj.rotation)
    lx = dx * c + dy * s
    ly = -dx * s + dy * c
    if obj.shape == "box":
        inside = (np.abs(lx) <= obj.width / 2 + _EPS) & (np.abs(ly) <= obj.length / 2 + _EPS)
        return np.where(inside, obj.height, 0.0)
    if obj.shape == "cylinder":
        inside = dx * dx + dy * dy <= (obj.width / 2) ** 2 + _EPS
        return np.where(inside, obj.height, 0.0)
    # ridge: triangular cross-section across the width, peak along the length axis
    inside = (np.abs(lx) < obj.width / 2) & (np.abs(ly) <= obj.length / 2 + _EPS)
    return np.where(inside, obj.height * (1.0 - 2.0 * np.abs(lx) / obj.width), 0.0)


def _highlights(raster: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # one to three small saturated blobs on the object's footprint
    ys, xs = np.nonzero(raster > 0)
    out = np.zeros(raster.shape, dtype=bool)
    if len(ys) == 0:
        return out
    rr, cc = np.indices(raster.shape)
    for _ in range(int(rng.integers(1, 4))):
        k = int(rng.integers(len(ys)))
        radius = rng.uniform(0.8, 1.8)
        out |= (rr - ys[k]) ** 2 + (cc - xs[k]) ** 2 <= radius ** 2
    return out & (raster > 0)


def generate_scene(spec: SceneSpec, seed: int = 0) -> Scene:
    """Rasterize ``spec``; overlapping objects composite by per-pixel maximum.

    The seed only places specular highlight blobs, so geometry depends on the
    spec alone.
    """
    spec.validate()
    layers = {}
    for i, obj in enumerate(spec.objects):
        raster = rasterize_object(obj, spec)
        if obj.material is Material.SPECULAR:
            hl = _highlights(raster, np.random.default_rng([seed, i]))
        else:
            hl = np.zeros(raster.shape, dtype=bool)
        layers[i] = (raster, hl)
    return _composite(spec, seed, tuple(range(len(spec.objects))), layers)


def _composite(spec: SceneSpec, seed: int, ids: tuple[int, ...],
               layers: dict[int, tuple[np.ndarray, np.ndarray]]) -> Scene:
    rows, cols = spec.shape
    heightmap = np.zeros((rows, cols))
    object_map = np.full((rows, cols), -1, dtype=np.int64)
    material_map = np.full((rows, cols), Material.OPAQUE.code, dtype=np.int8)
    albedo_map = np.empty((3, rows, cols))
    albedo_map[:] = np.array(TABLE_COLOR)[:, None, None]
    highlight_map = np.zeros((rows, cols), dtype=bool)
    for obj_id, obj in zip(ids, spec.objects):
        raster, hl = layers[obj_id]
        top = raster > heightmap
        heightmap = np.where(top, raster, heightmap)
        object_map[top] = obj_id
        material_map[top] = obj.material.code
        albedo_map[:, top] = np.array(obj.albedo)[:, None]
        highlight_map = np.where(top, hl, highlight_map)
    return Scene(spec=spec, seed=seed, heightmap=heightmap, material_map=material_map,
                 albedo_map=albedo_map, object_map=object_map, highlight_map=highlight_map,
                 object_ids=ids, _layers=layers)


# ---------------------------------------------------------------- rendering

@dataclass(frozen=True)
class DepthModel:
    """Sensor corruption knobs; the rates are calibrations, not measurements."""
    noise_std: float = 0.001
    pass_through: float = 0.98     # transparent pixels that read the table
    dropout: float = 0.9           # specular pixels that return nothing
    scatter_range: float = 0.1     # specular returns land this far above the table


def render_depth(scene: Scene, camera_height: float = DEFAULT_CAMERA_HEIGHT, seed: int = 0,
                 model: DepthModel = DepthModel()) -> np.ndarray:
    """Overhead depth image ``[1, H, W]`` in meters; 0.0 marks a missing return."""
    if camera_height <= scene.heightmap.max():
        raise ValueError("camera must be above every object")
    rng = np.random.default_rng(seed)
    h = scene.heightmap
    shape = h.shape
    noise = rng.normal(0.0, model.noise_std, shape) if model.noise_std > 0 else np.zeros(shape)
    u_pass = rng.random(shape)
    u_drop = rng.random(shape)
    scatter = rng.uniform(camera_height - model.scatter_range, camera_height, shape)

    depth = camera_height - h + noise
    transparent = scene.material_map == Material.TRANSPARENT.code
    passed = transparent & (u_pass < model.pass_through)
    depth = np.where(passed, camera_height + noise, depth)
    specular = scene.material_map == Material.SPECULAR.code
    depth = np.where(specular, np.where(u_drop < model.dropout, DEPTH_SENTINEL, scatter), depth)
    return depth[None]


def lambertian_shade(heightmap: np.ndarray, resolution: float) -> np.ndarray:
    gy, gx = np.gradient(heightmap, resolution)
    normal = np.stack([-gx, -gy, np.ones_like(gx)])
    normal /= np.linalg.norm(normal, axis=0)
    return np.maximum(np.tensordot(_LIGHT, normal, axes=1), 0.0) / _LIGHT[2]


def silhouette_edges(object_map: np.ndarray) -> np.ndarray:
    """Object pixels with a 4-neighbour belonging to something else (or off-image)."""
    padded = np.pad(object_map, 1, constant_values=-2)
    center = padded[1:-1, 1:-1]
    edge = np.zeros(object_map.shape, dtype=bool)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        edge |= padded[1 + dy:padded.shape[0] - 1 + dy, 1 + dx:padded.shape[1] - 1 + dx] != center
    return edge & (object_map >= 0)


RIM_VALUE = 0.95
TRANSPARENT_TINT = 0.35


def render_rgb_linear(scene: Scene) -> np.ndarray:
    """Noise-free RGB at illumination 1.0, before clamping."""
    shade = lambertian_shade(scene.heightmap, scene.resolution)
    img = scene.albedo_map * shade
    table = np.array(TABLE_COLOR)[:, None, None]
    transparent = scene.material_map == Material.TRANSPARENT.code
    glass = TRANSPARENT_TINT * scene.albedo_map + (1 - TRANSPARENT_TINT) * table
    img = np.where(transparent, glass, img)
    img = np.where(transparent & silhouette_edges(scene.object_map), RIM_VALUE, img)
    specular = scene.material_map == Material.SPECULAR.code
    img = np.where(specular & scene.highlight_map, 1.0, img)
    return img


def render_rgb(scene: Scene, illum: float = 1.0, seed: int = 0, noise_std: float = 0.01) -> np.ndarray:
    """RGB image ``[3, H, W]`` in [0, 1]."""
    if not 0.25 <= illum <= 2.0:
        raise ValueError(f"illumination {illum} outside [0.25, 2.0]")
    img = render_rgb_linear(scene) * illum
    if noise_std > 0:
        img = img + np.random.default_rng(seed).normal(0.0, noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


def lux_to_illum(lux: float) -> float:
    return lux / 500.0


# ---------------------------------------------------------------- paired samples

@dataclass
class PairedSample:
    """Co-registered depth ``[1,H,W]`` and RGB ``[3,H,W]`` of one scene."""
    depth: np.ndarray
    rgb: np.ndarray
    opaque_only: bool
    scene_id: str
    resolution: float = DEFAULT_RESOLUTION
    camera_height: float = DEFAULT_CAMERA_HEIGHT

    @property
    def shape(self) -> tuple[int, int]:
        image = self.depth if self.depth is not None else self.rgb
        return image.shape[1:]


def render_pair(scene: Scene, scene_id: str, seed: int = 0,
                camera_height: float = DEFAULT_CAMERA_HEIGHT, illum: float = 1.0,
                depth_model: DepthModel = DepthModel(), rgb_noise: float = 0.01) -> PairedSample:
    return PairedSample(
        depth=render_depth(scene, camera_height, seed=seed * 2 + 1, model=depth_model),
        rgb=render_rgb(scene, illum, seed=seed * 2 + 2, noise_std=rgb_noise),
        opaque_only=scene.spec.opaque_only,
        scene_id=scene_id,
        resolution=scene.resolution,
        camera_height=camera_height,
    )


def filter_opaque(dataset: Sequence[PairedSample]) -> list[PairedSample]:
    """Keep the samples whose scenes contain only opaque objects, in order."""
    return [s for s in dataset if s.opaque_only]


# ---------------------------------------------------------------- augmentation

N_THETA = 16
THETA_STEP = math.pi / N_THETA


def _source_index(shape: tuple[int, int], k: int, flip: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For each output pixel, the source pixel it reads and whether that lies inside."""
    rows, cols = shape
    cy, cx = (rows - 1) / 2, (cols - 1) / 2
    rr, cc = np.indices(shape, dtype=np.float64)
    x, y = cc - cx, rr - cy
    phi = k * THETA_STEP
    c, s = round(math.cos(phi), 12), round(math.sin(phi), 12)
    xs = c * x + s * y
    ys = -s * x + c * y
    if flip:
        xs = -xs
    src_c = np.floor(xs + cx + 0.5 + _EPS).astype(np.int64)
    src_r = np.floor(ys + cy + 0.5 + _EPS).astype(np.int64)
    inside = (src_r >= 0) & (src_r < rows) & (src_c >= 0) & (src_c < cols)
    return np.clip(src_r, 0, rows - 1), np.clip(src_c, 0, cols - 1), inside


def rotate_flip(sample: PairedSample, k: int, flip: bool = False) -> PairedSample:
    """Rotate both images by ``k`` theta bins (after an optional horizontal flip).

    Nearest-neighbour resampling keeps depth values untouched; uncovered
    corners read as bare table.  Non-square images are first centred on a
    square table canvas, so every variant of a sample has the same shape.
    """
    border = np.concatenate([sample.rgb[:, 0], sample.rgb[:, -1], sample.rgb[:, :, 0], sample.rgb[:, :, -1]], axis=1)
    fill = np.median(border, axis=1)[:, None, None]
    depth, rgb = _pad_square(sample.depth, sample.camera_height), _pad_square(sample.rgb, fill)
    sr, sc, inside = _source_index(depth.shape[1:], k, flip)
    depth = np.where(inside, depth[:, sr, sc], sample.camera_height)
    rgb = np.where(inside, rgb[:, sr, sc], fill)
    return replace(sample, depth=depth, rgb=rgb)


def _pad_square(image: np.ndarray, fill) -> np.ndarray:
    rows, cols = image.shape[1:]
    side = max(rows, cols)
    if rows == cols:
        return image
    out = np.empty((image.shape[0], side, side), dtype=image.dtype)
    out[...] = fill
    top, left = (side - rows) // 2, (side - cols) // 2
    out[:, top:top + rows, left:left + cols] = image
    return out


def _hue_matrix(angle: float) -> np.ndarray:
    # rotation about the gray axis
    c, s = math.cos(angle), math.sin(angle)
    k = (1 - c) / 3
    r = math.sqrt(1 / 3) * s
    return np.array([[c + k, k - r, k + r],
                     [k + r, c + k, k - r],
                     [k - r, k + r, c + k]])


def color_jitter(rgb: np.ndarray, brightness: float, contrast: float, hue: float) -> np.ndarray:
    img = np.tensordot(_hue_matrix(hue), rgb, axes=1)
    img = img * brightness
    img = (img - img.mean()) * contrast + img.mean()
    return np.clip(img, 0.0, 1.0)


def augment_variant(sample: PairedSample, seed: int, index: int, jitter: bool = True) -> PairedSample:
    """Variant ``index`` of a sample: rotated by ``index mod 16`` theta bins, randomly
    flipped, and (RGB only) colour jittered.  Each variant draws from its own
    stream, so any one can be regenerated without the others.
    """
    rng = np.random.default_rng([seed, index])
    flip = bool(rng.integers(2))
    brightness, contrast = rng.uniform(0.75, 1.25, 2)
    hue = rng.uniform(-math.pi / 12, math.pi / 12)
    aug = rotate_flip(sample, index % N_THETA, flip)
    if jitter:
        aug = replace(aug, rgb=color_jitter(aug.rgb, brightness, contrast, hue))
    return aug


def augment_pair(sample: PairedSample, seed: int, count: int = 32, jitter: bool = True) -> list[PairedSample]:
    """Spatially augmented copies (shared by both modalities) with RGB-only color jitter.

    32 variants cover every rotation twice.
    """
    return [augment_variant(sample, seed, i, jitter) for i in range(count)]


# ---------------------------------------------------------------- random scenes

def random_albedo(rng: np.random.Generator, min_contrast: float = 0.25) -> tuple[float, float, float]:
    """A colour at least ``min_contrast`` away from the table in some channel."""
    table = np.array(TABLE_COLOR)
    while True:
        a = rng.uniform(0.05, 0.95, 3)
        if np.abs(a - table).max() >= min_contrast:
            return tuple(float(v) for v in a)


@dataclass(frozen=True)
class ObjectTemplate:
    shape: str
    width: float
    length: float
    height: float

    def place(self, x: float, y: float, rotation: float, material: Material,
              albedo: tuple[float, float, float]) -> SceneObject:
        return SceneObject(self.shape, x, y, rotation, self.width, self.length,
                           self.height, material, albedo)

    @property
    def radius(self) -> float:
        return 0.5 * math.hypot(self.width, self.length if self.shape != "cylinder" else self.width)


def random_template(rng: np.random.Generator) -> ObjectTemplate:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    height = float(rng.uniform(0.03, 0.08))
    if shape == "cylinder":
        d = float(rng.uniform(0.02, 0.035))
        return ObjectTemplate(shape, d, d, height)
    if shape == "box":
        return ObjectTemplate(shape, float(rng.uniform(0.015, 0.035)), float(rng.uniform(0.02, 0.08)), height)
    return ObjectTemplate(shape, float(rng.uniform(0.02, 0.035)), float(rng.uniform(0.04, 0.08)), height)


def place_objects(templates: Sequence[ObjectTemplate], materials: Sequence[Material],
                  rng: np.random.Generator, size_x: float, size_y: float,
                  margin: float = 0.015, separation: float = 0.01, tries: int = 200,
                  albedos: Sequence[tuple[float, float, float]] | None = None) -> tuple[SceneObject, ...]:
    """Random poses inside the workspace; footprints kept ``separation`` apart when possible."""
    placed: list[SceneObject] = []
    for i, (tpl, mat) in enumerate(zip(templates, materials)):
        albedo = albedos[i] if albedos is not None else random_albedo(rng)
        best = None
        for _ in range(tries):
            lo = margin + tpl.radius
            x = rng.uniform(lo, size_x - lo)
            y = rng.uniform(lo, size_y - lo)
            rot = rng.uniform(0, math.pi)
            cand = tpl.place(float(x), float(y), float(rot), mat, albedo)
            pts = cand.corners()
            if pts.min() < 0 or pts[:, 0].max() > size_x or pts[:, 1].max() > size_y:
                continue
            best = cand
            if all(math.hypot(x - o.x, y - o.y) >= tpl.radius + _radius(o) + separation for o in placed):
                break
        if best is None:
            raise ValueError(f"could not place object {i} inside the workspace")
        placed.append(best)
    return tuple(placed)


def _radius(obj: SceneObject) -> float:
    return ObjectTemplate(obj.shape, obj.width, obj.length, obj.height).radius


def random_scene_spec(rng: np.random.Generator, n_objects: int, material: Material | Sequence[Material],
                      size_x: float = DEFAULT_WORKSPACE[0], size_y: float = DEFAULT_WORKSPACE[1],
                      resolution: float = DEFAULT_RESOLUTION) -> SceneSpec:
    mats = [material] * n_objects if isinstance(material, Material) else list(material)
    templates = [random_template(rng) for _ in range(n_objects)]
    objects = place_objects(templates, mats, rng, size_x, size_y)
    return SceneSpec(size_x, size_y, resolution, objects)
