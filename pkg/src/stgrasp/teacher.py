"""Analytic depth-based grasp scorer used as the distillation teacher.

A grasp ``(x, y, theta, z)`` scores

    sigmoid(alpha * (z - finger_max)) * sigmoid(alpha * (between_max - z))

where heights are recovered from depth as ``camera_height - depth``:
``finger_max`` is the tallest reading under either finger (the fingers must
clear it) and ``between_max`` the tallest reading between them (the jaws must
close on something).  Missing returns (depth 0) read as bare table.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gripper import N_THETA, GraspCandidate, GripperModel, footprint, locate
from .scene import DEFAULT_CAMERA_HEIGHT, DEPTH_SENTINEL, MAX_OBJECT_HEIGHT

DEFAULT_ALPHA = 200.0
DEFAULT_Z_BINS = 8


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ScoreVolume:
    """Grasp quality over (theta, y, x) on a grid of the given stride."""
    scores: np.ndarray
    modality: str = "depth"
    stride: int = 1

    def __post_init__(self):
        if self.scores.ndim != 3 or self.scores.shape[0] != N_THETA:
            raise ValueError(f"score volume must be [{N_THETA}, H, W], got {self.scores.shape}")
        if self.scores.min() < 0 or self.scores.max() > 1:
            raise ValueError("scores must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.scores.shape


@dataclass
class ScoreVolume4D:
    scores: np.ndarray                  # [Z, 16, H, W]
    z_heights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stride: int = 1                     # pixels between neighbouring grasp centers

    def __post_init__(self):
        if self.scores.ndim != 4 or self.scores.shape[1] != N_THETA:
            raise ValueError(f"4-D volume must be [Z, {N_THETA}, H, W], got {self.scores.shape}")
        if len(self.z_heights) != self.scores.shape[0]:
            raise ValueError("one grasp height per z slice required")
        if np.any(np.diff(self.z_heights) <= 0):
            raise ValueError("grasp heights must be strictly increasing")


def z_heights(n_z: int, max_height: float = MAX_OBJECT_HEIGHT) -> np.ndarray:
    """``n_z`` grasp heights spread uniformly over (0, 0.9 * max_height]."""
    if n_z < 1:
        raise ValueError("need at least one z bin")
    top = 0.9 * max_height
    return top * np.arange(1, n_z + 1) / n_z


def recovered_height(depth: np.ndarray, camera_height: float) -> np.ndarray:
    """Height above the table seen by the sensor; missing returns read as table."""
    depth = np.asarray(depth)
    if depth.ndim == 3:
        depth = depth[0]
    return np.where(depth == DEPTH_SENTINEL, 0.0, camera_height - depth)


def score_grasp(depth: np.ndarray, q: GraspCandidate, gripper: GripperModel = GripperModel(),
                camera_height: float = DEFAULT_CAMERA_HEIGHT, resolution: float = 0.005,
                n_z: int = DEFAULT_Z_BINS, alpha: float = DEFAULT_ALPHA,
                z_height: float | None = None) -> float:
    """Score one grasp; its height comes from ``q.z_bin`` unless ``z_height`` is given."""
    h = recovered_height(depth, camera_height)
    rows, cols = h.shape
    cx, cy = q.center_px
    if not (0 <= cx < cols and 0 <= cy < rows):
        raise ValueError(f"grasp {q} outside the {rows}x{cols} pixel grid")
    if z_height is None:
        if q.z_bin is None:
            raise ValueError("grasp needs a z bin or an explicit height")
        zs = z_heights(n_z)
        if not 0 <= q.z_bin < n_z:
            raise ValueError(f"z bin {q.z_bin} outside [0, {n_z})")
        z_height = zs[q.z_bin]
    by, bx, frac = locate(q)
    fp = footprint(q.theta_bin, gripper, resolution, frac)
    pts = np.concatenate([fp.fingers, fp.between]) + [by, bx]
    if pts.min() < 0 or pts[:, 0].max() >= rows or pts[:, 1].max() >= cols:
        raise ValueError(f"gripper footprint of {q} leaves the image")
    finger_max = h[fp.fingers[:, 0] + by, fp.fingers[:, 1] + bx].max()
    between_max = h[fp.between[:, 0] + by, fp.between[:, 1] + bx].max()
    return float(_sigmoid(alpha * (z_height - finger_max)) * _sigmoid(alpha * (between_max - z_height)))


def _shifted_max(hp: np.ndarray, offsets: np.ndarray, start: int, stride: int,
                 rows: int, cols: int) -> np.ndarray:
    out = np.full((rows, cols), -np.inf)
    span_r, span_c = stride * (rows - 1) + 1, stride * (cols - 1) + 1
    for dy, dx in offsets:
        r0, c0 = start + dy, start + dx
        np.maximum(out, hp[r0:r0 + span_r:stride, c0:c0 + span_c:stride], out=out)
    return out


def grid_offset(stride: int) -> tuple[int, float]:
    """Integer base pixel and sub-pixel remainder of the first grasp center on a strided grid."""
    center = (stride - 1) / 2
    base = int(np.floor(center))
    return base, center - base


def footprint_maxima(h: np.ndarray, gripper: GripperModel, resolution: float,
                     stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Per theta bin and grasp center: tallest height under the fingers and between them.

    Grasp centers sit at ``stride * i + (stride - 1) / 2`` pixels, i.e. at the
    centers of ``stride x stride`` cells.  Pixels beyond the image border count
    as bare table.
    """
    rows, cols = h.shape
    if stride < 1 or rows % stride or cols % stride:
        raise ValueError(f"{rows}x{cols} image not divisible into {stride}x{stride} cells")
    pad = gripper.reach(resolution) + 1
    hp = np.pad(h, pad)
    base, frac = grid_offset(stride)
    gr, gc = rows // stride, cols // stride
    fmax = np.empty((N_THETA, gr, gc))
    bmax = np.empty((N_THETA, gr, gc))
    for k in range(N_THETA):
        fp = footprint(k, gripper, resolution, (frac, frac))
        fmax[k] = _shifted_max(hp, fp.fingers, pad + base, stride, gr, gc)
        bmax[k] = _shifted_max(hp, fp.between, pad + base, stride, gr, gc)
    return fmax, bmax


def score_dense(depth: np.ndarray, gripper: GripperModel = GripperModel(),
                camera_height: float = DEFAULT_CAMERA_HEIGHT, n_z: int = DEFAULT_Z_BINS,
                resolution: float = 0.005, alpha: float = DEFAULT_ALPHA,
                stride: int = 1) -> ScoreVolume4D:
    """Teacher scores for every grasp center, theta bin and grasp height.

    ``stride=1`` scores every pixel; larger strides score only the centers of
    ``stride x stride`` cells.
    """
    h = recovered_height(depth, camera_height)
    zs = z_heights(n_z)
    fmax, bmax = footprint_maxima(h, gripper, resolution, stride)
    z = zs[:, None, None, None]
    scores = _sigmoid(alpha * (z - fmax[None])) * _sigmoid(alpha * (bmax[None] - z))
    return ScoreVolume4D(scores=scores, z_heights=zs, stride=stride)


def max_over_z(vol: ScoreVolume4D) -> ScoreVolume:
    return ScoreVolume(vol.scores.max(axis=0), modality="depth", stride=vol.stride)


def pool_volume(vol: ScoreVolume, factor: int) -> ScoreVolume:
    """Spatial max-pool of a score volume by ``factor`` (each cell keeps its best grasp)."""
    _, rows, cols = vol.scores.shape
    if factor < 1 or rows % factor or cols % factor:
        raise ValueError(f"{rows}x{cols} grid not divisible by {factor}")
    pooled = vol.scores.reshape(N_THETA, rows // factor, factor, cols // factor, factor).max(axis=(2, 4))
    return ScoreVolume(pooled, modality=vol.modality, stride=vol.stride * factor)


@dataclass(frozen=True)
class AnalyticTeacher:
    """Bundles the teacher's settings; scoring functions stay stateless."""
    gripper: GripperModel = GripperModel()
    camera_height: float = DEFAULT_CAMERA_HEIGHT
    n_z: int = DEFAULT_Z_BINS
    alpha: float = DEFAULT_ALPHA

    grid_stride: int = 1     # spacing of scored grasp centers, in pixels

    def dense(self, depth: np.ndarray, resolution: float) -> ScoreVolume4D:
        return score_dense(depth, self.gripper, self.camera_height, self.n_z, resolution,
                           self.alpha, self.grid_stride)

    def volume(self, depth: np.ndarray, resolution: float, stride: int | None = None) -> ScoreVolume:
        """Max-over-z scores, max-pooled onto a grid of the given stride (default: own grid)."""
        vol = max_over_z(self.dense(depth, resolution))
        stride = vol.stride if stride is None else stride
        if stride % vol.stride:
            raise ValueError(f"stride {stride} is not a multiple of the teacher grid stride {vol.stride}")
        return pool_volume(vol, stride // vol.stride) if stride > vol.stride else vol
