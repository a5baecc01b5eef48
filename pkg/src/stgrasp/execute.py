"""Ground-truth grasp execution on the true heightmap.

The gripper descends over the grasp center until a finger touches the table
or an object, stopping ``contact_margin`` above the tallest point under its
fingers.  The grasp succeeds when something between the jaws rises above
that stop height and the contacted object fits inside the stroke.  This is a
geometric stand-in for gripper-closure feedback on a real robot.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gripper import GraspCandidate, GripperModel, footprint, locate
from .scene import Scene

_EPS = 1e-9


@dataclass(frozen=True)
class GraspOutcome:
    success: bool
    object_id: int | None
    scene: Scene          # the scene after the attempt (grasped object removed)
    stop_height: float


def _gather(arr: np.ndarray, pts: np.ndarray, fill):
    rows, cols = arr.shape
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < rows) & (pts[:, 1] >= 0) & (pts[:, 1] < cols)
    out = np.full(len(pts), fill, dtype=arr.dtype)
    out[inside] = arr[pts[inside, 0], pts[inside, 1]]
    return out


def closing_extent(scene: Scene, obj_id: int, q: GraspCandidate, gripper: GripperModel) -> float:
    """Width in meters of an object along the closing axis, within the jaws' band."""
    cx, cy = q.center_px
    rows, cols = np.nonzero(scene.object_mask(obj_id))
    dx, dy = cols - cx, rows - cy
    c, s = np.cos(q.theta), np.sin(q.theta)
    su = dx * c + dy * s
    tv = -dx * s + dy * c
    band = np.abs(tv) <= gripper.finger_length / 2 / scene.resolution + _EPS
    if not band.any():
        return 0.0
    return (su[band].max() - su[band].min() + 1.0) * scene.resolution


def execute_grasp(scene: Scene, q: GraspCandidate, gripper: GripperModel = GripperModel()) -> GraspOutcome:
    if q.z_bin is not None:
        raise ValueError("executed grasps carry no z; the gripper descends until contact")
    rows, cols = scene.shape
    cx, cy = q.center_px
    if not (0 <= cx < cols and 0 <= cy < rows):
        raise ValueError(f"grasp {q} outside the {rows}x{cols} workspace image")
    by, bx, frac = locate(q)
    fp = footprint(q.theta_bin, gripper, scene.resolution, frac)
    base = np.array([by, bx])
    finger_h = _gather(scene.heightmap, fp.fingers + base, 0.0)
    stop = float(finger_h.max(initial=0.0)) + gripper.contact_margin
    # fingers rest above everything beneath them, so clearance at the stop height holds by construction
    pts = fp.between + base
    between_h = _gather(scene.heightmap, pts, 0.0)
    between_id = _gather(scene.object_map, pts, -1)
    caught = between_h > stop + _EPS
    if not caught.any():
        return GraspOutcome(False, None, scene, stop)
    top = int(between_id[caught][np.argmax(between_h[caught])])
    if closing_extent(scene, top, q, gripper) > gripper.stroke_width + _EPS:
        return GraspOutcome(False, None, scene, stop)
    return GraspOutcome(True, top, scene.remove_object(top), stop)
