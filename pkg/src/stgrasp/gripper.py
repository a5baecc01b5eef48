"""Parallel-jaw gripper model and its pixel footprints.

A grasp closes along the axis ``u = (cos theta, sin theta)`` in image
coordinates (x right, y down).  Relative to the grasp center, with ``s``
measured along ``u`` and ``t`` along the jaws:

* the *between* region holds pixels whose centers satisfy
  ``|s| < stroke/2`` and ``|t| <= finger_length/2``;
* each *finger* is the rectangle ``stroke/2 <= |s| <= stroke/2 + thickness``,
  ``|t| <= finger_length/2``, and covers every pixel it overlaps (tested by
  4x4 supersampling), so thin fingers never slip through diagonal gaps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

N_THETA = 16


def theta_of(bin_index: int) -> float:
    """Closing-axis angle of a theta bin; bins split [0, pi) evenly."""
    return bin_index * math.pi / N_THETA


@dataclass(frozen=True)
class GripperModel:
    stroke_width: float = 0.05
    finger_thickness: float = 0.01
    finger_length: float = 0.02
    contact_margin: float = 0.005

    def __post_init__(self):
        if self.stroke_width <= 0:
            raise ValueError("stroke width must be positive")
        if self.finger_thickness <= 0 or self.finger_length <= 0:
            raise ValueError("finger footprint must be positive")

    @property
    def finger_footprint(self) -> tuple[float, float]:
        return self.finger_thickness, self.finger_length

    def reach(self, resolution: float) -> int:
        """Pixels from the center to the farthest footprint pixel, rounded up."""
        hs = self.stroke_width / 2 / resolution + self.finger_thickness / resolution
        hl = self.finger_length / 2 / resolution
        return math.ceil(math.hypot(hs, hl) + 1)


@dataclass(frozen=True)
class GraspCandidate:
    """A planar grasp on a grid with the given stride (1 = pixel grid)."""
    x: int
    y: int
    theta_bin: int
    z_bin: int | None = None
    stride: int = 1

    def __post_init__(self):
        if not 0 <= self.theta_bin < N_THETA:
            raise ValueError(f"theta bin {self.theta_bin} outside [0, {N_THETA})")

    @property
    def center_px(self) -> tuple[float, float]:
        """Grasp center (x, y) in pixel coordinates; cell centers for strided grids."""
        off = (self.stride - 1) / 2
        return self.x * self.stride + off, self.y * self.stride + off

    @property
    def theta(self) -> float:
        return theta_of(self.theta_bin)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "theta_bin": self.theta_bin,
                "z_bin": self.z_bin, "stride": self.stride}


@dataclass(frozen=True)
class Footprint:
    """Pixel offsets (dy, dx) relative to the integer base pixel of a grasp."""
    fingers: np.ndarray
    between: np.ndarray
    between_s: np.ndarray   # closing-axis coordinate of each between pixel, in pixels


_SUB = np.array([-0.375, -0.125, 0.125, 0.375])


@lru_cache(maxsize=4096)
def _footprint(theta_bin: int, frac_x: float, frac_y: float, half_stroke: float,
               thickness: float, half_len: float) -> Footprint:
    theta = theta_of(theta_bin)
    c, s = round(math.cos(theta), 12), round(math.sin(theta), 12)
    r = math.ceil(math.hypot(half_stroke + thickness, half_len) + 1)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    dy, dx = dy.ravel(), dx.ravel()

    def coords(px, py):
        su = np.round(px * c + py * s, 9)
        tv = np.round(-px * s + py * c, 9)
        return su, tv

    su, tv = coords(dx - frac_x, dy - frac_y)
    between = (np.abs(su) < half_stroke) & (np.abs(tv) <= half_len)

    fingers = np.zeros(dx.shape, dtype=bool)
    for oy in _SUB:
        for ox in _SUB:
            su2, tv2 = coords(dx - frac_x + ox, dy - frac_y + oy)
            fingers |= ((np.abs(su2) >= half_stroke) & (np.abs(su2) <= half_stroke + thickness)
                        & (np.abs(tv2) <= half_len))
    stack = np.stack([dy, dx], axis=1)
    return Footprint(fingers=stack[fingers], between=stack[between], between_s=su[between])


def footprint(theta_bin: int, gripper: GripperModel, resolution: float,
              frac: tuple[float, float] = (0.0, 0.0)) -> Footprint:
    """Footprint of a grasp whose center sits ``frac`` = (fx, fy) past its base pixel."""
    return _footprint(theta_bin, round(frac[0], 9), round(frac[1], 9),
                      round(gripper.stroke_width / 2 / resolution, 9),
                      round(gripper.finger_thickness / resolution, 9),
                      round(gripper.finger_length / 2 / resolution, 9))


def locate(candidate: GraspCandidate) -> tuple[int, int, tuple[float, float]]:
    """Base pixel (row, col) of a candidate and the fractional center offset."""
    cx, cy = candidate.center_px
    bx, by = math.floor(cx), math.floor(cy)
    return by, bx, (cx - bx, cy - by)
