"""BEV ground-truth boxes and point-in-box tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GroundTruthBox:
    """Oriented rectangle on a BEV grid.

    Coordinates are continuous cell indices: integer ``u`` is the center of
    cell ``u``. ``du``/``dv`` are half-extents along the box's own axes and
    ``yaw`` rotates the box counter-clockwise from the u axis.
    """

    u: float
    v: float
    du: float
    dv: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.du > 0 and self.dv > 0):
            raise ValueError(f"half-extents must be positive, got {self.du}, {self.dv}")
        if not all(math.isfinite(x) for x in (self.u, self.v, self.du, self.dv, self.yaw)):
            raise ValueError("box fields must be finite")

    def contains(self, uv: np.ndarray) -> np.ndarray:
        """Boolean mask of the (M, 2) points lying inside the box (edges included)."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        du = uv[:, 0] - self.u
        dv = uv[:, 1] - self.v
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lu = c * du + s * dv
        lv = -s * du + c * dv
        return (np.abs(lu) <= self.du) & (np.abs(lv) <= self.dv)

    def rescaled(self, factor: int) -> "GroundTruthBox":
        """The same box on a grid downsampled by ``factor``.

        Cell ``i`` of the coarse grid covers fine cells ``factor*i .. factor*i+factor-1``,
        so its center sits at fine index ``factor*i + (factor-1)/2``.
        """
        if factor == 1:
            return self
        shift = (factor - 1) / 2.0
        return GroundTruthBox(
            (self.u - shift) / factor,
            (self.v - shift) / factor,
            self.du / factor,
            self.dv / factor,
            self.yaw,
        )


def inside_any(uv: np.ndarray, boxes) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    hit = np.zeros(len(uv), dtype=bool)
    for box in boxes:
        hit |= box.contains(uv)
    return hit
