"""Pinhole projection onto the image plane."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import DEFAULT_FOCAL

IMAGE_SIZE = 224


class BehindCameraError(ValueError):
    """Raised when points to be projected have nonpositive depth."""

    def __init__(self, indices):
        self.indices = np.asarray(indices)
        shown = ", ".join(str(i) for i in self.indices[:10])
        more = "" if len(self.indices) <= 10 else f", ... ({len(self.indices)} total)"
        super().__init__(f"points behind the camera: indices {shown}{more}")


@dataclass(frozen=True)
class ImagePlane:
    width: int = IMAGE_SIZE
    height: int = IMAGE_SIZE
    focal: float = DEFAULT_FOCAL

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not self.focal > 0:
            raise ValueError("focal length must be positive")

    @property
    def cx(self):
        return self.width / 2.0

    @property
    def cy(self):
        return self.height / 2.0


def project(points, plane=ImagePlane(), jacobian=False):
    """Project camera-space points (N, 3) to pixel coordinates (N, 2).

    Pixel (row r, col c) covers [c, c+1) x [r, r+1); the principal point is
    the image center. With ``jacobian`` also returns d(uv)/d(xyz), (N, 2, 3).
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[:, 2]
    bad = np.flatnonzero(~(z > 0))
    if len(bad):
        raise BehindCameraError(bad)
    f = plane.focal
    inv_z = 1.0 / z
    uv = np.empty((len(p), 2))
    uv[:, 0] = f * p[:, 0] * inv_z + plane.cx
    uv[:, 1] = f * p[:, 1] * inv_z + plane.cy
    if not jacobian:
        return uv
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = f * inv_z
    J[:, 1, 1] = f * inv_z
    J[:, 0, 2] = -f * p[:, 0] * inv_z**2
    J[:, 1, 2] = -f * p[:, 1] * inv_z**2
    return uv, J


def project_jacobian(points_jac, proj_jac):
    """Chain d(uv)/d(xyz) (N, 2, 3) with d(xyz)/dh (N, 3, P) to (N, 2, P)."""
    return np.matmul(proj_jac, points_jac)
