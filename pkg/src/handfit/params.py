"""Layout of the 63-dim mesh parameter vector and its typed views.

The fitting state is a flat float64 array ``h`` laid out as::

    [pose (45) | shape (10) | quaternion w,x,y,z (4) | scale (1) | translation (3)]

Everything downstream (skinning, rendering, losses, regressors) works on the
flat array; the dataclasses below exist for validation at API boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_POSE = 45
N_SHAPE = 10
N_PARAMS = 63
N_ARTICULATED = 15

POSE = slice(0, 45)
SHAPE = slice(45, 55)
QUAT = slice(55, 59)
SCALE = 59
TRANS = slice(60, 63)

SHAPE_CLAMP = 5.0

# Camera defaults used when synthesizing a mesh from the initial estimate.
DEFAULT_DEPTH = 2.5
DEFAULT_FOCAL = 280.0


def wrap_axis_angle(theta):
    """Wrap each 3-vector of an axis-angle array so its norm is at most pi."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3).copy()
    norms = np.linalg.norm(theta, axis=1)
    big = norms > np.pi
    if np.any(big):
        axis = theta[big] / norms[big, None]
        wrapped = np.mod(norms[big] + np.pi, 2 * np.pi) - np.pi
        theta[big] = axis * wrapped[:, None]
    return theta.reshape(-1)


@dataclass(frozen=True)
class PoseParams:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if theta.shape != (N_POSE,):
            raise ValueError(f"pose needs {N_POSE} values, got {theta.shape[0]}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("pose contains non-finite values")
        object.__setattr__(self, "theta", wrap_axis_angle(theta))


@dataclass(frozen=True)
class ShapeParams:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if beta.shape != (N_SHAPE,):
            raise ValueError(f"shape needs {N_SHAPE} values, got {beta.shape[0]}")
        if not np.all(np.isfinite(beta)):
            raise ValueError("shape contains non-finite values")
        object.__setattr__(self, "beta", np.clip(beta, -SHAPE_CLAMP, SHAPE_CLAMP))


@dataclass(frozen=True)
class CameraParams:
    """Similarity transform plus pinhole focal length.

    ``quat`` is stored as given; consumers normalize it. ``focal`` is an
    intrinsic and is not part of ``h``.
    """

    quat: np.ndarray
    scale: float
    trans: np.ndarray
    focal: float = DEFAULT_FOCAL

    def __post_init__(self):
        quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if not np.linalg.norm(quat) > 0:
            raise ValueError("quaternion must be nonzero")
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        object.__setattr__(self, "quat", quat)
        object.__setattr__(self, "trans", trans)

    @property
    def unit_quat(self):
        return self.quat / np.linalg.norm(self.quat)


@dataclass(frozen=True)
class MeshParams:
    pose: PoseParams
    shape: ShapeParams
    camera: CameraParams

    @classmethod
    def from_vector(cls, h, focal=DEFAULT_FOCAL):
        h = check_params(h)
        return cls(
            PoseParams(h[POSE]),
            ShapeParams(h[SHAPE]),
            CameraParams(h[QUAT], float(h[SCALE]), h[TRANS], focal),
        )

    def to_vector(self):
        return pack_params(
            self.pose.theta, self.shape.beta, self.camera.quat,
            self.camera.scale, self.camera.trans,
        )


def check_params(h):
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (N_PARAMS,):
        raise ValueError(f"mesh parameters need shape ({N_PARAMS},), got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("mesh parameters contain non-finite values")
    return h


def pack_params(pose, shape, quat, scale, trans):
    h = np.empty(N_PARAMS)
    h[POSE] = np.asarray(pose, dtype=np.float64).reshape(N_POSE)
    h[SHAPE] = np.asarray(shape, dtype=np.float64).reshape(N_SHAPE)
    h[QUAT] = np.asarray(quat, dtype=np.float64).reshape(4)
    h[SCALE] = scale
    h[TRANS] = np.asarray(trans, dtype=np.float64).reshape(3)
    return h


def split_params(h):
    """Return views ``(pose, shape, quat, scale, trans)`` into ``h``."""
    h = np.asarray(h)
    return h[POSE], h[SHAPE], h[QUAT], h[SCALE], h[TRANS]


def camera_offset(depth=DEFAULT_DEPTH):
    """Vector subtracted from ``h`` before it enters the linear regressors.

    Identity rotation, unit scale and the default depth all encode to zero,
    so the initial estimate is zero everywhere except the pose block.
    """
    off = np.zeros(N_PARAMS)
    off[QUAT] = (1.0, 0.0, 0.0, 0.0)
    off[SCALE] = 1.0
    off[TRANS] = (0.0, 0.0, depth)
    return off


def identity_camera_params(pose=None, shape=None):
    """Parameters with identity rotation, unit scale and zero translation."""
    return pack_params(
        np.zeros(N_POSE) if pose is None else pose,
        np.zeros(N_SHAPE) if shape is None else shape,
        (1.0, 0.0, 0.0, 0.0), 1.0, np.zeros(3),
    )
