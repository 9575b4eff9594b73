"""Training and fitting objectives with analytic gradients.

Skeleton normalization works in 2.5D: a camera-space skeleton is projected,
x and y become pixel offsets from the middle-finger MCP divided by ``g``, and
depth offsets are divided by ``z_root * g / focal`` so all three axes share
one scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .camera import ImagePlane, project
from .mesh import mesh_vjp, skeleton_from_params, synthesize_mesh
from .raster import DEFAULT_CUTOFF, soft_silhouette_vjp
from .toy import ROOT_KEYPOINT

TAU = 15.0
BBOX_FACTOR = 1.5


class NormalizationError(ValueError):
    """Raised for degenerate normalization contexts."""


@dataclass(frozen=True)
class NormalizationContext:
    """Scale and anchor used to (de)normalize one skeleton.

    ``root_uv`` (pixels) and ``z_root`` locate the root joint so that
    denormalization can rebuild camera-space coordinates exactly.
    """

    g: float
    z_root: float
    focal: float
    root_uv: tuple = (0.0, 0.0)
    center: tuple = (112.0, 112.0)
    root_index: int = ROOT_KEYPOINT

    def __post_init__(self):
        if not self.g > 0:
            raise NormalizationError(f"bounding box scale g must be positive, got {self.g}")
        if not self.z_root > 0:
            raise NormalizationError(f"root depth must be positive, got {self.z_root}")
        if not self.focal > 0:
            raise NormalizationError("focal length must be positive")

    def to_dict(self):
        return {"g": self.g, "z_root": self.z_root, "focal": self.focal,
                "root_uv": list(self.root_uv), "center": list(self.center),
                "root_index": self.root_index}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["g"]), float(d["z_root"]), float(d["focal"]),
                   tuple(d["root_uv"]), tuple(d["center"]), int(d["root_index"]))


def context_from_skeleton(j3d, plane=ImagePlane(), root_index=ROOT_KEYPOINT):
    """Context of a camera-space skeleton: g = 1.5 x longest side of its 2D bbox."""
    j3d = np.asarray(j3d, dtype=np.float64)
    uv = project(j3d, plane)
    g = BBOX_FACTOR * float(np.max(uv.max(axis=0) - uv.min(axis=0)))
    return NormalizationContext(g, float(j3d[root_index, 2]), float(plane.focal),
                                tuple(uv[root_index]), (plane.cx, plane.cy), root_index)


def normalize_skeleton(j3d, ctx, jacobian=False):
    """Map a camera-space skeleton (21, 3) to normalized 2.5D coordinates.

    With ``jacobian`` also returns d(out)/d(j3d) as (21, 3, 21, 3).
    """
    j = np.asarray(j3d, dtype=np.float64)
    f, g, r = ctx.focal, ctx.g, ctx.root_index
    Z = j[:, 2]
    if np.any(Z <= 0):
        raise NormalizationError("skeleton has joints with nonpositive depth")
    uv = f * j[:, :2] / Z[:, None]  # principal point cancels in the offsets
    zs = f / (ctx.z_root * g)
    out = np.empty_like(j)
    out[:, :2] = (uv - uv[r]) / g
    out[:, 2] = (Z - Z[r]) * zs
    if not jacobian:
        return out
    n = len(j)
    local = np.zeros((n, 3, 3))  # d(uv, z-part) / d(X, Y, Z) per joint
    local[:, 0, 0] = f / Z / g
    local[:, 1, 1] = f / Z / g
    local[:, 0, 2] = -uv[:, 0] / Z / g
    local[:, 1, 2] = -uv[:, 1] / Z / g
    local[:, 2, 2] = zs
    J = np.zeros((n, 3, n, 3))
    idx = np.arange(n)
    J[idx, :, idx, :] = local
    J[:, :, r, :] -= local[r]
    return out, J


def denormalize_skeleton(jn, ctx):
    """Inverse of ``normalize_skeleton`` for the skeleton ``ctx`` came from."""
    jn = np.asarray(jn, dtype=np.float64)
    f, g = ctx.focal, ctx.g
    Z = jn[:, 2] * ctx.z_root * g / f + ctx.z_root
    uv = jn[:, :2] * g + np.asarray(ctx.root_uv)
    out = np.empty_like(jn)
    out[:, :2] = (uv - np.asarray(ctx.center)) * Z[:, None] / f
    out[:, 2] = Z
    return out


def loss_art(pred, gt, ctx, grad=False):
    """Squared distance between normalized skeletons; gradient w.r.t. ``pred``."""
    gt_n = normalize_skeleton(gt, ctx)
    if not grad:
        return float(np.sum((normalize_skeleton(pred, ctx) - gt_n) ** 2))
    pn, J = normalize_skeleton(pred, ctx, jacobian=True)
    r = pn - gt_n
    return float(np.sum(r * r)), np.einsum("ja,jakb->kb", 2.0 * r, J)


def loss_sh(pred_mask, gt_mask, grad=False):
    """Sum of squared per-pixel differences; gradient w.r.t. ``pred_mask``."""
    d = np.asarray(pred_mask, dtype=np.float64) - np.asarray(gt_mask, dtype=np.float64)
    val = float(np.sum(d * d))
    return (val, 2.0 * d) if grad else val


def uniform_laplacian(faces, n_vertices):
    """Sparse I - D^-1 A over the edge graph of ``faces``."""
    faces = np.asarray(faces)
    i = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    j = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    A = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(n_vertices, n_vertices)).tocsr()
    A = ((A + A.T) > 0).astype(np.float64)
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    return (sp.identity(n_vertices, format="csr") - sp.diags(inv) @ A).tocsr()


def laplacian_of(assets):
    return assets.cached("laplacian", lambda a: uniform_laplacian(a.faces, a.n_vertices))


def loss_lap(v, rest, L, grad=False):
    """sum_i |delta(v)_i - delta(rest)_i|^2 for the uniform Laplacian ``L``.

    With ``grad`` returns (value, dL/dv, dL/drest).
    """
    d = L @ (np.asarray(v, dtype=np.float64) - np.asarray(rest, dtype=np.float64))
    val = float(np.sum(d * d))
    if not grad:
        return val
    gv = 2.0 * (L.T @ d)
    return val, gv, -gv


class GridDescriptor:
    """Foreground-aware appearance descriptor on a regular grid of cells.

    Each cell yields (mask-weighted mean R, G, B, mean occupancy), so a 16x16
    grid gives 1024 values. The weighted mean divides by max(mask mass, 1):
    cells holding at least one pixel's worth of mask get the exact mean,
    nearly empty cells fade to zero instead of blowing up.
    """

    channels = 4

    def __init__(self, grid=16):
        self.grid = grid

    @property
    def dim(self):
        return self.grid * self.grid * self.channels

    def _cells(self, a):
        g = self.grid
        H, W = a.shape[:2]
        if H % g or W % g:
            raise ValueError(f"image size {H}x{W} not divisible by grid {g}")
        return a.reshape(g, H // g, g, W // g, *a.shape[2:])

    def __call__(self, x, m):
        x = np.asarray(x, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        mc = self._cells(m)
        mass = mc.sum(axis=(1, 3))
        wsum = self._cells(x * m[..., None]).sum(axis=(1, 3))
        out = np.empty((self.grid, self.grid, 4))
        out[..., :3] = wsum / np.maximum(mass, 1.0)[..., None]
        out[..., 3] = mass / (mc.shape[1] * mc.shape[3])
        return out.ravel()

    def vjp(self, x, m, grad_out):
        """Pull dL/d(descriptor) back to dL/dm (H, W)."""
        x = np.asarray(x, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        g = self.grid
        H, W = m.shape
        ch, cw = H // g, W // g
        G = np.asarray(grad_out, dtype=np.float64).reshape(g, g, 4)
        mass = self._cells(m).sum(axis=(1, 3))
        wsum = self._cells(x * m[..., None]).sum(axis=(1, 3))
        denom = np.maximum(mass, 1.0)
        color = wsum / denom[..., None]
        # d color / d m_p = (x_p - color * [mass >= 1]) / denom
        gc = G[..., :3] / denom[..., None]
        corr = np.where(mass >= 1.0, np.einsum("abc,abc->ab", gc, color), 0.0)
        per_cell = G[..., 3] / (ch * cw) - corr
        xc = self._cells(x)  # (g, ch, g, cw, 3)
        out = np.einsum("aibjc,abc->aibj", xc, gc) + per_cell[:, None, :, None]
        return out.reshape(H, W)


def feature_term(desc, target, x, m, grad=False):
    """|target - desc(x, m)|^2 and optionally its gradient w.r.t. ``m``."""
    r = np.asarray(target, dtype=np.float64) - desc(x, m)
    val = float(np.sum(r * r))
    return (val, desc.vjp(x, m, -2.0 * r)) if grad else val


def loss_feat(desc, x, m, grad=False):
    """|desc(x, 1) - desc(x, m)|^2: how much the descriptor depends on masking."""
    x = np.asarray(x, dtype=np.float64)
    return feature_term(desc, desc(x, np.ones(x.shape[:2])), x, m, grad)


def mean_joint_error_2d(pred_j2d, gt_j2d):
    d = np.asarray(pred_j2d, dtype=np.float64).reshape(-1, 2) - np.asarray(gt_j2d, dtype=np.float64).reshape(-1, 2)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def lambda_schedule(pred_j2d, gt_j2d, tau=TAU):
    """1 if the mean per-joint 2D error (pixels) is strictly below ``tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return int(mean_joint_error_2d(pred_j2d, gt_j2d) < tau)


@dataclass(frozen=True)
class LossWeights:
    """Per-term multipliers (all 1 by default) and the schedule threshold."""

    tau: float = TAU
    art: float = 1.0
    lap: float = 1.0
    feat: float = 1.0
    sh: float = 1.0
    ref: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass
class Target:
    """Supervision for one instance: camera-space skeleton, mask, 2D joints."""

    j3d: np.ndarray
    mask: np.ndarray
    j2d: np.ndarray
    ctx: NormalizationContext
    image: Optional[np.ndarray] = None


@dataclass
class LossResult:
    total: float
    grad: np.ndarray
    terms: dict = field(default_factory=dict)
    lam: int = 0


def silhouette_pullback(h, assets, plane, sigma, grad_mask, cutoff=DEFAULT_CUTOFF):
    """Soft mask of ``h`` and the pullback of ``grad_mask`` to dL/dh.

    ``grad_mask`` is an array or a callable ``mask -> dL/dmask``.
    """
    mesh = synthesize_mesh(h, assets)
    uv, P = project(mesh.vertices, plane, jacobian=True)
    captured = {}

    def g(mask):
        out = grad_mask(mask) if callable(grad_mask) else grad_mask
        captured["g"] = np.asarray(out, dtype=np.float64)
        return captured["g"]

    mask, guv = soft_silhouette_vjp(uv, assets.faces, plane, sigma, g, cutoff)
    gv = np.einsum("vi,vij->vj", guv, P)
    return mask, mesh_vjp(h, assets, grad_vertices=gv)


def loss_total(h, target, assets, weights=LossWeights(), plane=ImagePlane(), sigma=1.0,
               desc=None, ref=0.0, cutoff=DEFAULT_CUTOFF):
    """L_Art + L_Lap + L_Feat + lam * L_Sh + L_Ref for one instance and dL/dh.

    ``ref`` is the already computed refiner loss (its gradient lives with the
    refiner weights). L_Feat depends only on the descriptor, so its gradient
    w.r.t. ``h`` is zero; it is reported when ``desc`` and an image are given.
    """
    terms, grad = {}, np.zeros_like(np.asarray(h, dtype=np.float64))
    j3d, Jk = skeleton_from_params(h, assets, jacobian=True)
    val, gj = loss_art(j3d, target.j3d, target.ctx, grad=True)
    terms["art"] = val
    grad += weights.art * np.einsum("ka,kap->p", gj, Jk)

    mesh = synthesize_mesh(h, assets)
    val, gp, gr = loss_lap(mesh.posed, mesh.rest, laplacian_of(assets), grad=True)
    terms["lap"] = val
    grad += weights.lap * mesh_vjp(h, assets, grad_posed=gp, grad_rest=gr)

    terms["feat"] = 0.0
    if desc is not None and target.image is not None:
        terms["feat"] = loss_feat(desc, target.image, target.mask)

    lam = lambda_schedule(project(j3d, plane), target.j2d, weights.tau)
    terms["sh"] = 0.0
    if lam:
        store = {}

        def gm(mask):
            store["v"], d = loss_sh(mask, target.mask, grad=True)
            return d

        _, gsh = silhouette_pullback(h, assets, plane, sigma, gm, cutoff)
        terms["sh"] = store["v"]
        grad += weights.sh * gsh
    terms["ref"] = float(ref)
    total = (weights.art * terms["art"] + weights.lap * terms["lap"] + weights.feat * terms["feat"]
             + lam * weights.sh * terms["sh"] + weights.ref * terms["ref"])
    return LossResult(total, grad, terms, lam)
