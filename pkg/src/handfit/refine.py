"""Test-time refinement of a parameter estimate by plain gradient descent.

The objective ties the estimate back to its own 2D evidence::

    E(h) = |(proj(j3d(h)) - j2d') / kappa|^2
           + lam * w_f * |feature - desc(x, soft_mask(h))|^2
           + L_Lap(h)

where j2d' is the regressor's refined keypoint estimate, the mask is the
estimate's own soft silhouette and lam follows the same threshold schedule
used in training with j2d' as reference. ``kappa`` converts the keypoint
residual from pixels to a scale where a 1e-3 step is stable.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .camera import BehindCameraError, ImagePlane, project
from .losses import TAU, feature_term, lambda_schedule, laplacian_of, loss_lap, silhouette_pullback
from .mesh import mesh_vjp, skeleton_from_params, synthesize_mesh
from .params import QUAT

TRACE_COLUMNS = ("iteration", "total", "joint", "feature", "laplacian")


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 50
    gamma: float = 1e-3
    sigma_render: float = 1.0
    cutoff: float = 6.0
    tau: float = TAU
    joint_scale: float = 25.0  # kappa, pixels
    feature_weight: float = 0.01  # descriptor residuals are ~1e2 times the joint term at w_f = 1
    max_halvings: int = 10

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not (self.sigma_render > 0 and self.joint_scale > 0):
            raise ValueError("sigma_render and joint_scale must be positive")


@dataclass
class RefineResult:
    h: np.ndarray
    trace: List[tuple] = field(default_factory=list)
    rollbacks: int = 0
    aborted: bool = False


def refine_objective(h, x, feature, j2d_ref, cfg, assets, desc, plane=ImagePlane(), grad=True):
    """Objective terms at ``h`` as a dict, plus dE/dh when ``grad``."""
    j3d, Jk = skeleton_from_params(h, assets, jacobian=True)
    uv, P = project(j3d, plane, jacobian=True)
    r = (uv - np.asarray(j2d_ref).reshape(-1, 2)) / cfg.joint_scale
    terms = {"joint": float(np.sum(r * r))}
    g = np.einsum("ka,kab,kbp->p", 2.0 * r / cfg.joint_scale, P, Jk)

    mesh = synthesize_mesh(h, assets)
    lap, gp, gr = loss_lap(mesh.posed, mesh.rest, laplacian_of(assets), grad=True)
    terms["laplacian"] = lap
    if grad:
        g += mesh_vjp(h, assets, grad_posed=gp, grad_rest=gr)

    lam = lambda_schedule(uv, j2d_ref, cfg.tau)
    terms["feature"] = 0.0
    if lam:
        store = {}

        def gm(mask):
            store["v"], d = feature_term(desc, feature, x, mask, grad=True)
            return cfg.feature_weight * d

        _, gf = silhouette_pullback(h, assets, plane, cfg.sigma_render, gm, cfg.cutoff)
        terms["feature"] = cfg.feature_weight * store["v"]
        g += gf
    terms["total"] = terms["joint"] + lam * terms["feature"] + terms["laplacian"]
    terms["lam"] = lam
    return (terms, g) if grad else terms


def _normalized(h):
    h = h.copy()
    h[QUAT] /= np.linalg.norm(h[QUAT])
    return h


def testing_refine(x, z, h0, cfg, assets, desc, j2d_ref=None, plane=ImagePlane()):
    """Refine ``h0`` for ``cfg.iterations`` gradient steps.

    ``j2d_ref`` defaults to the evidence keypoints ``z.j2d``. A step that
    pushes the mesh behind the camera is retried with half the step size.
    The trace holds (iteration, total, joint, feature, laplacian) for every
    iterate including the start, so it has ``iterations + 1`` rows unless a
    non-finite objective stops the run early.
    """
    j2d_ref = z.j2d if j2d_ref is None else np.asarray(j2d_ref)
    h = np.asarray(h0, dtype=np.float64).copy()
    out = RefineResult(h)
    if cfg.iterations == 0:
        terms = refine_objective(h, x, z.feature, j2d_ref, cfg, assets, desc, plane, grad=False)
        out.trace.append(_row(0, terms))
        return out
    terms, g = refine_objective(h, x, z.feature, j2d_ref, cfg, assets, desc, plane)
    out.trace.append(_row(0, terms))
    for it in range(1, cfg.iterations + 1):
        step = cfg.gamma
        for _ in range(cfg.max_halvings + 1):
            cand = _normalized(h - step * g)
            try:
                new_terms, new_g = refine_objective(cand, x, z.feature, j2d_ref, cfg, assets, desc, plane)
                break
            except BehindCameraError:
                step *= 0.5
                out.rollbacks += 1
        else:
            break
        if not np.isfinite(new_terms["total"]) or not np.all(np.isfinite(new_g)):
            out.aborted = True
            break
        h, g, terms = cand, new_g, new_terms
        out.trace.append(_row(it, terms))
    out.h = h
    return out


def _row(it, terms):
    return (it, terms["total"], terms["joint"], terms["feature"], terms["laplacian"])


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row[0]] + [f"{v:.6g}" for v in row[1:]])
