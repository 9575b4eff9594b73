"""Synthetic training records: perturbed parameters rendered over backgrounds.

A record holds an RGB image, its binary mask, the camera-space skeleton and
the generating parameter vector. Datasets on disk look like::

    manifest.jsonl        one JSON object per record, relative paths
    img/000000.ppm        RGB rendering
    mask/000000.pgm       binary silhouette
    gt/000000.json        skeleton, 2D keypoints, h, normalization context
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import zoom

from .camera import BehindCameraError, ImagePlane, project
from .imageio import read_netpbm, write_pgm, write_ppm
from .losses import NormalizationContext, context_from_skeleton
from .mesh import regress_skeleton, rot_to_quat, synthesize_mesh
from .params import N_SHAPE, POSE, QUAT, SCALE, SHAPE, TRANS, check_params
from .raster import rasterize_hard, render_shaded

SKIN_LIGHT = np.array([0.95, 0.80, 0.70])
SKIN_DARK = np.array([0.45, 0.30, 0.20])


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling ranges for new instances.

    Shape coefficients are uniform on [-shape_range, shape_range]; each Euler
    angle is uniform on [0, rotation_range]. Depth and scale are uniform on
    their ranges and x, y translation on +-xy_range * depth, which keeps the
    toy hand between roughly 20% and 80% of the image height.
    """

    shape_range: float = 3.0
    rotation_range: float = 2 * np.pi
    per_seed: int = 3
    start_epoch: int = 20
    scale_range: tuple = (0.9, 1.1)
    depth_range: tuple = (2.0, 3.0)
    xy_range: float = 0.1
    seed: int = 0
    background_dir: Optional[str] = None

    def __post_init__(self):
        if self.per_seed < 1:
            raise ValueError("per_seed must be at least 1")
        if not self.shape_range >= 0:
            raise ValueError("shape_range must be nonnegative")
        if self.scale_range[0] <= 0 or self.depth_range[0] <= 0:
            raise ValueError("scale and depth ranges must be positive")


def euler_zyx_quat(alpha, beta, gamma):
    """Quaternion of Rz(gamma) Ry(beta) Rx(alpha)."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rot_to_quat(Rz @ Ry @ Rx)


def _sample_camera(h, cfg, rng):
    h[SCALE] = rng.uniform(*cfg.scale_range)
    depth = rng.uniform(*cfg.depth_range)
    h[TRANS] = (rng.uniform(-cfg.xy_range, cfg.xy_range) * depth,
                rng.uniform(-cfg.xy_range, cfg.xy_range) * depth, depth)


# Dataset views: each Euler angle within +-45 degrees of the canonical
# palm-facing pose. Augmentation still draws from the full rotation range.
DATASET_VIEW_RANGE = np.pi / 4


def perturb_seed(h_seed, cfg, rng, view_range=None):
    """New parameters sharing the seed's pose; shape and camera resampled.

    Euler angles come from [0, cfg.rotation_range], or from
    [-view_range, view_range] when that is given.
    """
    h = check_params(h_seed).copy()
    h[SHAPE] = rng.uniform(-cfg.shape_range, cfg.shape_range, N_SHAPE)
    if view_range is None:
        angles = rng.uniform(0.0, cfg.rotation_range, 3)
    else:
        angles = rng.uniform(-view_range, view_range, 3)
    h[QUAT] = euler_zyx_quat(*angles)
    _sample_camera(h, cfg, rng)
    return h


def sample_params(assets, cfg, rng, pose_sigma=0.25, view_range=DATASET_VIEW_RANGE):
    """Fresh dataset parameters: mean pose plus Gaussian joint noise, then
    shape, rotation and camera drawn as in ``perturb_seed``."""
    h = np.zeros(63)
    h[POSE] = assets.mean_pose + rng.normal(0.0, pose_sigma, 45)
    h[QUAT] = (1.0, 0.0, 0.0, 0.0)
    h[SCALE] = 1.0
    return perturb_seed(h, cfg, rng, view_range)


def procedural_background(rng, size=224):
    """Smooth random color field with mild per-pixel noise, in [0, 1]."""
    coarse = rng.uniform(0.0, 1.0, (8, 8, 3))
    smooth = zoom(coarse, (size / 8, size / 8, 1), order=1, mode="nearest")
    noise = rng.normal(0.0, 0.03, (size, size, 3))
    return np.clip(smooth + noise, 0.0, 1.0)


def load_backgrounds(directory):
    paths = sorted(Path(directory).glob("*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no PPM backgrounds in {directory}")
    return [read_netpbm(p) for p in paths]


def pick_background(rng, backgrounds=None, size=224):
    """Random crop of a supplied background, or a procedural one."""
    if not backgrounds:
        return procedural_background(rng, size)
    img = backgrounds[rng.integers(len(backgrounds))]
    H, W = img.shape[:2]
    if H < size or W < size:
        raise ValueError(f"background {W}x{H} smaller than {size}x{size}")
    r, c = rng.integers(H - size + 1), rng.integers(W - size + 1)
    return img[r:r + size, c:c + size].copy()


@dataclass
class Record:
    image: np.ndarray
    mask: np.ndarray
    j3d: np.ndarray
    h: np.ndarray
    j2d: np.ndarray
    ctx: NormalizationContext


def generate_record(h_new, assets, background, rng, cfg=AugmentConfig(), plane=ImagePlane()):
    """Render one record; resamples the camera up to 10 times if the mesh
    crosses behind the camera."""
    h = check_params(h_new).copy()
    for attempt in range(11):
        mesh = synthesize_mesh(h, assets)
        try:
            mask = rasterize_hard(mesh, plane)
            break
        except BehindCameraError:
            if attempt == 10:
                raise
            _sample_camera(h, cfg, rng)
    albedo = np.clip(SKIN_DARK + rng.uniform() * (SKIN_LIGHT - SKIN_DARK) + rng.normal(0, 0.02, 3), 0, 1)
    light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), -1.0])
    image = render_shaded(mesh, plane, albedo, light / np.linalg.norm(light), background)
    j3d = regress_skeleton(mesh, assets)
    return Record(image, mask, j3d, h, project(j3d, plane), context_from_skeleton(j3d, plane))


def augment_epoch_hook(epoch, seed_predictions, cfg, assets, rng, backgrounds=None, plane=ImagePlane()):
    """``per_seed`` new records per seed once ``epoch >= start_epoch``."""
    if epoch < cfg.start_epoch:
        return []
    out = []
    for h_seed in seed_predictions:
        for _ in range(cfg.per_seed):
            h_new = perturb_seed(h_seed, cfg, rng)
            out.append(generate_record(h_new, assets, pick_background(rng, backgrounds, plane.height),
                                       rng, cfg, plane))
    return out


def _gt_dict(rec):
    return {"j3d": rec.j3d.tolist(), "j2d": rec.j2d.tolist(), "h": rec.h.tolist(),
            "ctx": rec.ctx.to_dict()}


def write_record(root, index, rec):
    """Write one record's files; returns its manifest entry."""
    root = Path(root)
    name = f"{index:06d}"
    entry = {"id": index, "image": f"img/{name}.ppm", "mask": f"mask/{name}.pgm", "gt": f"gt/{name}.json"}
    write_ppm(root / entry["image"], rec.image)
    write_pgm(root / entry["mask"], rec.mask)
    (root / entry["gt"]).write_text(json.dumps(_gt_dict(rec)) + "\n")
    return entry


def synthesize_dataset(assets, out_dir, count, seed=0, cfg=AugmentConfig(), plane=ImagePlane(), pose_sigma=0.25,
                       view_range=DATASET_VIEW_RANGE):
    """Generate ``count`` records with per-record generators split from ``seed``."""
    root = Path(out_dir)
    for sub in ("img", "mask", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    backgrounds = load_backgrounds(cfg.background_dir) if cfg.background_dir else None
    children = np.random.SeedSequence(seed).spawn(count)
    entries = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        h = sample_params(assets, cfg, rng, pose_sigma, view_range)
        bg = pick_background(rng, backgrounds, plane.height)
        entries.append(write_record(root, i, generate_record(h, assets, bg, rng, cfg, plane)))
    with open(root / "manifest.jsonl", "w") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")
    return root / "manifest.jsonl"


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path) as fh:
        entries = [json.loads(line) for line in fh if line.strip()]
    return path.parent, entries


def load_record(root, entry):
    root = Path(root)
    gt = json.loads((root / entry["gt"]).read_text())
    image = read_netpbm(root / entry["image"]) if "image" in entry else None
    mask = read_netpbm(root / entry["mask"]) if "mask" in entry else None
    return Record(image, mask, np.array(gt["j3d"]), np.array(gt["h"]), np.array(gt["j2d"]),
                  NormalizationContext.from_dict(gt["ctx"]))


def load_dataset(path):
    root, entries = read_manifest(path)
    return [load_record(root, e) for e in entries]
