"""Glue between synthetic records, the estimator and refinement."""
from __future__ import annotations

import numpy as np

from .estimator import Evidence2D, TrainingSample, initial_params, run_hme
from .losses import GridDescriptor, Target, context_from_skeleton, denormalize_skeleton, loss_feat, normalize_skeleton
from .mesh import skeleton_from_params
from .refine import RefineConfig, testing_refine
from .synth import augment_epoch_hook
from .toy import ROOT_KEYPOINT


def evidence_from_record(rec, desc, j2d=None):
    """Evidence for a record: descriptor of the image restricted to the hand.

    The descriptor evaluated with the true mask stands in for an ideally
    trained foreground-focused feature extractor; keypoints default to the
    exact projections.
    """
    return Evidence2D(desc(rec.image, rec.mask), rec.j2d if j2d is None else j2d)


def sample_from_record(rec, desc, j2d=None):
    target = Target(rec.j3d, rec.mask, rec.j2d, rec.ctx, rec.image)
    return TrainingSample(evidence_from_record(rec, desc, j2d), target, loss_feat(desc, rec.image, rec.mask),
                          params=rec.h)


def augment_adapter(cfg, assets, desc, backgrounds=None):
    """Wrap ``augment_epoch_hook`` into the callback ``train`` expects."""

    def hook(epoch, seeds, rng):
        records = augment_epoch_hook(epoch, seeds, cfg, assets, rng, backgrounds)
        return [sample_from_record(r, desc) for r in records]

    return hook


def root_relative(j3d, root_index=ROOT_KEYPOINT):
    j = np.asarray(j3d, dtype=np.float64)
    return j - j[..., root_index:root_index + 1, :]


def joint_error(pred_j3d, gt_j3d):
    """Mean Euclidean distance between corresponding camera-space joints."""
    d = np.asarray(pred_j3d) - np.asarray(gt_j3d)
    return float(np.mean(np.linalg.norm(d, axis=-1)))


def scale_normalized_error(pred_j3d, gt_j3d, gt_ctx):
    """Joint error after normalizing the prediction by its own root and 2D
    extent and mapping it back with the ground-truth context.

    This scores articulation and view, not absolute depth or hand size,
    which a monocular estimate cannot pin down.
    """
    pred = np.asarray(pred_j3d, dtype=np.float64)
    aligned = denormalize_skeleton(normalize_skeleton(pred, context_from_skeleton(pred)), gt_ctx)
    return joint_error(aligned, gt_j3d)


def fit_record(rec, w, assets, desc=None, refine_cfg=RefineConfig(), evidence=None):
    """run_hme followed by test-time refinement; returns (hme result, refined h, refine result)."""
    desc = GridDescriptor() if desc is None else desc
    z = evidence_from_record(rec, desc) if evidence is None else evidence
    hme = run_hme(z, w, assets)
    ref = testing_refine(rec.image, z, hme.h, refine_cfg, assets, desc, j2d_ref=hme.j2d)
    return hme, ref.h, ref


def baseline_error(records, assets):
    j0 = skeleton_from_params(initial_params(assets), assets)
    return float(np.mean([joint_error(j0, r.j3d) for r in records]))
