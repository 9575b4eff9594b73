"""Keypoint and segmentation metrics."""
from __future__ import annotations

import numpy as np

DEFAULT_THRESHOLDS = np.linspace(0.0, 0.1, 21)


def joint_distances(pred, gt):
    """Euclidean distance per (sample, joint) pair, flattened."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.shape[-1] != 3:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return np.linalg.norm(p - g, axis=-1).ravel()


def compute_pck_auc(pred, gt, thresholds=DEFAULT_THRESHOLDS):
    """PCK per threshold and the normalized trapezoidal area under it.

    PCK(t) is the fraction of (sample, joint) pairs whose 3D error is at most
    t. The AUC integrates PCK over [min(thresholds), max(thresholds)] and
    divides by the interval length, so it lies in [0, 1].
    """
    t = np.sort(np.asarray(thresholds, dtype=np.float64))
    if t.size < 2 or t[-1] <= t[0]:
        raise ValueError("need at least two distinct thresholds")
    d = joint_distances(pred, gt)
    if d.size == 0:
        raise ValueError("no joints to evaluate")
    pck = np.array([np.mean(d <= x) for x in t])
    auc = float(np.trapezoid(pck, t) / (t[-1] - t[0]))
    return {"thresholds": t, "pck": pck, "auc": auc, "mean_error": float(d.mean())}


def compute_seg_metrics(pred_mask, gt_mask):
    """IoU, precision, recall and F1 (x100) over foreground pixels.

    Masks are binarized at 0.5. An empty prediction against an empty ground
    truth counts as a perfect match for every score.
    """
    p = np.asarray(pred_mask) >= 0.5
    g = np.asarray(gt_mask) >= 0.5
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = float(np.sum(p & g))
    n_p, n_g, union = float(p.sum()), float(g.sum()), float(np.sum(p | g))
    if union == 0:
        return {"iou": 1.0, "precision": 1.0, "recall": 1.0, "f1": 100.0}
    iou = tp / union
    precision = tp / n_p if n_p else 0.0
    recall = tp / n_g if n_g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"iou": iou, "precision": precision, "recall": recall, "f1": 100.0 * f1}
