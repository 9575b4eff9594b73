"""Gaussian keypoint heatmaps on a 32x32 grid over a 224x224 image."""
from __future__ import annotations

import numpy as np

HEATMAP_SIZE = 32
HEATMAP_SIGMA = 1.5  # in cells


def cell_size(image_size=224, size=HEATMAP_SIZE):
    return image_size / size


def encode_heatmaps(j2d, image_size=224, size=HEATMAP_SIZE, sigma=HEATMAP_SIGMA):
    """One unit-peak isotropic Gaussian per joint, (K, size, size).

    Cell (r, c) has its center at pixel ((c + 0.5) * s, (r + 0.5) * s) with
    s = image_size / size.
    """
    j = np.asarray(j2d, dtype=np.float64).reshape(-1, 2)
    s = cell_size(image_size, size)
    centers = j / s - 0.5  # continuous cell coordinates (col, row)
    grid = np.arange(size, dtype=np.float64)
    gx = np.exp(-((grid[None, :] - centers[:, :1]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((grid[None, :] - centers[:, 1:]) ** 2) / (2 * sigma**2))
    return gy[:, :, None] * gx[:, None, :]


def decode_heatmaps(hm, image_size=224):
    """Per-channel argmax mapped to its cell center in pixels, (K, 2).

    Ties go to the lowest row-major index, so a uniform channel decodes to
    cell (0, 0).
    """
    hm = np.asarray(hm, dtype=np.float64)
    k, size = hm.shape[0], hm.shape[-1]
    flat = np.argmax(hm.reshape(k, -1), axis=1)
    rows, cols = np.divmod(flat, size)
    s = cell_size(image_size, size)
    return np.stack([(cols + 0.5) * s, (rows + 0.5) * s], axis=1)


def heatmap_loss(pred, gt):
    """Sum of squared differences between heatmap stacks."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return float(np.sum(d * d))
