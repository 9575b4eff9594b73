import json

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from handfit.camera import project
from handfit.imageio import write_ppm
from handfit.mesh import regress_skeleton, skeleton_from_params, synthesize_mesh
from handfit.params import POSE, QUAT, SHAPE
from handfit.raster import rasterize_hard
from handfit.synth import (DATASET_VIEW_RANGE, AugmentConfig, augment_epoch_hook, generate_record, load_backgrounds,
                           load_dataset, perturb_seed, pick_background, procedural_background, read_manifest, sample_params,
                           synthesize_dataset)

CFG = AugmentConfig()


@pytest.fixture(scope="module")
def record(assets):
    rng = np.random.default_rng(8)
    return generate_record(sample_params(assets, CFG, rng), assets, procedural_background(rng), rng)


def test_config_defaults_and_validation():
    assert (CFG.shape_range, CFG.rotation_range, CFG.per_seed, CFG.start_epoch) == (3.0, 2 * np.pi, 3, 20)
    with pytest.raises(ValueError):
        AugmentConfig(per_seed=0)


def test_perturb_keeps_pose(assets, rng):
    seed = sample_params(assets, CFG, rng)
    for _ in range(5):
        h = perturb_seed(seed, CFG, rng)
        np.testing.assert_array_equal(h[POSE], seed[POSE])


def test_collapsed_ranges_change_only_rotation(assets, rng):
    cfg = AugmentConfig(shape_range=0.0, scale_range=(1.0, 1.0), depth_range=(2.5, 2.5), xy_range=0.0)
    seed = sample_params(assets, cfg, rng)
    h = perturb_seed(seed, cfg, rng)
    keep = np.ones(63, bool)
    keep[QUAT] = False
    np.testing.assert_array_equal(h[keep], seed[keep])


def test_shape_sampler_statistics(rng):
    h0 = np.zeros(63)
    h0[QUAT] = (1, 0, 0, 0)
    h0[59] = 1.0
    s = np.array([perturb_seed(h0, CFG, rng)[SHAPE] for _ in range(1000)])
    assert s.min() >= -3 and s.max() <= 3
    assert np.all(np.abs(s.mean(axis=0)) <= 0.2)


def test_rotations_cover_all_octants():
    rng = np.random.default_rng(0)
    h0 = np.zeros(63)
    h0[QUAT] = (1, 0, 0, 0)
    h0[59] = 1.0
    axis = np.array([0.3, 0.5, 0.8])
    hits = set()
    for _ in range(1000):
        w, x, y, z = perturb_seed(h0, CFG, rng)[QUAT]
        R = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                      [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                      [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
        hits.add(tuple(R @ axis > 0))
    assert len(hits) == 8


def test_dataset_views_stay_in_range(assets, rng):
    for _ in range(20):
        h = sample_params(assets, CFG, rng)
        w = h[QUAT][0]
        assert abs(w) >= np.cos(1.5 * DATASET_VIEW_RANGE)  # three 45 degree turns compose to under 135 degrees


def test_record_consistency(assets, record):
    hard = rasterize_hard(synthesize_mesh(record.h, assets)) > 0
    np.testing.assert_array_equal(record.mask > 0, hard)
    np.testing.assert_allclose(skeleton_from_params(record.h, assets), record.j3d, atol=1e-9)
    np.testing.assert_allclose(regress_skeleton(synthesize_mesh(record.h, assets), assets), record.j3d, atol=1e-9)
    grown = binary_dilation(record.mask > 0, iterations=3)
    for u, v in project(record.j3d):
        assert grown[int(v), int(u)]


def test_generate_record_deterministic(assets):
    def make():
        rng = np.random.default_rng(3)
        return generate_record(sample_params(assets, CFG, rng), assets, procedural_background(rng), rng)

    a, b = make(), make()
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.j3d, b.j3d)


def test_augment_hook_counts(assets, rng):
    seeds = [sample_params(assets, CFG, rng) for _ in range(4)]
    assert augment_epoch_hook(19, seeds, CFG, assets, rng) == []
    assert augment_epoch_hook(20, [], CFG, assets, rng) == []
    out = augment_epoch_hook(20, seeds, CFG, assets, rng)
    assert len(out) == 12
    for i, rec in enumerate(out):
        np.testing.assert_array_equal(rec.h[POSE], seeds[i // 3][POSE])


def test_dataset_on_disk_reproducible(assets, tmp_path):
    a = synthesize_dataset(assets, tmp_path / "a", 3, seed=9)
    b = synthesize_dataset(assets, tmp_path / "b", 3, seed=9)
    root, entries = read_manifest(a)
    assert [e["id"] for e in entries] == [0, 1, 2]
    for e in entries:
        for key in ("image", "mask", "gt"):
            assert (root / e[key]).read_bytes() == (b.parent / e[key]).read_bytes()
    recs = load_dataset(tmp_path / "a")
    gt = json.loads((root / entries[0]["gt"]).read_text())
    np.testing.assert_allclose(recs[0].h, gt["h"])
    assert len(gt["h"]) == 63


def test_backgrounds_from_directory(tmp_path, rng):
    write_ppm(tmp_path / "bg.ppm", rng.uniform(size=(240, 260, 3)))
    bgs = load_backgrounds(tmp_path)
    crop = pick_background(rng, bgs)
    assert crop.shape == (224, 224, 3)
    with pytest.raises(FileNotFoundError):
        load_backgrounds(tmp_path / "missing")
