import csv

import numpy as np
import pytest

from handfit import refine
from handfit.estimator import Evidence2D
from handfit.losses import GridDescriptor
from handfit.params import SCALE, TRANS
from handfit.refine import RefineConfig, refine_objective, write_trace_csv
from handfit.synth import AugmentConfig, generate_record, procedural_background, sample_params

DESC = GridDescriptor()


@pytest.fixture(scope="module")
def rec(assets):
    rng = np.random.default_rng(21)
    return generate_record(sample_params(assets, AugmentConfig(), rng), assets, procedural_background(rng), rng)


def evidence(rec):
    return Evidence2D(DESC(rec.image, rec.mask), rec.j2d)


def test_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(iterations=-1)
    with pytest.raises(ValueError):
        RefineConfig(gamma=0.0)


def test_zero_iterations_identity(assets, rec):
    h0 = rec.h + 0.01
    res = refine.testing_refine(rec.image, evidence(rec), h0, RefineConfig(iterations=0), assets, DESC)
    np.testing.assert_array_equal(res.h, h0)
    assert len(res.trace) == 1


def test_joint_term_zero_at_ground_truth(assets, rec):
    terms = refine_objective(rec.h, rec.image, DESC(rec.image, rec.mask), rec.j2d, RefineConfig(), assets, DESC,
                             grad=False)
    assert terms["joint"] == pytest.approx(0.0, abs=1e-18)


def test_small_step_is_monotone(assets, rec):
    rng = np.random.default_rng(0)
    h0 = rec.h.copy()
    h0[:45] += rng.normal(0, 0.1, 45)
    res = refine.testing_refine(rec.image, evidence(rec), h0, RefineConfig(iterations=10, gamma=1e-4), assets, DESC)
    totals = [row[1] for row in res.trace]
    assert len(totals) == 11 and all(np.isfinite(totals))
    assert all(b <= a + 1e-12 for a, b in zip(totals, totals[1:]))


def test_joint_term_invariant_to_depth_scale(assets, rec):
    cfg = RefineConfig()
    base = refine_objective(rec.h, rec.image, DESC(rec.image, rec.mask), rec.j2d + 3.0, cfg, assets, DESC,
                            grad=False)["joint"]
    h = rec.h.copy()
    k = 1.2
    h[SCALE] *= k
    h[TRANS] *= k  # scaling the whole hand about the camera center keeps its projection
    moved = refine_objective(h, rec.image, DESC(rec.image, rec.mask), rec.j2d + 3.0, cfg, assets, DESC,
                             grad=False)["joint"]
    assert abs(moved - base) <= 1e-6 * base


def test_objective_gradient(assets, rec):
    cfg = RefineConfig(cutoff=10.0)
    rng = np.random.default_rng(1)
    h = rec.h.copy()
    h[:45] += rng.normal(0, 0.05, 45)
    feature = DESC(rec.image, rec.mask)
    _, g = refine_objective(h, rec.image, feature, rec.j2d, cfg, assets, DESC)
    eps = 1e-5
    num = np.zeros(63)
    for k in range(63):
        hp, hm = h.copy(), h.copy()
        hp[k] += eps
        hm[k] -= eps
        num[k] = (refine_objective(hp, rec.image, feature, rec.j2d, cfg, assets, DESC, grad=False)["total"]
                  - refine_objective(hm, rec.image, feature, rec.j2d, cfg, assets, DESC, grad=False)["total"]) / (2 * eps)
    assert np.linalg.norm(g - num) <= 1e-2 * np.linalg.norm(num)


def test_trace_csv(tmp_path, assets, rec):
    res = refine.testing_refine(rec.image, evidence(rec), rec.h, RefineConfig(iterations=2), assets, DESC)
    write_trace_csv(tmp_path / "t.csv", res.trace)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iteration", "total", "joint", "feature", "laplacian"]
    assert len(rows) == 4
