import numpy as np
import pytest

from handfit.camera import project
from handfit.estimator import (INNER_ITERATIONS, Evidence2D, LinearRegressorWeights, TrainConfig, TrainingError,
                               encode_feature, encode_j2d, initial_params, load_weights, refine_2d, regress_step,
                               run_hme, sample_loss_and_grad, save_weights, train, warm_start_weights)
from handfit.heatmaps import decode_heatmaps, encode_heatmaps
from handfit.losses import GridDescriptor
from handfit.mesh import skeleton_from_params
from handfit.params import DEFAULT_DEPTH, N_PARAMS, camera_offset
from handfit.pipeline import sample_from_record
from handfit.synth import AugmentConfig, generate_record, procedural_background, sample_params

D = 16


def small_evidence(rng, d=D):
    return Evidence2D(rng.uniform(size=d), rng.uniform(20, 200, (21, 2)))


def random_weights(rng, d=D, scale=1e-3):
    w = LinearRegressorWeights.zeros(d)
    for a in w.arrays():
        a[...] = rng.normal(0, scale, a.shape)
    return w


def test_heatmap_center_and_round_trip(rng):
    hm = encode_heatmaps(np.full((1, 2), 115.5))  # center of cell (16, 16)
    assert hm.max() == pytest.approx(1.0, abs=1e-12)
    assert np.unravel_index(np.argmax(hm[0]), hm[0].shape) == (16, 16)
    j = rng.uniform(0, 224, (100, 2))
    assert np.max(np.abs(decode_heatmaps(encode_heatmaps(j)) - j)) <= 7.0
    two = encode_heatmaps(np.array([[50.0, 60.0], [50.0, 60.0]]))
    np.testing.assert_array_equal(two[0], two[1])


def test_heatmap_decode_tie_rules():
    hm = np.zeros((2, 32, 32))
    hm[0, 0, 0] = 1.0
    hm[1] = 0.5
    np.testing.assert_array_equal(decode_heatmaps(hm), [[3.5, 3.5], [3.5, 3.5]])


def test_initial_params(assets):
    h0 = initial_params(assets)
    np.testing.assert_array_equal(h0[:45], assets.mean_pose)
    np.testing.assert_array_equal(h0[45:55], 0.0)
    np.testing.assert_array_equal(initial_params(assets), h0)
    enc = h0 - camera_offset()
    np.testing.assert_array_equal(enc[45:], 0.0)


def test_evidence_validation(rng):
    with pytest.raises(ValueError):
        Evidence2D(np.zeros(4), np.full((21, 2), 400.0))
    with pytest.raises(ValueError):
        Evidence2D(np.array([np.nan]), np.zeros((21, 2)))


def test_regress_step_zero_identity_and_oracle(rng):
    z = small_evidence(rng)
    h = rng.normal(size=N_PARAMS)
    w = LinearRegressorWeights.zeros(D)
    np.testing.assert_array_equal(regress_step(z, h, w), 0.0)
    w.j3d_weights[D + 42:, :] = np.eye(N_PARAMS)
    np.testing.assert_allclose(regress_step(z, h, w), h - camera_offset(), atol=1e-12)
    w = random_weights(rng)
    a = np.concatenate([encode_feature(z.feature), z.j2d.ravel() / 224 - 0.5, h - camera_offset()])
    oracle = [sum(a[i] * w.j3d_weights[i, k] for i in range(len(a))) + w.j3d_bias[k] for k in range(N_PARAMS)]
    np.testing.assert_allclose(regress_step(z, h, w), oracle, atol=1e-12)


def test_refine_2d_zero_and_oracle(rng):
    z = small_evidence(rng)
    h, j3d = rng.normal(size=N_PARAMS), rng.normal(size=(21, 3))
    w = LinearRegressorWeights.zeros(D)
    np.testing.assert_array_equal(refine_2d(z.j2d, z.feature, h, j3d, w), 0.0)
    w = random_weights(rng)
    c = np.concatenate([encode_j2d(z.j2d), encode_feature(z.feature), h - camera_offset(), j3d.ravel()])
    np.testing.assert_allclose(refine_2d(z.j2d, z.feature, h, j3d, w).ravel(),
                               224 * (c @ w.ref_weights + w.ref_bias), atol=1e-9)


def test_weight_shapes_for_2048():
    w = LinearRegressorWeights.zeros(2048)
    assert w.ref_weights.shape[0] == 2216
    with pytest.raises(ValueError):
        LinearRegressorWeights(np.zeros((3, 63)), np.zeros(63), np.zeros((3, 42)), np.zeros(42))


def test_run_hme_zero_weights_is_fixed_point(assets, rng):
    z = small_evidence(rng)
    res = run_hme(z, LinearRegressorWeights.zeros(D), assets)
    np.testing.assert_array_equal(res.h, initial_params(assets))
    assert len(res.trajectory) == INNER_ITERATIONS + 1 == 4


def test_weights_file_round_trip(tmp_path, rng):
    w = random_weights(rng)
    save_weights(tmp_path / "w.hndw", w, seed=3, epochs=7)
    back, header = load_weights(tmp_path / "w.hndw")
    assert header["seed"] == 3 and header["epochs"] == 7 and header["D"] == D
    for a, b in zip(back.arrays(), w.arrays()):
        np.testing.assert_array_equal(a, b.astype("<f4"))
    save_weights(tmp_path / "v.hndw", back)
    assert (tmp_path / "v.hndw").read_bytes()[-100:] == (tmp_path / "w.hndw").read_bytes()[-100:]
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_weights(tmp_path / "bad")


@pytest.fixture(scope="module")
def few_samples(assets):
    desc = GridDescriptor()
    out = []
    for child in np.random.SeedSequence(5).spawn(3):
        rng = np.random.default_rng(child)
        rec = generate_record(sample_params(assets, AugmentConfig(), rng), assets, procedural_background(rng), rng)
        out.append(sample_from_record(rec, desc))
    return out


def test_weight_gradient_matches_finite_differences(assets, few_samples):
    rng = np.random.default_rng(0)
    cfg = TrainConfig()
    w = warm_start_weights(few_samples, assets, cfg)
    for a in w.arrays():
        a += rng.normal(0, 1e-4, a.shape)
    sample = few_samples[0]
    sg = sample_loss_and_grad(w, sample, assets, cfg)
    eps = 1e-6
    for _ in range(20):
        k = int(rng.integers(4))
        idx = tuple(rng.integers(0, n) for n in w.arrays()[k].shape)
        wp, wm = w.copy(), w.copy()
        wp.arrays()[k][idx] += eps
        wm.arrays()[k][idx] -= eps
        num = (sample_loss_and_grad(wp, sample, assets, cfg, need_grad=False).loss
               - sample_loss_and_grad(wm, sample, assets, cfg, need_grad=False).loss) / (2 * eps)
        ana = sg.grads[k][idx]
        assert abs(ana - num) <= 1e-2 * max(1.0, abs(num)), (k, idx, ana, num)


def test_warm_start_reproduces_least_squares(assets, few_samples):
    cfg = TrainConfig(ridge=1e-12)
    w = warm_start_weights(few_samples[:1], assets, cfg)
    z = few_samples[0].evidence
    h = run_hme(z, w, assets).h
    assert np.all(np.isfinite(h))
    assert warm_start_weights([], assets, cfg) is None


def test_train_single_sample_reduces_loss(assets, few_samples):
    cfg = TrainConfig(epochs=6, batch_size=1, warm_start=False)
    res = train(few_samples[:1], cfg, assets)
    assert all(np.isfinite(res.loss_trace))
    assert res.loss_trace[-1] < res.loss_trace[0]


def test_train_deterministic(assets, few_samples, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, seed=4)
    a = train(few_samples, cfg, assets)
    b = train(few_samples, cfg, assets)
    save_weights(tmp_path / "a", a.weights)
    save_weights(tmp_path / "b", b.weights)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert a.loss_trace == b.loss_trace


def test_train_rejects_empty_and_diverging(assets, few_samples):
    with pytest.raises(ValueError):
        train([], TrainConfig(), assets)
    w = LinearRegressorWeights.zeros(few_samples[0].evidence.feature.shape[0])
    w.j3d_bias[59] = -1.0  # drives the scale negative on the first step
    with pytest.raises(TrainingError, match="epoch 0"):
        train(few_samples, TrainConfig(epochs=1, warm_start=False), assets, init=w)


def test_trained_weights_beat_initial_estimate(assets, few_samples):
    w = warm_start_weights(few_samples, assets, TrainConfig())
    s = few_samples[0]
    j0 = skeleton_from_params(initial_params(assets), assets)
    j1 = skeleton_from_params(run_hme(s.evidence, w, assets).h, assets)
    gt = s.target.j3d
    assert np.mean(np.linalg.norm(j1 - gt, axis=1)) < np.mean(np.linalg.norm(j0 - gt, axis=1))
    assert np.allclose(project(gt), s.target.j2d)
    assert DEFAULT_DEPTH == 2.5
