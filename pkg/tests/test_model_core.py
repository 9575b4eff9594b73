import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handfit.assets import AssetError, load_model_assets, make_assets, save_model_assets
from handfit.mesh import quat_to_rot, regress_skeleton, skeleton_from_params, synthesize_mesh
from handfit.params import N_PARAMS, POSE, QUAT, SCALE, SHAPE, TRANS, identity_camera_params
from handfit.synth import euler_zyx_quat
from handfit.toy import gen_toy_model, toy_anatomical_keypoints

TOY = gen_toy_model(0)


def raw_arrays(assets):
    names = ("template_vertices", "faces", "shape_basis", "skinning_weights", "rest_joint_regressor",
             "kinematic_parents", "skeleton_regressor", "mean_pose")
    return {n: np.array(getattr(assets, n)) for n in names}


def test_toy_model_dimensions(assets):
    assert assets.n_vertices == 778
    assert assets.n_faces == 1538
    assert assets.mean_pose.shape == (45,)


def test_toy_model_deterministic_per_seed(assets):
    assert gen_toy_model(0).equals(assets)
    assert not np.array_equal(gen_toy_model(1).template_vertices, assets.template_vertices)


def test_asset_round_trip_bit_identical(assets, tmp_path):
    path = save_model_assets(assets, tmp_path / "toy.hnda")
    back = load_model_assets(path)
    assert back.equals(assets)
    np.testing.assert_allclose(back.skinning_weights.sum(axis=1), 1.0, atol=1e-6)


def test_asset_dimension_mismatch_rejected(assets):
    arrays = raw_arrays(assets)
    arrays["template_vertices"] = arrays["template_vertices"][:777]
    with pytest.raises(AssetError):
        make_assets(**arrays)


def test_asset_unnormalized_skinning_rejected(assets):
    arrays = raw_arrays(assets)
    arrays["skinning_weights"] = arrays["skinning_weights"] * 1.5
    with pytest.raises(AssetError):
        make_assets(**arrays)


def test_asset_cyclic_tree_rejected(assets):
    arrays = raw_arrays(assets)
    parents = arrays["kinematic_parents"].copy()
    parents[1], parents[2] = 2, 1
    arrays["kinematic_parents"] = parents
    with pytest.raises(AssetError):
        make_assets(**arrays)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model_assets(tmp_path / "nope.hnda")


def test_lbs_identity_reproduces_template(assets):
    mesh = synthesize_mesh(identity_camera_params(), assets)
    np.testing.assert_array_equal(mesh.vertices, assets.template_vertices)


def test_shape_basis_is_added_elementwise(assets):
    s = np.zeros(10)
    s[0] = 1.0
    mesh = synthesize_mesh(identity_camera_params(shape=s), assets)
    np.testing.assert_allclose(mesh.vertices, assets.template_vertices + assets.shape_basis[0], atol=1e-12)


def test_translation_equivariance(assets, rng):
    h = identity_camera_params(pose=assets.mean_pose + rng.normal(0, 0.2, 45))
    h2 = h.copy()
    h2[TRANS] = (0.0, 0.0, 2.5)
    d = synthesize_mesh(h2, assets).vertices - synthesize_mesh(h, assets).vertices
    np.testing.assert_allclose(d, np.tile([0.0, 0.0, 2.5], (778, 1)), atol=1e-12)


def test_template_skeleton_matches_anatomical_keypoints(assets):
    mesh = synthesize_mesh(identity_camera_params(), assets)
    np.testing.assert_allclose(regress_skeleton(mesh, assets), toy_anatomical_keypoints(0), atol=1e-6)


def test_regress_skeleton_affine(assets):
    mesh = synthesize_mesh(identity_camera_params(pose=assets.mean_pose), assets)
    j = regress_skeleton(mesh.vertices, assets)
    t = np.array([0.3, -0.2, 1.1])
    np.testing.assert_allclose(regress_skeleton(mesh.vertices + t, assets), j + t, atol=1e-12)
    np.testing.assert_allclose(regress_skeleton(2 * mesh.vertices, assets), 2 * j, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.tuples(*[st.floats(0, 2 * np.pi)] * 3), st.tuples(*[st.floats(-1, 1)] * 3),
       st.floats(0.5, 2.0))
def test_rigid_equivariance(angles, trans, scale):
    assets = TOY
    base = identity_camera_params(pose=assets.mean_pose)
    j0 = skeleton_from_params(base, assets)
    h = base.copy()
    h[QUAT] = euler_zyx_quat(*angles)
    h[SCALE] = scale
    h[TRANS] = trans
    expected = scale * j0 @ quat_to_rot(h[QUAT]).T + np.asarray(trans)
    got = skeleton_from_params(h, assets)
    assert np.max(np.abs(got - expected)) <= 1e-9 * max(1.0, np.max(np.abs(expected)))


def test_vertex_jacobian_matches_finite_differences(assets, rng):
    h = identity_camera_params(pose=assets.mean_pose + rng.normal(0, 0.2, 45), shape=rng.normal(0, 1, 10))
    q = rng.normal(size=4)
    h[QUAT] = q / np.linalg.norm(q)
    h[SCALE] = 1.1
    h[TRANS] = (0.1, -0.1, 2.5)
    mesh = synthesize_mesh(h, assets, jacobian=True)
    idx = rng.choice(778, 20, replace=False)
    eps = 1e-5
    for k in range(N_PARAMS):
        hp, hm = h.copy(), h.copy()
        hp[k] += eps
        hm[k] -= eps
        num = (synthesize_mesh(hp, assets).vertices[idx] - synthesize_mesh(hm, assets).vertices[idx]) / (2 * eps)
        ana = mesh.jac[idx, :, k]
        assert np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(ana))) <= 1e-4, k


def test_skeleton_jacobian_matches_finite_differences(assets, rng):
    h = identity_camera_params(pose=assets.mean_pose + rng.normal(0, 0.2, 45), shape=rng.normal(0, 1, 10))
    h[TRANS] = (0.0, 0.0, 2.5)
    j, J = skeleton_from_params(h, assets, jacobian=True)
    eps = 1e-6
    for k in (0, 7, 44, 45, 54, 55, 58, 59, 62):
        hp, hm = h.copy(), h.copy()
        hp[k] += eps
        hm[k] -= eps
        num = (skeleton_from_params(hp, assets) - skeleton_from_params(hm, assets)) / (2 * eps)
        np.testing.assert_allclose(J[..., k], num, atol=1e-6)


def test_non_finite_params_rejected(assets):
    h = identity_camera_params()
    h[POSE.start] = np.nan
    with pytest.raises(ValueError):
        synthesize_mesh(h, assets)
    with pytest.raises(ValueError):
        synthesize_mesh(np.zeros(62), assets)


def test_shape_block_layout():
    assert (SHAPE.start, SHAPE.stop, QUAT.start, SCALE, TRANS.start) == (45, 55, 55, 59, 60)
