"""Mesh synthesis by linear blend skinning and skeleton regression.

``synthesize_mesh`` maps the 63-dim parameter vector to camera-space
vertices and, on request, the dense Jacobian of those vertices with respect
to all 63 parameters. The Jacobian is assembled in forward mode: pose and
shape derivatives are pushed down the kinematic tree alongside the global
joint transforms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .assets import topological_order
from .params import N_PARAMS, POSE, QUAT, SCALE, SHAPE, TRANS, check_params


def _skew(v):
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


_E_SKEW = _skew(np.eye(3))


def rodrigues(rotvec, jacobian=False):
    """Axis-angle (K, 3) to rotation matrices (K, 3, 3).

    Uses R = I + a K + b K^2 with a = sin(t)/t, b = (1 - cos(t))/t^2 and
    K the skew matrix of the rotation vector. With ``jacobian`` also returns
    dR (K, 3, 3, 3) where ``dR[k, i]`` is the derivative w.r.t. component i.
    """
    v = np.asarray(rotvec, dtype=np.float64).reshape(-1, 3)
    t2 = np.einsum("ki,ki->k", v, v)
    t = np.sqrt(t2)
    small = t < 1e-3
    safe_t = np.where(small, 1.0, t)
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(safe_t) / safe_t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(safe_t)) / safe_t**2)
    K = _skew(v)
    K2 = K @ K
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2
    if not jacobian:
        return R
    # (da/dt)/t and (db/dt)/t, series near zero
    da = np.where(small, -1 / 3 + t2 / 30,
                  (safe_t * np.cos(safe_t) - np.sin(safe_t)) / safe_t**3)
    db = np.where(small, -1 / 12 + t2 / 180,
                  (safe_t * np.sin(safe_t) - 2 * (1 - np.cos(safe_t))) / safe_t**4)
    dK2 = np.einsum("iab,kbc->kiac", _E_SKEW, K) + np.einsum("kab,ibc->kiac", K, _E_SKEW)
    dR = (
        (da * v.T).T[:, :, None, None] * K[:, None]
        + a[:, None, None, None] * _E_SKEW[None]
        + (db * v.T).T[:, :, None, None] * K2[:, None]
        + b[:, None, None, None] * dK2
    )
    return R, dR


def quat_to_rot(q, jacobian=False):
    """Rotation matrix of the normalized quaternion (w, x, y, z).

    With ``jacobian`` also returns dR (4, 3, 3) w.r.t. the raw, unnormalized
    components, so gradients remain valid when the optimizer drifts off the
    unit sphere.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    u = q / n
    w, x, y, z = u
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    if not jacobian:
        return R
    dRu = 2 * np.array([
        [[0, -z, y], [z, 0, -x], [-y, x, 0]],
        [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
    ])
    du_dq = (np.eye(4) - np.outer(u, u)) / n
    return R, np.einsum("ji,jab->iab", du_dq, dRu)


def rot_to_quat(R):
    """Unit quaternion (w >= 0) of a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@dataclass
class HandMesh:
    """Output of ``synthesize_mesh``.

    ``vertices`` are camera space; ``posed`` is the articulated mesh before
    the global similarity transform; ``rest`` is the shape-blended template.
    ``jac`` / ``posed_jac`` are d(vertices)/dh and d(posed)/dh, (778, 3, 63).
    """

    vertices: np.ndarray
    faces: np.ndarray
    posed: np.ndarray
    rest: np.ndarray
    jac: Optional[np.ndarray] = None
    posed_jac: Optional[np.ndarray] = None


def _tree(assets):
    return assets.cached("tree", lambda a: topological_order(a.kinematic_parents))


def _bones(h, assets, jacobian=False):
    """Rest mesh, per-bone global transforms and (optionally) their derivatives.

    Bone b maps a rest point x to GR[b] @ x + At[b]. Derivatives are forward
    mode over the 16 bones only, which is cheap; the per-vertex blend is
    handled separately in forward (``synthesize_mesh``) or reverse
    (``mesh_vjp``) mode.
    """
    h = check_params(h)
    pose, shape, quat = h[POSE], h[SHAPE], h[QUAT]
    if not h[SCALE] > 0:
        raise ValueError("camera scale must be positive")
    basis = assets.shape_basis
    rest = assets.template_vertices + np.tensordot(shape, basis, axes=1)
    J = assets.rest_joint_regressor @ rest
    parents = assets.kinematic_parents
    order = _tree(assets)
    nj = len(parents)
    b = {"h": h, "rest": rest}

    if jacobian:
        R_loc, dR_loc = rodrigues(pose.reshape(15, 3), jacobian=True)
    else:
        R_loc = rodrigues(pose.reshape(15, 3))
    GR = np.empty((nj, 3, 3))
    Gt = np.empty((nj, 3))
    GR[0] = np.eye(3)
    Gt[0] = J[0]
    for k in order[1:]:
        p = parents[k]
        GR[k] = GR[p] @ R_loc[k - 1]
        Gt[k] = Gt[p] + GR[p] @ (J[k] - J[p])
    b["GR"] = GR
    b["At"] = Gt - np.einsum("kab,kb->ka", GR, J)
    if not jacobian:
        b["Rq"] = quat_to_rot(quat)
        return b
    b["Rq"], b["dRq"] = quat_to_rot(quat, jacobian=True)

    # pose: 45 parameters, 3 per articulated joint
    dGR = np.zeros((45, nj, 3, 3))
    dGt = np.zeros((45, nj, 3))
    for k in order[1:]:
        p = parents[k]
        dGR[:, k] = dGR[:, p] @ R_loc[k - 1]
        cols = slice(3 * (k - 1), 3 * k)
        dGR[cols, k] += GR[p] @ dR_loc[k - 1]
        dGt[:, k] = dGt[:, p] + dGR[:, p] @ (J[k] - J[p])
    b["dGR"] = dGR
    b["dAt"] = dGt - np.einsum("pkab,kb->pka", dGR, J)

    # shape: blend shapes move the rest joints through the regressor
    dJ = np.einsum("jv,svc->sjc", assets.rest_joint_regressor, basis)
    dGt_s = np.zeros((len(shape), nj, 3))
    dGt_s[:, 0] = dJ[:, 0]
    for k in order[1:]:
        p = parents[k]
        dGt_s[:, k] = dGt_s[:, p] + (dJ[:, k] - dJ[:, p]) @ GR[p].T
    b["dAt_s"] = dGt_s - np.einsum("kab,skb->ska", GR, dJ)
    return b


def synthesize_mesh(h, assets, jacobian=False):
    """v = c_s * R(c_q) * LBS(template + shape blend, pose) + c_t."""
    b = _bones(h, assets, jacobian)
    h, rest, GR, At, Rq = b["h"], b["rest"], b["GR"], b["At"], b["Rq"]
    scale, trans = h[SCALE], h[TRANS]
    W = assets.skinning_weights
    M = np.tensordot(W, GR, axes=1)  # per-vertex blended linear part
    posed = (M @ rest[:, :, None])[..., 0] + W @ At
    verts = scale * posed @ Rq.T + trans
    out = HandMesh(verts, assets.faces, posed, rest)
    if not jacobian:
        return out

    nv, nj = len(rest), len(GR)
    basis = assets.shape_basis
    ns = len(basis)
    dposed = np.zeros((nv, 3, N_PARAMS))
    lin = (W @ b["dGR"].transpose(1, 0, 2, 3).reshape(nj, -1)).reshape(nv, 45, 3, 3)
    lin = (lin @ rest[:, None, :, None])[..., 0]
    lin += (W @ b["dAt"].transpose(1, 0, 2).reshape(nj, -1)).reshape(nv, 45, 3)
    dposed[:, :, POSE] = lin.transpose(0, 2, 1)
    dposed[:, :, SHAPE] = (
        M @ basis.transpose(1, 2, 0)
        + (W @ b["dAt_s"].transpose(1, 0, 2).reshape(nj, -1)).reshape(nv, ns, 3).transpose(0, 2, 1)
    )

    jac = scale * np.matmul(Rq, dposed)
    jac[:, :, QUAT] = scale * (posed @ b["dRq"].reshape(12, 3).T).reshape(nv, 4, 3).transpose(0, 2, 1)
    jac[:, :, SCALE] = posed @ Rq.T
    jac[:, :, TRANS] = np.eye(3)
    out.jac = jac
    out.posed_jac = dposed
    return out


def mesh_vjp(h, assets, grad_vertices=None, grad_posed=None, grad_rest=None):
    """Pull per-vertex gradients back to the 63 parameters.

    Accepts dL/d(camera-space vertices), dL/d(posed) and dL/d(rest), each
    (778, 3) or None, and returns dL/dh (63,). Equivalent to contracting the
    dense Jacobian of ``synthesize_mesh`` but several times cheaper.
    """
    b = _bones(h, assets, jacobian=True)
    h, rest, GR, At, Rq = b["h"], b["rest"], b["GR"], b["At"], b["Rq"]
    W = assets.skinning_weights
    nv, nj = len(rest), len(GR)
    zero = np.zeros((nv, 3))
    gv = zero if grad_vertices is None else np.asarray(grad_vertices, dtype=np.float64)
    gp = zero if grad_posed is None else np.asarray(grad_posed, dtype=np.float64)
    gr = zero if grad_rest is None else np.asarray(grad_rest, dtype=np.float64)

    M = np.tensordot(W, GR, axes=1)
    posed = (M @ rest[:, :, None])[..., 0] + W @ At
    out = np.zeros(N_PARAMS)
    scale = h[SCALE]
    out[TRANS] = gv.sum(axis=0)
    out[SCALE] = np.sum(gv * (posed @ Rq.T))
    out[QUAT] = scale * np.einsum("iab,ab->i", b["dRq"], gv.T @ posed)

    g = scale * gv @ Rq + gp
    E = (W.T @ (g[:, :, None] * rest[:, None, :]).reshape(nv, 9)).reshape(nj, 3, 3)
    A = W.T @ g
    out[POSE] = np.einsum("pbij,bij->p", b["dGR"], E) + np.einsum("pbi,bi->p", b["dAt"], A)
    grest = (g[:, None, :] @ M)[:, 0] + gr
    out[SHAPE] = np.einsum("svc,vc->s", assets.shape_basis, grest) + np.einsum("sbi,bi->s", b["dAt_s"], A)
    return out


def _keypoint_moments(assets):
    reg, W = assets.skeleton_regressor, assets.skinning_weights
    omega = np.einsum("avj,vb->ajb", reg, W)
    mu0 = np.einsum("avj,vb,vc->ajbc", reg, W, assets.template_vertices)
    muB = np.einsum("avj,vb,svc->sajbc", reg, W, assets.shape_basis)
    return omega, mu0, muB


def skeleton_from_params(h, assets, jacobian=False):
    """Keypoints of ``synthesize_mesh(h)`` without building the mesh.

    Skinning and the skeleton regressor are both linear in the rest vertices,
    so their composition collapses to per-keypoint bone moments. Returns the
    (21, 3) joints and, with ``jacobian``, d(joints)/dh (21, 3, 63).
    """
    omega, mu0, muB = assets.cached("keypoint_moments", _keypoint_moments)
    b = _bones(h, assets, jacobian)
    h, GR, At, Rq = b["h"], b["GR"], b["At"], b["Rq"]
    mu = mu0 + np.tensordot(h[SHAPE], muB, axes=1)
    na, nk, nj = omega.shape
    mu_r = mu.reshape(na * nk, nj * 3)  # rows (axis, keypoint), cols (bone, xyz)
    om_r = omega.reshape(na * nk, nj)
    P = (mu_r @ GR.transpose(0, 2, 1).reshape(nj * 3, 3) + om_r @ At).reshape(na, nk, 3)
    RP = np.einsum("ac,ajc->ja", Rq, P)
    joints = h[SCALE] * RP + h[TRANS]
    if not jacobian:
        return joints
    scale = h[SCALE]
    jac = np.zeros((nk, 3, N_PARAMS))

    def rotated(dP):  # (n, axis, keypoint, xyz) -> (keypoint, axis, n)
        return np.einsum("ac,najc->jan", Rq, dP)

    dGR = b["dGR"].transpose(0, 2, 1, 3).reshape(45, 3, nj * 3)
    dP = (dGR @ mu_r.T).transpose(0, 2, 1) + om_r @ b["dAt"]
    jac[:, :, POSE] = scale * rotated(dP.reshape(45, na, nk, 3))
    GRr = GR.transpose(0, 2, 1).reshape(nj * 3, 3)
    ns = muB.shape[0]
    dPs = muB.reshape(ns, na * nk, nj * 3) @ GRr + om_r @ b["dAt_s"]
    jac[:, :, SHAPE] = scale * rotated(dPs.reshape(ns, na, nk, 3))
    jac[:, :, QUAT] = scale * np.einsum("iac,ajc->jai", b["dRq"], P)
    jac[:, :, SCALE] = RP
    jac[:, :, TRANS] = np.eye(3)
    return joints, jac


def regress_skeleton(vertices, assets, jac=None):
    """21 keypoints from vertices via the per-axis regressor matrices.

    ``vertices`` may be a HandMesh or a (778, 3) array. If ``jac`` (778, 3, P)
    is given, also returns the keypoint Jacobian (21, 3, P).
    """
    if isinstance(vertices, HandMesh):
        v = vertices.vertices
    else:
        v = np.asarray(vertices, dtype=np.float64)
    if v.shape != assets.template_vertices.shape:
        raise ValueError(f"vertex array {v.shape} does not match asset topology")
    reg = assets.skeleton_regressor
    joints = np.einsum("vk,kvj->jk", v, reg)
    if jac is None:
        return joints
    return joints, np.einsum("vkp,kvj->jkp", jac, reg)
