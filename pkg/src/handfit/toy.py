"""Procedural stand-in for a licensed hand model.

The toy hand is a single genus-0 surface with a 16-edge opening at the
wrist: a palm tube capped at the knuckles, four finger tubes rising from
slots in the cap and a thumb rising from the palm's side wall. The coarse
mesh is refined by longest-edge splitting until it has exactly 778
vertices; for that topology Euler's formula fixes the face count at
2 * 778 - 18 = 1538.

Keypoint order: wrist, then MCP, PIP, DIP, tip for thumb, index, middle,
ring and pinky. Kinematic joints: wrist, then MCP, PIP, DIP for the same
five fingers.
"""
from __future__ import annotations

import numpy as np

from .assets import N_FACES, N_VERTS, make_assets

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
KINEMATIC_PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14])
ROOT_KEYPOINT = 9  # middle-finger MCP

_PALM_RINGS = 8
_PALM_COLS = 8
_THUMB_RING = 2
# top-cap slot (between columns k and k+1) used by each non-thumb finger
_SLOTS = {"index": 6, "middle": 4, "ring": 2, "pinky": 0}
# (proximal, middle, distal) lengths and base radius, before jitter
_FINGER_DIMS = {
    "thumb": ((0.20, 0.15, 0.13), 0.040),
    "index": ((0.23, 0.14, 0.11), 0.034),
    "middle": ((0.25, 0.16, 0.12), 0.035),
    "ring": ((0.24, 0.15, 0.11), 0.033),
    "pinky": ((0.19, 0.11, 0.10), 0.029),
}
_SPLAY = {"index": 0.08, "middle": 0.02, "ring": -0.04, "pinky": -0.10}
# axial ring positions as fractions of each phalanx; the last entry of the
# first two lists sits exactly on the PIP / DIP joint
_RING_FRACTIONS = ((0.18, 0.45, 0.72, 1.0), (0.33, 0.67, 1.0), (0.4, 0.75))
_PIP_RING, _DIP_RING = 3, 6


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


class _Builder:
    def __init__(self):
        self.verts = []
        self.faces = []

    def add(self, p):
        self.verts.append(np.asarray(p, dtype=np.float64))
        return len(self.verts) - 1

    def quad(self, a, b, c, d):
        self.faces.append((a, b, c))
        self.faces.append((a, c, d))

    def tri(self, a, b, c):
        self.faces.append((a, b, c))


def _build_coarse(rng):
    jit = lambda scale: 1.0 + scale * rng.standard_normal()  # noqa: E731
    half_w_top = 0.21 * jit(0.03)
    half_w_wrist = 0.17 * jit(0.03)
    half_t = 0.06 * jit(0.03)
    palm_len = 0.45 * jit(0.03)

    b = _Builder()
    ring_y = np.linspace(palm_len, 0.0, _PALM_RINGS)
    rings = []
    for r, y in enumerate(ring_y):
        hw = half_w_wrist + (half_w_top - half_w_wrist) * r / (_PALM_RINGS - 1)
        xs = hw * np.linspace(-1.0, 1.0, _PALM_COLS)
        front = [b.add((x, y, -half_t)) for x in xs]
        back = [b.add((x, y, half_t)) for x in xs]
        rings.append(front + back[::-1])  # F0..F7, B7..B0
    n_ring = 2 * _PALM_COLS

    thumb_edge = _PALM_COLS - 1  # ring edge F7 -> B7 on the +x side
    for r in range(_PALM_RINGS - 1):
        lo, hi = rings[r], rings[r + 1]
        for i in range(n_ring):
            j = (i + 1) % n_ring
            if r == _THUMB_RING and i == thumb_edge:
                continue
            b.quad(lo[i], lo[j], hi[j], hi[i])

    top = rings[-1]
    finger_slots = {}
    for k in range(_PALM_COLS - 1):
        quad = (top[k], top[k + 1], top[n_ring - 2 - k], top[n_ring - 1 - k])
        owner = [f for f, s in _SLOTS.items() if s == k]
        if owner:
            finger_slots[owner[0]] = quad
        else:
            b.quad(quad[0], quad[3], quad[2], quad[1])
    lo, hi = rings[_THUMB_RING], rings[_THUMB_RING + 1]
    finger_slots["thumb"] = (lo[thumb_edge], hi[thumb_edge], hi[thumb_edge + 1], lo[thumb_edge + 1])

    parts = {"palm": list(range(len(b.verts))), "wrist_ring": rings[0]}
    fingers = {}
    for name in FINGERS:
        (l1, l2, l3), radius = _FINGER_DIMS[name]
        lengths = np.array([l1, l2, l3]) * jit(0.04)
        radius *= jit(0.04)
        if name == "thumb":
            axis = _unit((1.0, -0.8, -0.45))
        else:
            splay = _SPLAY[name]
            axis = np.array([np.sin(splay), -np.cos(splay), 0.0])
        fingers[name] = _add_finger(b, finger_slots[name], axis, lengths, radius)
    parts["fingers"] = fingers
    return np.array(b.verts), np.array(b.faces, dtype=np.int64), parts


def _add_finger(b, base, axis, lengths, radius):
    base = list(base)
    base_pts = np.array([b.verts[i] for i in base])
    center = base_pts.mean(axis=0)
    e1 = np.cross(axis, (0.0, 0.0, 1.0))
    if np.linalg.norm(e1) < 1e-6:
        e1 = np.cross(axis, (1.0, 0.0, 0.0))
    e1 = _unit(e1)
    e2 = np.cross(axis, e1)
    rel = base_pts - center
    px, py = rel @ e1, rel @ e2
    area = 0.5 * np.sum(px * np.roll(py, -1) - np.roll(px, -1) * py)
    turn = np.sign(area)
    start = np.arctan2(py[0], px[0])
    angles = start + turn * np.pi / 4 * np.arange(8)

    total = lengths.sum()
    joints_d = np.array([0.0, lengths[0], lengths[0] + lengths[1]])
    ds = []
    for seg, fracs in enumerate(_RING_FRACTIONS):
        ds.extend(joints_d[seg] + np.array(fracs) * lengths[seg])
    ring_ids = []
    for n, d in enumerate(ds):
        r = radius * (1.0 - 0.25 * d / total)
        if n == len(ds) - 1:
            r *= 0.75
        c = center + d * axis
        ring_ids.append([b.add(c + r * (np.cos(t) * e1 + np.sin(t) * e2)) for t in angles])
    apex = b.add(center + total * axis)

    u = ring_ids[0]
    for i in range(4):
        j = (i + 1) % 4
        b.tri(base[i], base[j], u[2 * i + 1])
        b.tri(base[i], u[2 * i + 1], u[2 * i])
        b.tri(base[j], u[(2 * i + 2) % 8], u[2 * i + 1])
    for lo, hi in zip(ring_ids[:-1], ring_ids[1:]):
        for i in range(8):
            j = (i + 1) % 8
            b.quad(lo[i], lo[j], hi[j], hi[i])
    last = ring_ids[-1]
    for i in range(8):
        b.tri(last[i], last[(i + 1) % 8], apex)

    return {
        "base": base, "rings": ring_ids, "apex": apex, "center": center,
        "axis": axis, "lateral": e1, "lengths": lengths, "joints_d": joints_d,
        "pip": ring_ids[_PIP_RING], "dip": ring_ids[_DIP_RING],
    }


def _vertex_attributes(verts, parts):
    """Skinning weights and shape basis for the coarse mesh."""
    n = len(verts)
    weights = np.zeros((n, 16))
    weights[:, 0] = 1.0
    basis = np.zeros((10, n, 3))

    palm = np.zeros(n, dtype=bool)
    palm[parts["palm"]] = True
    top_y = 0.0
    palm_len = verts[parts["wrist_ring"][0], 1]
    half_w = np.abs(verts[palm, 0]).max()

    basis[0] = 0.04 * verts                                     # overall size
    basis[3, palm, 0] = 0.05 * verts[palm, 0]                    # palm width
    basis[4, palm, 1] = 0.05 * (verts[palm, 1] - top_y)          # palm length
    basis[7, :, 2] = 0.10 * verts[:, 2]                          # thickness
    basis[9, :, 0] = 0.02 * np.cos(np.pi * verts[:, 1] / palm_len) * np.sign(verts[:, 0])

    for fi, name in enumerate(FINGERS):
        f = parts["fingers"][name]
        ids = np.array(sorted({i for ring in f["rings"] for i in ring} | {f["apex"]}))
        rel = verts[ids] - f["center"]
        d = rel @ f["axis"]
        radial = rel - d[:, None] * f["axis"]
        chain = [0, 1 + 3 * fi, 2 + 3 * fi, 3 + 3 * fi]
        blend = 0.3 * f["lengths"].min()
        s = [_smoothstep((d - dj + blend) / (2 * blend)) for dj in f["joints_d"]]
        w = np.stack([1 - s[0], s[0] - s[1], s[1] - s[2], s[2]], axis=1)
        weights[ids] = 0.0
        weights[np.ix_(ids, chain)] = w
        base = f["base"]
        weights[base] = 0.0
        weights[base, 0] = 0.5
        weights[base, chain[1]] = 0.5

        basis[1, ids] = 0.05 * d[:, None] * f["axis"]           # finger length
        basis[2, ids] = 0.10 * radial                            # finger girth
        lateral_pos = f["center"][0] / half_w
        if name == "thumb":
            basis[5, ids] = 0.06 * d[:, None] * f["axis"]        # thumb length
        else:
            basis[6, ids] = 0.04 * lateral_pos * d[:, None] * f["axis"]
            basis[8, ids] = 0.05 * lateral_pos * d[:, None] * f["lateral"]
            basis[3, ids, 0] = 0.05 * f["center"][0]
        if name == "thumb":
            basis[3, ids, 0] = 0.05 * f["center"][0]
            basis[4, ids, 1] = 0.05 * (f["center"][1] - top_y)
    return weights, basis


def _split_longest_edges(verts, faces, attrs, target):
    """Split interior edges (longest first) until there are ``target`` vertices.

    New vertices sit at edge midpoints and average the endpoint attributes,
    so geometry is unchanged and partition-of-unity weights stay normalized.
    Boundary edges are never split, which keeps the wrist opening intact.
    """
    verts = [v for v in verts]
    faces = [list(f) for f in faces]
    attrs = {k: [a for a in v] for k, v in attrs.items()}
    while len(verts) < target:
        edge_faces = {}
        for fi, f in enumerate(faces):
            for k in range(3):
                a, b = f[k], f[(k + 1) % 3]
                edge_faces.setdefault((min(a, b), max(a, b)), []).append(fi)
        interior = [e for e, fs in edge_faces.items() if len(fs) == 2]
        interior.sort()
        v = np.array(verts)
        lengths = np.array([np.linalg.norm(v[a] - v[b]) for a, b in interior])
        # a handful of splits per sweep; each sweep re-derives adjacency
        budget = min(target - len(verts), 16)
        touched = set()
        for idx in np.argsort(-lengths, kind="stable"):
            if budget == 0:
                break
            a, b = interior[idx]
            fs = edge_faces[(a, b)]
            if any(fi in touched for fi in fs):
                continue
            m = len(verts)
            verts.append(0.5 * (verts[a] + verts[b]))
            for k in attrs:
                attrs[k].append(0.5 * (attrs[k][a] + attrs[k][b]))
            for fi in fs:
                f = faces[fi]
                i = f.index(a)
                if f[(i + 1) % 3] == b:
                    c = f[(i + 2) % 3]
                    faces[fi] = [a, m, c]
                    faces.append([m, b, c])
                else:
                    c = f[(i + 1) % 3]
                    faces[fi] = [a, c, m]
                    faces.append([m, c, b])
                touched.add(fi)
                touched.add(len(faces) - 1)
            budget -= 1
    return np.array(verts), np.array(faces, dtype=np.int64), {k: np.array(v) for k, v in attrs.items()}


def _regressors(parts, n):
    def mean_row(ids):
        row = np.zeros(n)
        row[list(ids)] = 1.0 / len(ids)
        return row

    fingers = parts["fingers"]
    rest = [mean_row(parts["wrist_ring"])]
    keypoints = [mean_row(parts["wrist_ring"])]
    for name in FINGERS:
        f = fingers[name]
        rest += [mean_row(f["base"]), mean_row(f["pip"]), mean_row(f["dip"])]
        keypoints += [mean_row(f["base"]), mean_row(f["pip"]), mean_row(f["dip"]), mean_row([f["apex"]])]
    rest = np.array(rest)
    skel = np.array(keypoints).T  # 778 x 21
    return rest, np.stack([skel, skel, skel])


def _mean_pose(parts):
    pose = np.zeros((15, 3))
    flex = {"thumb": (0.15, 0.2, 0.15)}
    for fi, name in enumerate(FINGERS):
        angles = flex.get(name, (0.25, 0.35, 0.2))
        axis = parts["fingers"][name]["lateral"]
        for k in range(3):
            pose[3 * fi + k] = angles[k] * axis
    return pose.reshape(-1)


def _anatomical_keypoints(parts, verts):
    """Keypoints from construction geometry (ring centers, apexes)."""
    out = [verts[parts["wrist_ring"]].mean(axis=0)]
    for name in FINGERS:
        f = parts["fingers"][name]
        d = f["joints_d"]
        out += [f["center"], f["center"] + d[1] * f["axis"], f["center"] + d[2] * f["axis"],
                f["center"] + f["lengths"].sum() * f["axis"]]
    return np.array(out)


def _build(seed):
    rng = np.random.default_rng(seed)
    verts, faces, parts = _build_coarse(rng)
    weights, basis = _vertex_attributes(verts, parts)
    n0 = len(verts)
    verts, faces, attrs = _split_longest_edges(
        verts, faces, {"w": weights, "basis": np.moveaxis(basis, 1, 0)}, N_VERTS)
    assert len(faces) == N_FACES, len(faces)
    anat = _anatomical_keypoints(parts, verts)
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    center[2] = 0.0
    verts = verts - center
    anat = anat - center
    rest_reg, skel_reg = _regressors(parts, N_VERTS)
    arrays = dict(
        template_vertices=verts,
        faces=faces,
        shape_basis=np.moveaxis(attrs["basis"], 0, 1),
        skinning_weights=attrs["w"],
        rest_joint_regressor=rest_reg,
        kinematic_parents=KINEMATIC_PARENTS,
        skeleton_regressor=skel_reg,
        mean_pose=_mean_pose(parts),
    )
    # dyadic weights: rows sum to exactly 1 in both float32 and float64
    w = np.round(attrs["w"] * 2.0**20) / 2.0**20
    top = np.argmax(w, axis=1)
    w[np.arange(len(w)), top] = 0.0
    w[np.arange(len(w)), top] = 1.0 - w.sum(axis=1)
    arrays["skinning_weights"] = w
    # round through float32 so a save/load cycle is bit-identical
    for k in ("template_vertices", "shape_basis", "skinning_weights",
              "rest_joint_regressor", "skeleton_regressor", "mean_pose"):
        arrays[k] = np.asarray(arrays[k], dtype=np.float32).astype(np.float64)
    return arrays, anat, n0


def gen_toy_model(rng_seed=0):
    """Deterministic toy hand assets for ``rng_seed``."""
    arrays, _, _ = _build(rng_seed)
    return make_assets(**arrays)


def toy_anatomical_keypoints(rng_seed=0):
    """The 21 keypoints implied by the toy construction, independent of the regressor."""
    _, anat, _ = _build(rng_seed)
    return anat
