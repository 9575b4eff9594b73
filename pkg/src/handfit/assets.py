"""Hand model assets and the ``HNDA1`` container format.

File layout::

    b"HNDA1\\n"
    <one line of JSON header>\\n
    <payload: little-endian float32 arrays, row-major>

The header lists every array with its ``shape`` and byte ``offset`` relative
to the first payload byte. Integer fields (faces, kinematic parents) are
stored as float32, which represents them exactly. An optional
``pose_blendshapes`` array (135 x 778 x 3) may be present for converted MANO
data; it is carried along but not used by the skinning code.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"HNDA1"
N_VERTS = 778
N_FACES = 1538
N_JOINTS = 16
N_KEYPOINTS = 21
N_SHAPE = 10

# Field order on disk; matches the dataclass below.
FIELDS = (
    ("template_vertices", (N_VERTS, 3)),
    ("faces", (N_FACES, 3)),
    ("shape_basis", (N_SHAPE, N_VERTS, 3)),
    ("skinning_weights", (N_VERTS, N_JOINTS)),
    ("rest_joint_regressor", (N_JOINTS, N_VERTS)),
    ("kinematic_parents", (N_JOINTS,)),
    ("skeleton_regressor", (3, N_VERTS, N_KEYPOINTS)),
    ("mean_pose", (45,)),
)
OPTIONAL_FIELDS = (("pose_blendshapes", (135, N_VERTS, 3)),)


class AssetError(ValueError):
    """Raised when asset data violates the format or its invariants."""


@dataclass(frozen=True, eq=False)
class HandModelAssets:
    template_vertices: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    skinning_weights: np.ndarray
    rest_joint_regressor: np.ndarray
    kinematic_parents: np.ndarray
    skeleton_regressor: np.ndarray
    mean_pose: np.ndarray
    pose_blendshapes: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        validate_assets(self)
        for name, _ in FIELDS + OPTIONAL_FIELDS:
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def cached(self, key, build):
        """Memoize derived, read-only data (adjacency, traversal order)."""
        if key not in self._cache:
            self._cache[key] = build(self)
        return self._cache[key]

    def equals(self, other):
        """Bitwise equality of every stored array."""
        for name, _ in FIELDS + OPTIONAL_FIELDS:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return True


def _coerce(name, arr):
    if name in ("faces", "kinematic_parents"):
        return np.asarray(arr, dtype=np.int64)
    return np.asarray(arr, dtype=np.float64)


def make_assets(**arrays):
    """Build assets from raw arrays, casting dtypes and validating."""
    kwargs = {}
    for name, _ in FIELDS + OPTIONAL_FIELDS:
        arr = arrays.get(name)
        kwargs[name] = None if arr is None else _coerce(name, arr)
    return HandModelAssets(**kwargs)


def topological_order(parents):
    """Return joint indices ordered so that every parent precedes its children.

    Raises AssetError if the tree is cyclic or not rooted at joint 0.
    """
    parents = np.asarray(parents)
    n = len(parents)
    roots = [k for k in range(n) if parents[k] < 0]
    if roots != [0]:
        raise AssetError(f"kinematic tree must have the wrist (joint 0) as its only root, got {roots}")
    children = [[] for _ in range(n)]
    for k in range(1, n):
        p = int(parents[k])
        if not 0 <= p < n:
            raise AssetError(f"joint {k} has out-of-range parent {p}")
        children[p].append(k)
    order, stack = [], [0]
    while stack:
        k = stack.pop()
        order.append(k)
        stack.extend(reversed(children[k]))
    if len(order) != n:
        raise AssetError("kinematic tree is cyclic or disconnected")
    return np.array(order)


def validate_assets(a):
    for name, shape in FIELDS:
        arr = getattr(a, name)
        if arr is None:
            raise AssetError(f"missing field {name}")
        if arr.shape != shape:
            raise AssetError(f"dimension mismatch for {name}: expected {shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise AssetError(f"non-finite values in {name}")
    if a.pose_blendshapes is not None and a.pose_blendshapes.shape != OPTIONAL_FIELDS[0][1]:
        raise AssetError(f"dimension mismatch for pose_blendshapes: {a.pose_blendshapes.shape}")

    faces = a.faces
    if faces.min() < 0 or faces.max() >= N_VERTS:
        raise AssetError("face indices out of range")
    w = a.skinning_weights
    if w.min() < 0:
        raise AssetError("negative skinning weights")
    row_err = np.abs(w.sum(axis=1) - 1.0).max()
    if row_err > 1e-6:
        raise AssetError(f"skinning weight rows not normalized (max error {row_err:.3g})")
    topological_order(a.kinematic_parents)
    reg = a.skeleton_regressor
    if reg.min() < 0:
        raise AssetError("skeleton regressor has negative entries")
    col_err = np.abs(reg.sum(axis=1) - 1.0).max()
    if col_err > 1e-6:
        raise AssetError(f"skeleton regressor columns do not sum to 1 (max error {col_err:.3g})")
    jr = a.rest_joint_regressor
    if np.abs(jr.sum(axis=1) - 1.0).max() > 1e-6:
        raise AssetError("rest joint regressor rows do not sum to 1")


def save_model_assets(assets, path):
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, _ in FIELDS + OPTIONAL_FIELDS:
        arr = getattr(assets, name)
        if arr is None:
            continue
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format": "HNDA1",
        "dtype": "<f4",
        "n_vertices": int(assets.n_vertices),
        "n_faces": int(assets.n_faces),
        "n_joints": N_JOINTS,
        "n_keypoints": N_KEYPOINTS,
        "n_shape": N_SHAPE,
        "arrays": entries,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(json.dumps(header, separators=(",", ":")).encode("ascii") + b"\n")
        for chunk in chunks:
            fh.write(chunk)
    return path


def load_model_assets(path):
    """Read an ``HNDA1`` file and verify every asset invariant."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"asset file not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC + b"\n"):
        raise AssetError(f"{path}: missing HNDA1 magic")
    nl = raw.index(b"\n", len(MAGIC) + 1)
    try:
        header = json.loads(raw[len(MAGIC) + 1:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise AssetError(f"{path}: malformed header") from exc
    payload = memoryview(raw)[nl + 1:]
    arrays = {}
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = int(entry["offset"])
        if start + 4 * count > len(payload):
            raise AssetError(f"{path}: array {entry['name']} runs past end of file")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    for name, _ in FIELDS:
        if name not in arrays:
            raise AssetError(f"{path}: missing array {name}")
    return make_assets(**arrays)
