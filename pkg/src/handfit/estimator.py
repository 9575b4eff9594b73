"""Iterative mesh-offset regression, 2D pose refinement and their training.

Two single-layer linear maps do all the learning:

* ``regress_step``: dh = W1^T [f; u; enc(h)] + b1
* ``refine_2d``:   j2d' = S * (W2^T [u; f; enc(h); j3d] + b2)

with S the image size, f the descriptor divided by the square root of its
length, u = j2d / S - 0.5 the keypoints centered on the principal point and
enc(h) = h - camera_offset(), so the initial estimate enters as zeros
everywhere except the pose block. ``run_hme`` alternates the
two for three iterations. ``train`` fits both maps with Adam,
back-propagating analytically through all iterations, optionally starting
from a closed-form ridge fit of parameters on keypoints.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .camera import ImagePlane
from .losses import LossWeights, Target, loss_total
from .mesh import regress_skeleton, skeleton_from_params, synthesize_mesh
from .params import DEFAULT_DEPTH, N_PARAMS, camera_offset, pack_params

log = logging.getLogger(__name__)

N_J2D = 42
INNER_ITERATIONS = 3
WEIGHTS_MAGIC = b"HNDW1"

# The silhouette term is a sum over 50176 pixels; at unit weight its gradient
# is about 1e4 times that of the skeleton term and swamps Adam's moment
# estimates the first time an instance switches it on.
TRAIN_LOSS_WEIGHTS = LossWeights(sh=1e-3)


class EstimationError(RuntimeError):
    """Raised when an iteration produces an unusable intermediate."""


class TrainingError(RuntimeError):
    """Raised when the training loss diverges."""


@dataclass
class Evidence2D:
    """Per-image evidence: descriptor vector, 21 keypoints (pixels), heatmaps."""

    feature: np.ndarray
    j2d: np.ndarray
    heatmaps: Optional[np.ndarray] = None
    image_size: int = 224
    slack: float = 32.0

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64).ravel()
        self.j2d = np.asarray(self.j2d, dtype=np.float64).reshape(21, 2)
        if not (np.all(np.isfinite(self.feature)) and np.all(np.isfinite(self.j2d))):
            raise ValueError("evidence contains non-finite values")
        lo, hi = -self.slack, self.image_size + self.slack
        if np.any(self.j2d < lo) or np.any(self.j2d > hi):
            raise ValueError("2D keypoints outside the image bounds plus slack")
        if self.heatmaps is not None:
            self.heatmaps = np.asarray(self.heatmaps, dtype=np.float64)
            if self.heatmaps.shape[0] != 21 or np.any(self.heatmaps < 0):
                raise ValueError("heatmaps must be 21 nonnegative channels")


@dataclass
class LinearRegressorWeights:
    j3d_weights: np.ndarray
    j3d_bias: np.ndarray
    ref_weights: np.ndarray
    ref_bias: np.ndarray

    def __post_init__(self):
        D = self.feature_dim
        if self.j3d_weights.shape != (D + N_J2D + N_PARAMS, N_PARAMS):
            raise ValueError(f"j3d weights have shape {self.j3d_weights.shape}")
        if self.ref_weights.shape != (N_J2D + D + 2 * N_PARAMS, N_J2D):
            raise ValueError(f"refiner weights have shape {self.ref_weights.shape}")
        if self.j3d_bias.shape != (N_PARAMS,) or self.ref_bias.shape != (N_J2D,):
            raise ValueError("bias shapes do not match")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ValueError("weights contain non-finite values")

    @property
    def feature_dim(self):
        return self.j3d_weights.shape[0] - N_J2D - N_PARAMS

    @classmethod
    def zeros(cls, feature_dim):
        D = feature_dim
        return cls(np.zeros((D + N_J2D + N_PARAMS, N_PARAMS)), np.zeros(N_PARAMS),
                   np.zeros((N_J2D + D + 2 * N_PARAMS, N_J2D)), np.zeros(N_J2D))

    def arrays(self):
        return [self.j3d_weights, self.j3d_bias, self.ref_weights, self.ref_bias]

    def copy(self):
        return LinearRegressorWeights(*[a.copy() for a in self.arrays()])


_WEIGHT_FIELDS = ("j3d_weights", "j3d_bias", "ref_weights", "ref_bias")


def save_weights(path, w, seed=0, epochs=0):
    entries, chunks, offset = [], [], 0
    for name in _WEIGHT_FIELDS:
        data = np.ascontiguousarray(getattr(w, name), dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(getattr(w, name).shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {"format": "HNDW1", "dtype": "<f4", "D": int(w.feature_dim),
              "seed": int(seed), "epochs": int(epochs), "arrays": entries}
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + b"\n")
        fh.write(json.dumps(header, separators=(",", ":")).encode("ascii") + b"\n")
        for chunk in chunks:
            fh.write(chunk)
    return Path(path)


def load_weights(path):
    """Read an ``HNDW1`` file; returns (weights, header dict)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(WEIGHTS_MAGIC + b"\n"):
        raise ValueError(f"{path}: missing HNDW1 magic")
    nl = raw.index(b"\n", len(WEIGHTS_MAGIC) + 1)
    header = json.loads(raw[len(WEIGHTS_MAGIC) + 1:nl].decode("ascii"))
    payload = memoryview(raw)[nl + 1:]
    arrays = {}
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=e["offset"])
        arrays[e["name"]] = arr.reshape(shape).astype(np.float64)
    return LinearRegressorWeights(*[arrays[n] for n in _WEIGHT_FIELDS]), header


def initial_params(assets, depth=DEFAULT_DEPTH):
    """Mesh-space starting point: mean pose, zero shape, identity rotation,
    unit scale, hand centered ``depth`` units in front of the camera."""
    return pack_params(assets.mean_pose, np.zeros(10), (1.0, 0.0, 0.0, 0.0), 1.0, (0.0, 0.0, depth))


J2D_CENTER = 0.5


def encode_j2d(j2d, image_size=224):
    """Keypoints in image-size units, centered on the principal point."""
    return np.ravel(j2d) / image_size - J2D_CENTER


def encode_feature(feature):
    """Descriptor scaled by 1/sqrt(D) so its block has unit-order norm."""
    feature = np.asarray(feature, dtype=np.float64)
    return feature / np.sqrt(max(feature.shape[0], 1))


def _j3d_input(feature, j2d, h, image_size, depth):
    return np.concatenate([encode_feature(feature), encode_j2d(j2d, image_size), h - camera_offset(depth)])


def _ref_input(j2d, feature, h, j3d, image_size, depth):
    return np.concatenate([encode_j2d(j2d, image_size), encode_feature(feature), h - camera_offset(depth),
                           np.ravel(j3d)])


def regress_step(z, h_t, w, image_size=224, depth=DEFAULT_DEPTH):
    """Offset dh = W^T [feature / sqrt(D); j2d / size - 0.5; h_t - camera_offset] + b."""
    a = _j3d_input(z.feature, z.j2d, np.asarray(h_t, dtype=np.float64), image_size, depth)
    if a.shape[0] != w.j3d_weights.shape[0]:
        raise ValueError(f"input length {a.shape[0]} does not match weights {w.j3d_weights.shape[0]}")
    return a @ w.j3d_weights + w.j3d_bias


def refine_2d(j2d_t, feature, h_t, j3d, w, image_size=224, depth=DEFAULT_DEPTH):
    """Next 2D keypoint estimate (21, 2) in pixels; absolute, not a residual."""
    c = _ref_input(j2d_t, np.asarray(feature, dtype=np.float64), np.asarray(h_t, dtype=np.float64),
                   j3d, image_size, depth)
    if c.shape[0] != w.ref_weights.shape[0]:
        raise ValueError(f"input length {c.shape[0]} does not match weights {w.ref_weights.shape[0]}")
    return ((c @ w.ref_weights + w.ref_bias) * image_size).reshape(21, 2)


@dataclass
class HMEResult:
    h: np.ndarray
    j2d: np.ndarray
    trajectory: List[np.ndarray]
    j2d_trajectory: List[np.ndarray]
    j3d_trajectory: List[np.ndarray]


def run_hme(z, w, assets, iterations=INNER_ITERATIONS, image_size=224, depth=DEFAULT_DEPTH):
    """Alternate offset regression and 2D refinement starting from h(0)."""
    h = initial_params(assets, depth)
    j2d = z.j2d.copy()
    traj, traj2d, traj3d = [h.copy()], [j2d.copy()], []
    for t in range(iterations):
        h = h + regress_step(Evidence2D(z.feature, j2d, slack=np.inf), h, w, image_size, depth)
        if not np.all(np.isfinite(h)):
            raise EstimationError(f"iteration {t}: regressed parameters are not finite")
        try:
            j3d = regress_skeleton(synthesize_mesh(h, assets), assets)
        except ValueError as exc:
            raise EstimationError(f"iteration {t}: {exc}") from exc
        j2d = refine_2d(j2d, z.feature, h, j3d, w, image_size, depth)
        if not np.all(np.isfinite(j2d)):
            raise EstimationError(f"iteration {t}: refined keypoints are not finite")
        traj.append(h.copy())
        traj2d.append(j2d.copy())
        traj3d.append(j3d)
    return HMEResult(h, j2d, traj, traj2d, traj3d)


@dataclass
class TrainingSample:
    evidence: Evidence2D
    target: Target
    feat_loss: float = 0.0  # descriptor-only term, constant w.r.t. the regressors
    params: Optional[np.ndarray] = None  # ground-truth h, used only by the warm start


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    inner_iterations: int = INNER_ITERATIONS
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    sigma: float = 1.0
    cutoff: float = 6.0
    depth: float = DEFAULT_DEPTH
    weights: LossWeights = TRAIN_LOSS_WEIGHTS
    warm_start: bool = True
    ridge: float = 1e-3

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.sigma > 0 and self.eps > 0):
            raise ValueError("learning rate, sigma and eps must be positive")
        if self.inner_iterations < 1:
            raise ValueError("inner_iterations must be at least 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class SampleGrad:
    loss: float
    grads: List[np.ndarray]
    lam: int
    terms: dict
    h: np.ndarray


def sample_loss_and_grad(w, sample, assets, cfg=TrainConfig(), plane=ImagePlane(), need_grad=True):
    """Loss of one instance through all inner iterations and its weight gradient."""
    S = float(plane.width)
    z, tgt = sample.evidence, sample.target
    f = z.feature
    W1, b1, W2, b2 = w.arrays()
    D = len(f)
    T = cfg.inner_iterations
    h = [initial_params(assets, cfg.depth)]
    j = [z.j2d.ravel()]
    A, C, K = [], [], []
    for t in range(T):
        a = _j3d_input(f, j[t], h[t], S, cfg.depth)
        h.append(h[t] + a @ W1 + b1)
        if not np.all(np.isfinite(h[-1])) or not h[-1][59] > 0:
            raise TrainingError(f"iteration {t}: invalid regressed parameters")
        k, Kj = skeleton_from_params(h[t + 1], assets, jacobian=True)
        c = _ref_input(j[t], f, h[t + 1], k, S, cfg.depth)
        j.append(S * (c @ W2 + b2))
        A.append(a)
        C.append(c)
        K.append(Kj.reshape(-1, N_PARAMS))

    gt2d = tgt.j2d.ravel()
    g2 = tgt.ctx.g ** 2
    ref = sum(float(np.sum((j[t + 1] - gt2d) ** 2)) / g2 for t in range(T))
    res = loss_total(h[T], tgt, assets, cfg.weights, plane, cfg.sigma, ref=ref, cutoff=cfg.cutoff)
    terms = dict(res.terms, feat=sample.feat_loss)
    loss = res.total + cfg.weights.feat * sample.feat_loss
    if not need_grad:
        return SampleGrad(loss, [], res.lam, terms, h[T])

    gW1, gb1 = np.zeros_like(W1), np.zeros_like(b1)
    gW2, gb2 = np.zeros_like(W2), np.zeros_like(b2)
    gh = res.grad.copy()
    gj_next = np.zeros(N_J2D)
    for t in range(T - 1, -1, -1):
        gj = gj_next + cfg.weights.ref * 2.0 * (j[t + 1] - gt2d) / g2
        gr = S * gj
        gW2 += np.outer(C[t], gr)
        gb2 += gr
        gc = W2 @ gr
        gj_t = gc[:N_J2D] / S
        gh = gh + gc[N_J2D + D:N_J2D + D + N_PARAMS] + K[t].T @ gc[N_J2D + D + N_PARAMS:]
        gW1 += np.outer(A[t], gh)
        gb1 += gh
        ga = W1 @ gh
        gj_next = gj_t + ga[D:D + N_J2D] / S
        gh = gh + ga[D + N_J2D:]
    return SampleGrad(loss, [gW1, gb1, gW2, gb2], res.lam, terms, h[T])


def warm_start_weights(data, assets, cfg=TrainConfig(), image_size=224):
    """Closed-form starting point for ``train``.

    Ridge regression of enc(h) on the centered keypoints [u, 1] over samples
    that carry ground-truth parameters, split evenly over the inner
    iterations so that h(T) hits the fit when the keypoints stay put. The
    refiner starts as the identity on its keypoint input. Returns None when
    no sample has parameters.
    """
    rows = [(encode_j2d(s.evidence.j2d, image_size), s.params) for s in data if s.params is not None]
    if not rows:
        return None
    D = len(data[0].evidence.feature)
    X = np.array([np.r_[u, 1.0] for u, _ in rows])
    Y = np.array([np.asarray(p, dtype=np.float64) - camera_offset(cfg.depth) for _, p in rows])
    beta = np.linalg.solve(X.T @ X + cfg.ridge * np.eye(X.shape[1]), X.T @ Y)
    T = cfg.inner_iterations
    w = LinearRegressorWeights.zeros(D)
    w.j3d_weights[D:D + N_J2D] = beta[:N_J2D] / T
    w.j3d_bias[:] = (beta[N_J2D] - (initial_params(assets, cfg.depth) - camera_offset(cfg.depth))) / T
    w.ref_weights[np.arange(N_J2D), np.arange(N_J2D)] = 1.0
    w.ref_bias[:] = J2D_CENTER
    return w


class Adam:
    """Adam with bias correction over a list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    weights: LinearRegressorWeights
    loss_trace: List[float] = field(default_factory=list)
    lambda_fraction: List[float] = field(default_factory=list)
    n_samples: List[int] = field(default_factory=list)


def train(dataset, cfg, assets, augment: Optional[Callable] = None, init=None, plane=ImagePlane(),
          progress: Optional[Callable] = None):
    """Fit both linear maps by mini-batch Adam on the full per-instance loss.

    ``augment(epoch, seed_params, rng)`` may return new TrainingSamples; it is
    called once per epoch with the predictions of that epoch's first
    mini-batch and its output is appended to the training set. Returns the
    weights and per-epoch traces (mean loss, fraction of instances with the
    shape term enabled, training-set size).
    """
    data = list(dataset)
    if not data:
        raise ValueError("training set is empty")
    D = len(data[0].evidence.feature)
    if init is None and cfg.warm_start:
        init = warm_start_weights(data, assets, cfg, plane.width)
    w = LinearRegressorWeights.zeros(D) if init is None else init.copy()
    opt = Adam(w.arrays(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    out = TrainResult(w)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total, lam_count, seeds = 0.0, 0, []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = None
            for i in batch:  # fixed, index-ordered accumulation
                try:
                    sg = sample_loss_and_grad(w, data[i], assets, cfg, plane)
                except (TrainingError, ValueError) as exc:
                    raise TrainingError(f"epoch {epoch}: {exc}") from exc
                if not np.isfinite(sg.loss):
                    raise TrainingError(f"epoch {epoch}: loss is not finite")
                total += sg.loss
                lam_count += sg.lam
                acc = sg.grads if acc is None else [x + y for x, y in zip(acc, sg.grads)]
                if start == 0:
                    seeds.append(sg.h)
            opt.step([g / len(batch) for g in acc])
        out.loss_trace.append(total / len(data))
        out.lambda_fraction.append(lam_count / len(data))
        out.n_samples.append(len(data))
        if progress is not None:
            progress(epoch, out)
        log.info("epoch %d loss %.4f lambda %.3f n %d", epoch, out.loss_trace[-1],
                 out.lambda_fraction[-1], len(data))
        if augment is not None:
            data.extend(augment(epoch, seeds, rng))
    return out
