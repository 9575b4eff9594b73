"""Silhouette and shaded rasterization.

Three renderers share one point-in-triangle predicate, so their foreground
pixel sets agree exactly:

* ``rasterize_hard``: binary coverage of pixel centers. Exact; the oracle.
* ``rasterize_soft``: occupancy 1 - prod_f (1 - sigmoid(d_f / sigma)) with
  d_f the signed distance (pixels, positive inside) from the pixel center to
  face f's projected boundary. Differentiable; see ``soft_silhouette_vjp``.
* ``render_shaded``: z-buffered flat Lambertian shading over a background.

Orientation is ignored everywhere (no backface culling).

The soft renderer evaluates each face only within ``cutoff * sigma`` pixels
of its boundary. Each face's log-complement term is shifted down by its value
at the cutoff, so the truncated mask stays continuous in the vertices; the
shift is below exp(-cutoff) per face (2e-9 at the default cutoff of 20).
"""
from __future__ import annotations

import numba
import numpy as np

from .camera import ImagePlane, project

DEFAULT_SIGMA = 1.0
DEFAULT_CUTOFF = 20.0


@numba.njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True, inline="always")
def _inside(ax, ay, bx, by, cx, cy, px, py):
    e0 = _edge(ax, ay, bx, by, px, py)
    e1 = _edge(bx, by, cx, cy, px, py)
    e2 = _edge(cx, cy, ax, ay, px, py)
    return (e0 >= 0.0 and e1 >= 0.0 and e2 >= 0.0) or (e0 <= 0.0 and e1 <= 0.0 and e2 <= 0.0)


@numba.njit(cache=True, inline="always")
def _area2(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


@numba.njit(cache=True)
def _pixel_range(lo, hi, n):
    # pixel centers k + 0.5 lying in [lo, hi]
    a = max(0, int(np.ceil(lo - 0.5)))
    b = min(n - 1, int(np.floor(hi - 0.5)))
    return a, b


@numba.njit(cache=True)
def _hard_kernel(uv, faces, height, width):
    out = np.zeros((height, width), dtype=np.uint8)
    for f in range(faces.shape[0]):
        i, j, k = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay = uv[i, 0], uv[i, 1]
        bx, by = uv[j, 0], uv[j, 1]
        cx, cy = uv[k, 0], uv[k, 1]
        if _area2(ax, ay, bx, by, cx, cy) == 0.0:
            continue
        c0, c1 = _pixel_range(min(ax, bx, cx), max(ax, bx, cx), width)
        r0, r1 = _pixel_range(min(ay, by, cy), max(ay, by, cy), height)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                if out[r, c]:
                    continue
                if _inside(ax, ay, bx, by, cx, cy, c + 0.5, py):
                    out[r, c] = 1
    return out


@numba.njit(cache=True, inline="always")
def _seg(px, py, ax, ay, dx, dy, inv_len2):
    # squared distance to segment a + t (dx, dy), t in [0, 1], and the foot
    t = ((px - ax) * dx + (py - ay) * dy) * inv_len2
    t = min(1.0, max(0.0, t))
    qx = px - (ax + t * dx)
    qy = py - (ay + t * dy)
    return qx * qx + qy * qy, t, qx, qy


@numba.njit(cache=True, inline="always")
def _signed_distance(ax, ay, bx, by, cx, cy, px, py):
    """Signed distance to the triangle boundary (positive inside).

    Also returns the sign, the closest edge index, its parameter t and the
    offset q from the closest boundary point to the pixel.
    """
    d0, t0, x0, y0 = _seg(px, py, ax, ay, bx - ax, by - ay, 1.0 / ((bx - ax) ** 2 + (by - ay) ** 2))
    d1, t1, x1, y1 = _seg(px, py, bx, by, cx - bx, cy - by, 1.0 / ((cx - bx) ** 2 + (cy - by) ** 2))
    d2, t2, x2, y2 = _seg(px, py, cx, cy, ax - cx, ay - cy, 1.0 / ((ax - cx) ** 2 + (ay - cy) ** 2))
    e, d, t, qx, qy = 0, d0, t0, x0, y0
    if d1 < d:
        e, d, t, qx, qy = 1, d1, t1, x1, y1
    if d2 < d:
        e, d, t, qx, qy = 2, d2, t2, x2, y2
    s = 1.0 if _inside(ax, ay, bx, by, cx, cy, px, py) else -1.0
    return s * np.sqrt(d), s, e, t, qx, qy


@numba.njit(cache=True, inline="always")
def _softplus(x):
    if x > 0.0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@numba.njit(cache=True, inline="always")
def _far_outside(ax, ay, bx, by, cx, cy, px, py, sgn, l0, l1, l2, reach):
    # cheap reject: beyond ``reach`` on the outer side of any edge line
    if sgn * _edge(ax, ay, bx, by, px, py) < -reach * l0:
        return True
    if sgn * _edge(bx, by, cx, cy, px, py) < -reach * l1:
        return True
    return sgn * _edge(cx, cy, ax, ay, px, py) < -reach * l2


@numba.njit(cache=True)
def _soft_sum(uv, faces, height, width, sigma, cutoff):
    S = np.zeros((height, width))
    reach = cutoff * sigma
    floor = _softplus(-cutoff)  # shift so each face's term reaches 0 at the cutoff
    for f in range(faces.shape[0]):
        i, j, k = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay = uv[i, 0], uv[i, 1]
        bx, by = uv[j, 0], uv[j, 1]
        cx, cy = uv[k, 0], uv[k, 1]
        area = _area2(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        sgn = 1.0 if area > 0.0 else -1.0
        l0 = np.hypot(bx - ax, by - ay)
        l1 = np.hypot(cx - bx, cy - by)
        l2 = np.hypot(ax - cx, ay - cy)
        c0, c1 = _pixel_range(min(ax, bx, cx) - reach, max(ax, bx, cx) + reach, width)
        r0, r1 = _pixel_range(min(ay, by, cy) - reach, max(ay, by, cy) + reach, height)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                if _far_outside(ax, ay, bx, by, cx, cy, px, py, sgn, l0, l1, l2, reach):
                    continue
                d, s, e, t, qx, qy = _signed_distance(ax, ay, bx, by, cx, cy, px, py)
                if d <= -reach:
                    continue
                S[r, c] += _softplus(d / sigma) - floor
    return S


@numba.njit(cache=True)
def _soft_backward(uv, faces, height, width, sigma, cutoff, dS):
    """Accumulate dL/d(uv) given dL/dS per pixel (S = log-complement sum)."""
    g = np.zeros(uv.shape)
    reach = cutoff * sigma
    for f in range(faces.shape[0]):
        idx = (faces[f, 0], faces[f, 1], faces[f, 2])
        ax, ay = uv[idx[0], 0], uv[idx[0], 1]
        bx, by = uv[idx[1], 0], uv[idx[1], 1]
        cx, cy = uv[idx[2], 0], uv[idx[2], 1]
        area = _area2(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        sgn = 1.0 if area > 0.0 else -1.0
        l0 = np.hypot(bx - ax, by - ay)
        l1 = np.hypot(cx - bx, cy - by)
        l2 = np.hypot(ax - cx, ay - cy)
        c0, c1 = _pixel_range(min(ax, bx, cx) - reach, max(ax, bx, cx) + reach, width)
        r0, r1 = _pixel_range(min(ay, by, cy) - reach, max(ay, by, cy) + reach, height)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                up = dS[r, c]
                if up == 0.0:
                    continue
                px = c + 0.5
                if _far_outside(ax, ay, bx, by, cx, cy, px, py, sgn, l0, l1, l2, reach):
                    continue
                d, s, e, t, qx, qy = _signed_distance(ax, ay, bx, by, cx, cy, px, py)
                if d <= -reach:
                    continue
                dist = abs(d)
                if dist == 0.0:
                    continue
                x = d / sigma
                if x >= 0.0:
                    sig = 1.0 / (1.0 + np.exp(-x))
                else:
                    ex = np.exp(x)
                    sig = ex / (1.0 + ex)
                # dS/dd = sigmoid(d / sigma) / sigma ; dd/d(endpoint) = -s * w * q / |q|
                coef = -up * sig / sigma * s / dist
                va = idx[e]
                vb = idx[(e + 1) % 3]
                g[va, 0] += coef * (1.0 - t) * qx
                g[va, 1] += coef * (1.0 - t) * qy
                g[vb, 0] += coef * t * qx
                g[vb, 1] += coef * t * qy
    return g


@numba.njit(cache=True)
def _shade_kernel(uv, inv_z, faces, height, width):
    face_id = -np.ones((height, width), dtype=np.int64)
    zbuf = np.zeros((height, width))  # nearest surface has largest 1/z
    for f in range(faces.shape[0]):
        i, j, k = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay = uv[i, 0], uv[i, 1]
        bx, by = uv[j, 0], uv[j, 1]
        cx, cy = uv[k, 0], uv[k, 1]
        area = _area2(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        c0, c1 = _pixel_range(min(ax, bx, cx), max(ax, bx, cx), width)
        r0, r1 = _pixel_range(min(ay, by, cy), max(ay, by, cy), height)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                if not _inside(ax, ay, bx, by, cx, cy, px, py):
                    continue
                w0 = _edge(bx, by, cx, cy, px, py) / area
                w1 = _edge(cx, cy, ax, ay, px, py) / area
                w2 = 1.0 - w0 - w1
                iz = w0 * inv_z[i] + w1 * inv_z[j] + w2 * inv_z[k]
                if face_id[r, c] < 0 or iz > zbuf[r, c]:
                    zbuf[r, c] = iz
                    face_id[r, c] = f
    return face_id


def _face_index(faces):
    return np.ascontiguousarray(faces, dtype=np.int64)


def _vertices(v):
    return np.ascontiguousarray(getattr(v, "vertices", v), dtype=np.float64)


def rasterize_hard(v, plane=ImagePlane(), faces=None):
    """Binary silhouette (H, W) as float64 zeros and ones."""
    faces = _face_index(v.faces if faces is None else faces)
    uv = project(_vertices(v), plane)
    return _hard_kernel(uv, faces, plane.height, plane.width).astype(np.float64)


def rasterize_soft(v, plane=ImagePlane(), sigma=DEFAULT_SIGMA, faces=None, cutoff=DEFAULT_CUTOFF):
    """Soft occupancy in [0, 1] with smooth edges of width ~sigma pixels."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    faces = _face_index(v.faces if faces is None else faces)
    uv = project(_vertices(v), plane)
    S = _soft_sum(uv, faces, plane.height, plane.width, float(sigma), float(cutoff))
    return -np.expm1(-S)


def soft_silhouette_vjp(uv, faces, plane, sigma, grad_mask, cutoff=DEFAULT_CUTOFF):
    """Forward soft mask and the pullback of ``grad_mask`` to vertex pixels.

    ``grad_mask`` may be a callable ``mask -> dL/dmask`` so the loss can see
    the forward result. Returns ``(mask, dL/duv)`` with dL/duv of shape (N, 2).
    """
    uv = np.ascontiguousarray(uv, dtype=np.float64)
    faces = _face_index(faces)
    S = _soft_sum(uv, faces, plane.height, plane.width, float(sigma), float(cutoff))
    mask = -np.expm1(-S)
    G = grad_mask(mask) if callable(grad_mask) else np.asarray(grad_mask, dtype=np.float64)
    dS = np.ascontiguousarray(G * np.exp(-S))
    g = _soft_backward(uv, faces, plane.height, plane.width, float(sigma), float(cutoff), dS)
    return mask, g


def face_normals(vertices, faces):
    p = np.asarray(vertices)[np.asarray(faces)]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def render_shaded(v, plane=ImagePlane(), albedo=(0.8, 0.6, 0.5), light_dir=(0.0, 0.0, -1.0),
                  background=None, faces=None, ambient=0.3):
    """Flat Lambertian rendering with a z-buffer; returns (H, W, 3) in [0, 1].

    Each face normal is flipped to face the camera before shading, so color
    is albedo * (max(0, n . l) + ambient), clamped to 1. Pixels not covered by
    any face copy ``background`` (black if omitted).
    """
    light = np.asarray(light_dir, dtype=np.float64)
    if abs(np.linalg.norm(light) - 1.0) > 1e-6:
        raise ValueError("light_dir must be a unit vector")
    albedo = np.asarray(albedo, dtype=np.float64)
    faces = _face_index(v.faces if faces is None else faces)
    verts = _vertices(v)
    uv = project(verts, plane)
    if background is None:
        background = np.zeros((plane.height, plane.width, 3))
    out = np.array(background, dtype=np.float64, copy=True)
    if out.shape != (plane.height, plane.width, 3):
        raise ValueError("background must match the image plane")
    face_id = _shade_kernel(uv, 1.0 / verts[:, 2], faces, plane.height, plane.width)
    n = face_normals(verts, faces)
    centroid = verts[faces].mean(axis=1)
    n[np.einsum("fa,fa->f", n, centroid) > 0] *= -1.0
    shade = np.maximum(0.0, n @ light) + ambient
    colors = np.minimum(1.0, shade[:, None] * albedo[None, :])
    hit = face_id >= 0
    out[hit] = colors[face_id[hit]]
    return out
