"""Binary PGM (P5) and PPM (P6) reading and writing, maxval 255."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(values):
    """Map [0, 1] floats to uint8 as round-half-up of value * 255."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def _write(path, magic, data):
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())
    return Path(path)


def write_pgm(path, mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("PGM expects a 2D array")
    return _write(path, "P5", to_bytes(mask))


def write_ppm(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM expects an (H, W, 3) array")
    return _write(path, "P6", to_bytes(image))


def _tokens(raw, count):
    # header tokens separated by whitespace; '#' comments run to end of line
    out, i = [], 0
    while len(out) < count:
        while raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            i = raw.index(b"\n", i) + 1
            continue
        j = i
        while not raw[j:j + 1].isspace():
            j += 1
        out.append(raw[i:j])
        i = j
    return out, i + 1


def read_netpbm(path):
    """Read a P5 or P6 file; returns floats in [0, 1], (H, W) or (H, W, 3)."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), start = _tokens(raw, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm variant {magic.decode()} maxval {maxval}")
    ch = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * ch, offset=start)
    shape = (h, w) if ch == 1 else (h, w, 3)
    return data.reshape(shape).astype(np.float64) / 255.0
