"""Color-wheel rendering of flow fields and binary PPM output."""

from __future__ import annotations

import re

import numpy as np

from .events import EventFormatError

# segment lengths of the Middlebury wheel: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
_SEGMENTS = (15, 6, 4, 11, 13, 6)


def color_wheel() -> np.ndarray:
    """(55, 3) RGB ramp in [0, 1] running once around the hue circle."""
    ry, yg, gc, cb, bm, mr = _SEGMENTS
    rows = []
    ramp = lambda n: np.arange(n) / n
    rows.append(np.stack([np.ones(ry), ramp(ry), np.zeros(ry)], 1))
    rows.append(np.stack([1 - ramp(yg), np.ones(yg), np.zeros(yg)], 1))
    rows.append(np.stack([np.zeros(gc), np.ones(gc), ramp(gc)], 1))
    rows.append(np.stack([np.zeros(cb), 1 - ramp(cb), np.ones(cb)], 1))
    rows.append(np.stack([ramp(bm), np.zeros(bm), np.ones(bm)], 1))
    rows.append(np.stack([np.ones(mr), np.zeros(mr), 1 - ramp(mr)], 1))
    return np.concatenate(rows)


def render_flow(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Map a (2, H, W) flow to an (H, W, 3) uint8 image; zero flow is white.

    Hue follows atan2(v, u); saturation is the magnitude over its 99th
    percentile (or ``max_magnitude``), clipped to 1.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    u, v = flow
    mag = np.hypot(u, v)
    scale = float(np.percentile(mag, 99)) if max_magnitude is None else float(max_magnitude)
    sat = np.clip(mag / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(mag)
    wheel = color_wheel()
    n = len(wheel)
    pos = (np.arctan2(v, u) / (2 * np.pi) % 1.0) * n
    k0 = np.floor(pos).astype(int) % n
    k1 = (k0 + 1) % n
    f = (pos - np.floor(pos))[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    col = 1 - sat[..., None] * (1 - col)
    return np.round(col * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("PPM output needs an (H, W, 3) uint8 image")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise EventFormatError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise EventFormatError(f"{path}: only 8-bit PPM supported")
    pix = data[m.end() :]
    if len(pix) != w * h * 3:
        raise EventFormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(pix)}")
    return np.frombuffer(pix, np.uint8).reshape(h, w, 3).copy()
