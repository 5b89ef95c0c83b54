"""Flow colour coding with the Middlebury colour wheel."""

from __future__ import annotations

import numpy as np


def make_colorwheel() -> np.ndarray:
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


_WHEEL = make_colorwheel()


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """(2, H, W) flow to an (H, W, 3) uint8 RGB image.

    Hue encodes direction, saturation the magnitude relative to ``max_mag``
    (the largest magnitude in the field when not given).  Zero flow is white.
    """
    u = np.asarray(flow[0], dtype=np.float64)
    v = np.asarray(flow[1], dtype=np.float64)
    rad = np.sqrt(u * u + v * v)
    if max_mag is None:
        max_mag = float(rad.max())
    scale = max_mag if max_mag > 0 else 1.0
    u = u / scale
    v = v / scale
    rad = rad / scale

    ncols = _WHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(u.shape + (3,), dtype=np.uint8)
    for i in range(3):
        c0 = _WHEEL[k0, i] / 255.0
        c1 = _WHEEL[k1, i] / 255.0
        col = (1 - f) * c0 + f * c1
        inside = rad <= 1
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        img[..., i] = np.floor(255 * col).astype(np.uint8)
    return img
