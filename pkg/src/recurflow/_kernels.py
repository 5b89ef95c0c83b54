"""Hot loops for correlation and bilinear warping.

Each kernel exists twice: a numba ``@njit`` version and a vectorised numpy
version.  The numba path is used when numba imports and the environment
variable ``RECURFLOW_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
kept importable (``*_nb`` / ``*_np``) so tests can cross-check them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the environment
    HAS_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("RECURFLOW_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")


USE_NUMBA = HAS_NUMBA and not _env_disabled()


# --------------------------------------------------------------------------
# correlation
# --------------------------------------------------------------------------


def _shift_slices(d: int, n: int):
    """Slices (dst, src) such that dst[i] pairs with src[i + d] inside [0, n)."""
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def correlation_forward_np(f1, f2, max_disp):
    b, c, h, w = f1.shape
    side = 2 * max_disp + 1
    out = np.zeros((b, side * side, h, w))
    inv_c = 1.0 / c
    for dy in range(-max_disp, max_disp + 1):
        ys, ys2 = _shift_slices(dy, h)
        for dx in range(-max_disp, max_disp + 1):
            xs, xs2 = _shift_slices(dx, w)
            k = (dy + max_disp) * side + (dx + max_disp)
            if ys.stop <= ys.start or xs.stop <= xs.start:
                continue
            out[:, k, ys, xs] = np.einsum("bchw,bchw->bhw", f1[:, :, ys, xs], f2[:, :, ys2, xs2]) * inv_c
    return out


def correlation_backward_np(grad_out, f1, f2, max_disp):
    b, c, h, w = f1.shape
    side = 2 * max_disp + 1
    g1 = np.zeros_like(f1)
    g2 = np.zeros_like(f2)
    inv_c = 1.0 / c
    for dy in range(-max_disp, max_disp + 1):
        ys, ys2 = _shift_slices(dy, h)
        for dx in range(-max_disp, max_disp + 1):
            xs, xs2 = _shift_slices(dx, w)
            k = (dy + max_disp) * side + (dx + max_disp)
            if ys.stop <= ys.start or xs.stop <= xs.start:
                continue
            go = grad_out[:, k : k + 1, ys, xs] * inv_c
            g1[:, :, ys, xs] += go * f2[:, :, ys2, xs2]
            g2[:, :, ys2, xs2] += go * f1[:, :, ys, xs]
    return g1, g2


# --------------------------------------------------------------------------
# bilinear warp, zero outside the image
# --------------------------------------------------------------------------


def _corner_indices(flow, h, w):
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = gx[None] + flow[:, 0]
    sy = gy[None] + flow[:, 1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    ax = sx - x0
    ay = sy - y0
    return x0.astype(np.int64), y0.astype(np.int64), ax, ay


def warp_forward_np(feat, flow):
    b, c, h, w = feat.shape
    x0, y0, ax, ay = _corner_indices(flow, h, w)
    out = np.zeros_like(feat)
    bidx = np.arange(b)[:, None, None]
    for cy, wy in ((0, 1.0 - ay), (1, ay)):
        for cx, wx in ((0, 1.0 - ax), (1, ax)):
            xi = x0 + cx
            yi = y0 + cy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc = np.clip(xi, 0, w - 1)
            yc = np.clip(yi, 0, h - 1)
            # (b, h, w, c) after advanced indexing
            vals = feat.transpose(0, 2, 3, 1)[bidx, yc, xc]
            wgt = np.where(ok, wy * wx, 0.0)
            out += (vals * wgt[..., None]).transpose(0, 3, 1, 2)
    return out


def warp_backward_np(grad_out, feat, flow):
    b, c, h, w = feat.shape
    x0, y0, ax, ay = _corner_indices(flow, h, w)
    gfeat = np.zeros((b, h, w, c))
    gflow = np.zeros_like(flow)
    bidx = np.broadcast_to(np.arange(b)[:, None, None], x0.shape)
    feat_t = feat.transpose(0, 2, 3, 1)
    go_t = grad_out.transpose(0, 2, 3, 1)
    for cy in (0, 1):
        wy = ay if cy else 1.0 - ay
        dwy = 1.0 if cy else -1.0
        for cx in (0, 1):
            wx = ax if cx else 1.0 - ax
            dwx = 1.0 if cx else -1.0
            xi = x0 + cx
            yi = y0 + cy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc = np.clip(xi, 0, w - 1)
            yc = np.clip(yi, 0, h - 1)
            wgt = np.where(ok, wy * wx, 0.0)
            np.add.at(gfeat, (bidx[ok], yc[ok], xc[ok]), (go_t * wgt[..., None])[ok])
            vals = feat_t[bidx, yc, xc]
            dot = np.where(ok, np.einsum("bhwc,bhwc->bhw", go_t, vals), 0.0)
            gflow[:, 0] += dot * dwx * wy
            gflow[:, 1] += dot * dwy * wx
    return gfeat.transpose(0, 3, 1, 2).copy(), gflow


if HAS_NUMBA:

    @njit(cache=True)
    def correlation_forward_nb(f1, f2, max_disp):
        b, c, h, w = f1.shape
        side = 2 * max_disp + 1
        out = np.zeros((b, side * side, h, w))
        inv_c = 1.0 / c
        for n in range(b):
            for dy in range(-max_disp, max_disp + 1):
                ylo = max(0, -dy)
                yhi = min(h, h - dy)
                for dx in range(-max_disp, max_disp + 1):
                    xlo = max(0, -dx)
                    xhi = min(w, w - dx)
                    k = (dy + max_disp) * side + dx + max_disp
                    for ch in range(c):
                        for y in range(ylo, yhi):
                            for x in range(xlo, xhi):
                                out[n, k, y, x] += f1[n, ch, y, x] * f2[n, ch, y + dy, x + dx]
                    for y in range(ylo, yhi):
                        for x in range(xlo, xhi):
                            out[n, k, y, x] *= inv_c
        return out

    @njit(cache=True)
    def correlation_backward_nb(grad_out, f1, f2, max_disp):
        b, c, h, w = f1.shape
        side = 2 * max_disp + 1
        g1 = np.zeros_like(f1)
        g2 = np.zeros_like(f2)
        inv_c = 1.0 / c
        for n in range(b):
            for dy in range(-max_disp, max_disp + 1):
                ylo = max(0, -dy)
                yhi = min(h, h - dy)
                for dx in range(-max_disp, max_disp + 1):
                    xlo = max(0, -dx)
                    xhi = min(w, w - dx)
                    k = (dy + max_disp) * side + dx + max_disp
                    for ch in range(c):
                        for y in range(ylo, yhi):
                            for x in range(xlo, xhi):
                                go = grad_out[n, k, y, x] * inv_c
                                g1[n, ch, y, x] += go * f2[n, ch, y + dy, x + dx]
                                g2[n, ch, y + dy, x + dx] += go * f1[n, ch, y, x]
        return g1, g2

    @njit(cache=True)
    def warp_forward_nb(feat, flow):
        b, c, h, w = feat.shape
        out = np.zeros_like(feat)
        for n in range(b):
            for y in range(h):
                for x in range(w):
                    sx = x + flow[n, 0, y, x]
                    sy = y + flow[n, 1, y, x]
                    fx = np.floor(sx)
                    fy = np.floor(sy)
                    ax = sx - fx
                    ay = sy - fy
                    x0 = int(fx)
                    y0 = int(fy)
                    for cy in range(2):
                        yi = y0 + cy
                        if yi < 0 or yi >= h:
                            continue
                        wy = ay if cy == 1 else 1.0 - ay
                        for cx in range(2):
                            xi = x0 + cx
                            if xi < 0 or xi >= w:
                                continue
                            wgt = wy * (ax if cx == 1 else 1.0 - ax)
                            for ch in range(c):
                                out[n, ch, y, x] += feat[n, ch, yi, xi] * wgt
        return out

    @njit(cache=True)
    def warp_backward_nb(grad_out, feat, flow):
        b, c, h, w = feat.shape
        gfeat = np.zeros_like(feat)
        gflow = np.zeros_like(flow)
        for n in range(b):
            for y in range(h):
                for x in range(w):
                    sx = x + flow[n, 0, y, x]
                    sy = y + flow[n, 1, y, x]
                    fx = np.floor(sx)
                    fy = np.floor(sy)
                    ax = sx - fx
                    ay = sy - fy
                    x0 = int(fx)
                    y0 = int(fy)
                    gu = 0.0
                    gv = 0.0
                    for cy in range(2):
                        yi = y0 + cy
                        if yi < 0 or yi >= h:
                            continue
                        wy = ay if cy == 1 else 1.0 - ay
                        dwy = 1.0 if cy == 1 else -1.0
                        for cx in range(2):
                            xi = x0 + cx
                            if xi < 0 or xi >= w:
                                continue
                            wx = ax if cx == 1 else 1.0 - ax
                            dwx = 1.0 if cx == 1 else -1.0
                            wgt = wy * wx
                            dot = 0.0
                            for ch in range(c):
                                go = grad_out[n, ch, y, x]
                                gfeat[n, ch, yi, xi] += go * wgt
                                dot += go * feat[n, ch, yi, xi]
                            gu += dot * dwx * wy
                            gv += dot * dwy * wx
                    gflow[n, 0, y, x] = gu
                    gflow[n, 1, y, x] = gv
        return gfeat, gflow


def _pick(name: str):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


def correlation_forward(f1, f2, max_disp):
    return _pick("correlation_forward")(np.ascontiguousarray(f1), np.ascontiguousarray(f2), int(max_disp))


def correlation_backward(grad_out, f1, f2, max_disp):
    return _pick("correlation_backward")(
        np.ascontiguousarray(grad_out), np.ascontiguousarray(f1), np.ascontiguousarray(f2), int(max_disp)
    )


def warp_forward(feat, flow):
    return _pick("warp_forward")(np.ascontiguousarray(feat), np.ascontiguousarray(flow))


def warp_backward(grad_out, feat, flow):
    return _pick("warp_backward")(
        np.ascontiguousarray(grad_out), np.ascontiguousarray(feat), np.ascontiguousarray(flow)
    )


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def set_backend(name: str) -> None:
    """Switch kernels at runtime ("numba" or "numpy"); used by tests and the benchmark."""
    global USE_NUMBA
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba is not installed")
        USE_NUMBA = True
    elif name == "numpy":
        USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")
