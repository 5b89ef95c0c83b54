"""Differentiable bilinear warping and correlation cost volume."""

from __future__ import annotations

from . import _kernels
from .errors import ContractError, DimensionError
from .tensor import Tensor, _node


def warp(features: Tensor, flow: Tensor) -> Tensor:
    """Sample ``features`` at ``x + flow(x)`` with bilinear weights.

    Flow channel 0 is the horizontal displacement (rightward), channel 1 the
    vertical one (downward), both in pixels of this resolution.  Samples that
    fall outside the map read as zero.
    """
    if features.ndim != 4 or flow.ndim != 4:
        raise DimensionError("warp: features and flow must both be 4-D")
    if flow.shape[1] != 2:
        raise DimensionError(f"warp: flow channel axis 1 has {flow.shape[1]}, expected 2")
    if features.shape[0] != flow.shape[0]:
        raise DimensionError(f"warp: batch axis 0 differs ({features.shape[0]} vs {flow.shape[0]})")
    for ax in (2, 3):
        if features.shape[ax] != flow.shape[ax]:
            raise DimensionError(
                f"warp: spatial axis {ax} differs ({features.shape[ax]} vs {flow.shape[ax]})"
            )
    fv, uv = features.values, flow.values

    def bw(g):
        gf, gu = _kernels.warp_backward(g, fv, uv)
        return gf, gu

    return _node(_kernels.warp_forward(fv, uv), (features, flow), bw)


def correlation(f1: Tensor, f2: Tensor, max_disp: int) -> Tensor:
    """Channel-averaged dot products over a (2d+1)^2 displacement window.

    Output channel ``(dy + d) * (2d + 1) + (dx + d)`` holds
    ``mean_c f1(y, x) * f2(y + dy, x + dx)``; displacements that leave the map
    contribute zero.
    """
    if max_disp < 1:
        raise ContractError(f"correlation: max_disp must be >= 1, got {max_disp}")
    if f1.ndim != 4 or f2.ndim != 4:
        raise DimensionError("correlation: inputs must be 4-D")
    for ax in range(4):
        if f1.shape[ax] != f2.shape[ax]:
            raise DimensionError(f"correlation: axis {ax} differs ({f1.shape[ax]} vs {f2.shape[ax]})")
    a, b = f1.values, f2.values

    def bw(g):
        return _kernels.correlation_backward(g, a, b, max_disp)

    return _node(_kernels.correlation_forward(a, b, max_disp), (f1, f2), bw)
