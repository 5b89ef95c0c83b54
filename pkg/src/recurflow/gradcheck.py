"""Central finite-difference checks of every differentiable op and of the whole network.

Each op check contracts the op output with a fixed random tensor, so the
scalar probe exercises every output element, then compares analytic and
numeric derivatives at sampled input coordinates.  Relative error is
``|a - n| / max(|a|, |n|, floor)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import flow_ops, tensor as T
from .losses import GroundTruth, LossWeights, flow_loss, occ_loss, sequence_loss
from .network import ModelConfig, RecurrentFlowNet
from .tensor import Tensor, no_grad

OP_THRESHOLD = 1e-4
E2E_THRESHOLD = 1e-3
REL_FLOOR = 1e-6
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    threshold: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.threshold)


@dataclass
class GradcheckReport:
    results: list[CheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def format(self) -> str:
        lines = [f"{'check':<22}{'max_rel_err':>14}{'threshold':>12}{'coords':>8}  status"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{r.name:<22}{r.max_rel_error:>14.3e}{r.threshold:>12.0e}{r.checked:>8d}  {status}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} in {self.seconds:.1f}s")
        return "\n".join(lines) + "\n"


def _rel(a: float, n: float, floor: float = REL_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_function(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    samples: int = 8,
    threshold: float = OP_THRESHOLD,
    step: float = STEP,
) -> CheckResult:
    """Compare ``fn``'s reverse-mode input gradients with central differences."""
    probe = None

    def scalar(arrays) -> tuple[Tensor, list[Tensor]]:
        nonlocal probe
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*ts)
        if probe is None:
            probe = rng.normal(size=out.shape)
        return T.tsum(out * Tensor(probe)), ts

    loss, ts = scalar(inputs)
    loss.backward()
    worst = 0.0
    count = 0
    for i, x in enumerate(inputs):
        flat = x.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for j in picks:
            vals = []
            for sgn in (1.0, -1.0):
                moved = [a.copy() for a in inputs]
                moved[i].reshape(-1)[j] += sgn * step
                with no_grad():
                    vals.append(scalar(moved)[0].item())
            numeric = (vals[0] - vals[1]) / (2 * step)
            analytic = float(ts[i].grad.reshape(-1)[j])
            worst = max(worst, _rel(analytic, numeric))
            count += 1
    return CheckResult(name, worst, threshold, count)


def _away_from(x: np.ndarray, points: Sequence[float], margin: float = 1e-3) -> np.ndarray:
    # push samples off non-differentiable points
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 1e-30) * margin * 2, x)
    return x


def _fractional(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    # keep sample positions away from the bilinear kinks at integers
    frac = x - np.floor(x)
    return np.where(frac < margin, x + 2 * margin, np.where(frac > 1 - margin, x - 2 * margin, x))


def op_suite(rng: np.random.Generator, samples: int = 8) -> list[CheckResult]:
    def r(*shape):
        return rng.normal(size=shape)

    pos = np.abs(r(2, 3, 4, 4)) + 0.5
    occ_pred = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    occ_gt = (rng.random((2, 1, 4, 4)) > 0.6).astype(np.float64)
    flow_gt = r(2, 2, 4, 4)
    cases: list[tuple[str, Callable, list[np.ndarray]]] = [
        ("add", T.add, [r(2, 3, 4), r(1, 3, 1)]),
        ("sub", T.sub, [r(2, 3, 4), r(3, 4)]),
        ("mul", T.mul, [r(2, 3, 4), r(2, 1, 4)]),
        ("div", T.div, [r(2, 3, 4), pos[0, :, 0, :] + 0.5]),
        ("log", T.log, [pos]),
        ("sqrt", T.sqrt, [pos]),
        ("clip", lambda x: T.clip(x, -0.5, 0.5), [_away_from(r(2, 3, 4), (-0.5, 0.5))]),
        ("leaky_relu", lambda x: T.leaky_relu(x, 0.1), [_away_from(r(2, 3, 4, 4), (0.0,))]),
        ("sigmoid", T.sigmoid, [3 * r(2, 3, 4)]),
        ("sum", lambda x: T.tsum(x, axis=(1, 3), keepdims=True), [r(2, 3, 4, 5)]),
        ("mean", T.mean, [r(2, 3, 4)]),
        ("reshape", lambda x: T.reshape(x, (6, 4)), [r(2, 3, 4)]),
        ("getitem", lambda x: T.getitem(x, (slice(None), slice(1, 3))), [r(2, 4, 3)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r(2, 3, 4, 4), r(2, 2, 4, 4)]),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, padding=1), [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)]),
        ("conv2d_stride2", lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)]),
        (
            "conv2d_dilated",
            lambda x, w, b: T.conv2d(x, w, b, padding=2, dilation=2),
            [r(1, 2, 7, 7), r(3, 2, 3, 3), r(3)],
        ),
        ("upsample2x", T.upsample2x, [r(2, 3, 4, 5)]),
        ("avg_pool2x", T.avg_pool2x, [r(2, 3, 4, 6)]),
        ("warp", flow_ops.warp, [r(2, 3, 6, 7), _fractional(1.5 * r(2, 2, 6, 7))]),
        ("correlation", lambda a, b: flow_ops.correlation(a, b, 2), [r(2, 5, 6, 6), r(2, 5, 6, 6)]),
        ("flow_loss", lambda p: flow_loss(p, flow_gt), [r(2, 2, 4, 4)]),
        ("occ_loss", lambda p: occ_loss(p, occ_gt), [occ_pred]),
    ]
    return [check_function(name, fn, inputs, rng, samples) for name, fn, inputs in cases]


def gradcheck_config(cfg: ModelConfig) -> ModelConfig:
    """The network variant probed end to end.

    Temporal input weights start non-zero so the recurrent path carries
    signal, and the backward-flow branch stays in the graph so the numeric and
    analytic derivatives see the same function.
    """
    return cfg.replace(temporal_init="kaiming", backward_flow_grad=True)


def parameter_groups(named: dict) -> dict[str, list[str]]:
    """Parameter names grouped by submodule (encoder, adapter, estimator, context, temporal)."""
    groups: dict[str, list[str]] = {}
    for name in sorted(named):
        parts = name.split(".")
        if parts[0] == "decoder":
            key = next(p for p in parts[1:] if not p.startswith("level"))
        else:
            key = parts[0]
        groups.setdefault(key, []).append(name)
    return groups


def end_to_end(
    cfg: ModelConfig,
    rng: np.random.Generator,
    samples: int = 5,
    frames: int = 3,
    seed: int = 0,
    threshold: float = E2E_THRESHOLD,
) -> CheckResult:
    """Loss gradient of a ``frames``-long sequence w.r.t. ``samples`` scalars of every parameter group."""
    cfg = gradcheck_config(cfg)
    model = RecurrentFlowNet(cfg, seed=seed)
    size = cfg.downsample * 2
    imgs = [Tensor(rng.random((1, cfg.in_channels, size, size))) for _ in range(frames)]
    gts = []
    for _ in range(frames - 1):
        occ = (rng.random((1, 1, size, size)) > 0.7).astype(np.float64) if cfg.use_occlusion else None
        gts.append(GroundTruth(rng.normal(size=(1, 2, size, size)), occ))
    weights = LossWeights.for_levels(cfg.levels, lambda_mode="fixed", lam=0.5)

    def loss() -> Tensor:
        out = model.forward_sequence(imgs, temporal=cfg.temporal_mode != "none")
        occs = [p.occlusions for p in out.pairs]
        return sequence_loss([p.flows for p in out.pairs], occs, gts, weights).total

    model.zero_grad()
    loss().backward()
    named = model.named_parameters()
    worst = 0.0
    count = 0
    for group, names in sorted(parameter_groups(named).items()):
        # flat index space over the whole group, sampled without replacement
        sizes = np.array([named[n].size for n in names])
        for flat in rng.choice(sizes.sum(), size=min(samples, int(sizes.sum())), replace=False):
            k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
            p = named[names[k]]
            j = int(flat - (np.cumsum(sizes)[k] - sizes[k]))
            analytic = float(p.grad.reshape(-1)[j])
            orig = p.values.reshape(-1)[j]
            vals = []
            for sgn in (1.0, -1.0):
                p.values.reshape(-1)[j] = orig + sgn * STEP
                with no_grad():
                    vals.append(loss().item())
            p.values.reshape(-1)[j] = orig
            numeric = (vals[0] - vals[1]) / (2 * STEP)
            worst = max(worst, _rel(analytic, numeric))
            count += 1
    model.zero_grad()
    return CheckResult(f"end_to_end_N{frames}", worst, threshold, count)


def run_gradcheck(cfg: ModelConfig | None = None, samples: int = 8, seed: int = 0) -> GradcheckReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = op_suite(rng, samples)
    results.append(end_to_end(cfg or ModelConfig(), rng, samples=max(samples // 2, 5), seed=seed))
    return GradcheckReport(results, time.perf_counter() - t0)
