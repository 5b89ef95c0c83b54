"""Multi-frame, multi-scale training objective and the evaluation metrics.

Training losses operate on Tensors (differentiable); metrics operate on
plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, clip, log, sqrt, tsum

# PWC-Net style pyramid weights, coarse to fine
DEFAULT_ALPHAS = (0.32, 0.08, 0.02, 0.01, 0.005, 0.0025)
BCE_EPS = 1e-7


class DomainError(ContractError):
    """Probability input outside [0, 1]."""


@dataclass
class LossWeights:
    alpha: tuple[float, ...] = (0.32, 0.08, 0.02, 0.01)
    lam: float = 0.05
    lambda_mode: str = "auto"  # "fixed" or "auto"
    auto_fraction: float = 0.5
    printed_bce_order: bool = False

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        if any(a <= 0 for a in self.alpha):
            raise ContractError("alpha coefficients must be positive")
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.lambda_mode not in ("fixed", "auto"):
            raise ContractError(f"lambda_mode must be 'fixed' or 'auto', got {self.lambda_mode!r}")

    @classmethod
    def for_levels(cls, levels: int, **kw) -> "LossWeights":
        return cls(alpha=DEFAULT_ALPHAS[:levels], **kw)


@dataclass
class GroundTruth:
    """Full-resolution targets of one frame pair; ``flow`` None means unannotated."""

    flow: np.ndarray | None
    occ: np.ndarray | None = None
    valid: np.ndarray | None = None


@dataclass
class LossParts:
    total: Tensor
    flow: float
    occ: float
    lam: float
    per_step: list[float] = field(default_factory=list)


# --------------------------------------------------------------------------
# ground-truth pyramids
# --------------------------------------------------------------------------


def downsample_flow(flow: np.ndarray, steps: int) -> np.ndarray:
    """Average-pool ``steps`` times by 2, halving displacement values each time."""
    for _ in range(steps):
        b, c, h, w = flow.shape
        flow = flow.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)) * 0.5
    return flow


def downsample_occ(occ: np.ndarray, steps: int) -> np.ndarray:
    """Max-pool by 2: a coarse pixel is occluded if any child is."""
    for _ in range(steps):
        b, c, h, w = occ.shape
        occ = occ.reshape(b, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
    return occ


def downsample_valid(valid: np.ndarray, steps: int) -> np.ndarray:
    for _ in range(steps):
        b, c, h, w = valid.shape
        valid = valid.reshape(b, c, h // 2, 2, w // 2, 2).min(axis=(3, 5))
    return valid


# --------------------------------------------------------------------------
# per-level losses
# --------------------------------------------------------------------------


def flow_loss(pred: Tensor, gt, valid=None) -> Tensor:
    """Sum over pixels (and batch) of the Euclidean norm of the flow error."""
    gt_v = gt.values if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if pred.shape != gt_v.shape:
        raise DimensionError(f"flow_loss: prediction shape {pred.shape} != ground truth {gt_v.shape}")
    diff = pred - Tensor(gt_v)
    norm = sqrt(tsum(diff * diff, axis=1, keepdims=True))
    if valid is not None:
        norm = norm * Tensor(np.asarray(valid, dtype=np.float64))
    return tsum(norm)


def occ_weights(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample class weights (w, w_bar) from prediction and target sums."""
    hw = pred.shape[-1] * pred.shape[-2]
    axes = tuple(range(1, pred.ndim))
    w = hw / (pred.sum(axis=axes) + gt.sum(axis=axes))
    wbar = hw / ((1.0 - pred).sum(axis=axes) + (1.0 - gt).sum(axis=axes))
    return w, wbar


def occ_loss(pred: Tensor, gt, printed_order: bool = False) -> Tensor:
    """Class-balanced binary cross-entropy, summed over pixels and batch.

    The balancing weights depend on the prediction and stay inside the graph.
    ``printed_order`` swaps prediction and target inside the logarithms.
    """
    gt_v = gt.values if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if pred.shape != gt_v.shape:
        raise DimensionError(f"occ_loss: prediction shape {pred.shape} != ground truth {gt_v.shape}")
    pv = pred.values
    if np.isnan(pv).any() or (pv < 0).any() or (pv > 1).any():
        raise DomainError("occ_loss: predicted probabilities must lie in [0, 1]")
    hw = float(pred.shape[-1] * pred.shape[-2])
    g = Tensor(gt_v)
    ps = tsum(pred, axis=(1, 2, 3), keepdims=True)
    gs = Tensor(gt_v.sum(axis=(1, 2, 3), keepdims=True))
    w = hw / (ps + gs)
    wbar = hw / ((hw - ps) + (hw - gs))
    if printed_order:
        gc = np.clip(gt_v, BCE_EPS, 1.0 - BCE_EPS)
        pos = w * pred * Tensor(np.log(gc))
        neg = wbar * (1.0 - pred) * Tensor(np.log1p(-gc))
    else:
        pc = clip(pred, BCE_EPS, 1.0 - BCE_EPS)
        pos = w * g * log(pc)
        neg = wbar * (1.0 - g) * log(1.0 - pc)
    return tsum(pos + neg) * -0.5


def sequence_loss(
    flows: Sequence[Sequence[Tensor]],
    occs: Sequence[Sequence[Tensor | None]] | None,
    gts: Sequence[GroundTruth],
    weights: LossWeights,
) -> LossParts:
    """(1/T) sum_t sum_l alpha_l (flow_l + lambda * occ_l), averaged over the batch.

    ``flows[t][l]`` is the level-``l`` prediction (coarse first) for pair ``t``.
    Pairs whose ground truth has ``flow is None`` are unannotated and add zero.
    """
    steps = len(flows)
    if len(gts) != steps:
        raise ContractError(f"sequence_loss: {len(gts)} ground truths for {steps} predicted steps")
    if not any(gt.flow is not None for gt in gts):
        raise ContractError("sequence_loss: no supervised step")
    levels = len(flows[0])
    if len(weights.alpha) != levels:
        raise ContractError(f"sequence_loss: {len(weights.alpha)} alpha values for {levels} levels")

    flow_terms: list[Tensor] = []
    occ_terms: list[Tensor] = []
    per_step: list[float] = []
    for t in range(steps):
        gt = gts[t]
        if gt.flow is None:
            per_step.append(0.0)
            continue
        full_h = gt.flow.shape[-2]
        step_val = 0.0
        for lvl in range(levels):
            pred = flows[t][lvl]
            down = int(round(np.log2(full_h / pred.shape[-2])))
            gflow = downsample_flow(gt.flow, down)
            gvalid = downsample_valid(gt.valid, down) if gt.valid is not None else None
            fl = flow_loss(pred, gflow, gvalid) * weights.alpha[lvl]
            flow_terms.append(fl)
            step_val += fl.item()
            o = occs[t][lvl] if occs is not None else None
            if o is not None and gt.occ is not None:
                oc = occ_loss(o, downsample_occ(gt.occ, down), weights.printed_bce_order) * weights.alpha[lvl]
                occ_terms.append(oc)
        per_step.append(step_val)

    flow_sum = flow_terms[0]
    for term in flow_terms[1:]:
        flow_sum = flow_sum + term
    flow_val = flow_sum.item()
    if occ_terms:
        occ_sum = occ_terms[0]
        for term in occ_terms[1:]:
            occ_sum = occ_sum + term
        occ_val = occ_sum.item()
        if weights.lambda_mode == "auto":
            lam = weights.auto_fraction * flow_val / occ_val if occ_val > 0 else 0.0
        else:
            lam = weights.lam
        total = flow_sum + occ_sum * lam
    else:
        occ_val = 0.0
        lam = 0.0
        total = flow_sum
    batch = flows[0][0].shape[0]
    total = total * (1.0 / (steps * batch))
    return LossParts(total, flow_val / (steps * batch), occ_val / (steps * batch), lam, per_step)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _check_flow_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} != ground truth {gt.shape}")


def endpoint_error_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel ||pred - gt|| over the channel axis (axis -3)."""
    _check_flow_pair(pred, gt)
    d = pred - gt
    return np.sqrt(d[..., 0, :, :] ** 2 + d[..., 1, :, :] ** 2)


def _mask_like(mask, err):
    if mask is None:
        return np.ones_like(err, dtype=bool)
    m = np.asarray(mask)
    if m.ndim == err.ndim + 1:
        m = m[..., 0, :, :]
    return m.astype(bool).reshape(err.shape)


def epe(pred: np.ndarray, gt: np.ndarray, mask=None) -> float | None:
    """Mean endpoint error over masked pixels; None if the mask is empty."""
    err = endpoint_error_map(pred, gt)
    m = _mask_like(mask, err)
    if not m.any():
        return None
    return float(err[m].mean())


def fl_all(pred: np.ndarray, gt: np.ndarray, valid=None) -> float | None:
    """Percentage of valid pixels whose endpoint error exceeds 3 px."""
    err = endpoint_error_map(pred, gt)
    m = _mask_like(valid, err)
    n = int(m.sum())
    if n == 0:
        return None
    return 100.0 * float((err[m] > 3.0).sum()) / n


def occlusion_f1(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """F1 of the occluded class after thresholding (``pred > threshold``).

    With no occluded pixel in either the target or the prediction the score is
    defined as 1.
    """
    if pred.shape != gt.shape:
        raise DimensionError(f"occlusion_f1: prediction shape {pred.shape} != ground truth {gt.shape}")
    p = np.asarray(pred) > threshold
    g = np.asarray(gt) > 0.5
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    if tp + fp + fn == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def flow_metrics(pred: np.ndarray, gt: np.ndarray, occ_gt=None, valid=None, occ_pred=None) -> dict:
    """EPE all/noc/occ, Fl-all and (optionally) occlusion F1 for one batch."""
    err = endpoint_error_map(pred, gt)
    valid_m = _mask_like(valid, err)
    out = {"epe_all": epe(pred, gt, valid_m), "fl_all": fl_all(pred, gt, valid_m)}
    if occ_gt is not None:
        occ_m = _mask_like(occ_gt, err)
        out["epe_noc"] = epe(pred, gt, valid_m & ~occ_m)
        out["epe_occ"] = epe(pred, gt, valid_m & occ_m)
        if occ_pred is not None:
            out["occ_f1"] = occlusion_f1(occ_pred, occ_gt)
    return out


def format_report(metrics: dict, prefix: str = "") -> str:
    """One ``key=value`` line per metric, sorted; absent values print as ``NA``."""
    lines = []
    for key in sorted(metrics):
        v = metrics[key]
        if v is None:
            text = "NA"
        elif isinstance(v, float):
            text = f"{v:.6f}"
        else:
            text = str(v)
        lines.append(f"{prefix}{key}={text}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out: dict = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        if val == "NA":
            out[key] = None
            continue
        try:
            out[key] = int(val)
        except ValueError:
            try:
                out[key] = float(val)
            except ValueError:
                out[key] = val
    return out
