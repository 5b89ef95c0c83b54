"""Staged training (two-frame pretraining, then multi-frame), evaluation and the ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, DivergenceError
from .losses import DomainError, GroundTruth, LossWeights, flow_metrics, sequence_loss
from .network import RecurrentFlowNet, full_resolution
from .tensor import Tensor, no_grad, upsample2x

log = logging.getLogger(__name__)

STAGES = ("pretrain_2frame", "multiframe")


@dataclass
class TrainConfig:
    stage: str = "multiframe"
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    halve_start: int = 1000
    halve_every: int = 500
    seq_len: int = 4
    seed: int = 0
    grad_clip: float = 10.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lambda_mode: str = "auto"
    lam: float = 0.05
    auto_fraction: float = 0.5
    printed_bce_order: bool = False
    supervise_last_only: bool = False
    val_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.halve_every < 1:
            raise ConfigError("halve_every must be >= 1")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")

    @property
    def frames_per_sample(self) -> int:
        # two-frame pretraining sees plain image pairs
        return 2 if self.stage == "pretrain_2frame" else self.seq_len

    @property
    def temporal(self) -> bool:
        return self.stage == "multiframe"

    def loss_weights(self, levels: int) -> LossWeights:
        return LossWeights.for_levels(
            levels,
            lam=self.lam,
            lambda_mode=self.lambda_mode,
            auto_fraction=self.auto_fraction,
            printed_bce_order=self.printed_bce_order,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Constant until ``halve_start``, then halved there and every ``halve_every`` iterations."""
    if iteration < cfg.halve_start:
        return cfg.lr
    return cfg.lr * 0.5 ** (1 + (iteration - cfg.halve_start) // cfg.halve_every)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays and advances ``state``.

    Parameters whose gradient is None are left untouched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


def clip_global_norm(grads: dict[str, np.ndarray | None], max_norm: float | None) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    sq = sum(float(np.vdot(g, g)) for g in grads.values() if g is not None)
    norm = float(np.sqrt(sq))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return norm


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


def _stack_window(dataset, picks, n):
    frames = [Tensor(np.stack([dataset[i].frames[s + k] for i, s in picks])) for k in range(n)]
    flows = [np.stack([dataset[i].flow[s + k] for i, s in picks]) for k in range(n - 1)]
    occs = [np.stack([dataset[i].occ[s + k] for i, s in picks]) for k in range(n - 1)]
    return frames, flows, occs


def sample_batch(dataset: Sequence, batch_size: int, n: int, rng: np.random.Generator, last_only: bool = False):
    """Random windows of ``n`` consecutive frames; returns (frames, ground truths)."""
    picks = []
    for _ in range(batch_size):
        i = int(rng.integers(len(dataset)))
        s = int(rng.integers(dataset[i].length - n + 1))
        picks.append((i, s))
    frames, flows, occs = _stack_window(dataset, picks, n)
    gts = []
    for k in range(n - 1):
        if last_only and k < n - 2:
            gts.append(GroundTruth(None))
        else:
            gts.append(GroundTruth(flows[k], occs[k]))
    return frames, gts


def _check_dataset(dataset: Sequence, n: int) -> None:
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    short = [i for i, s in enumerate(dataset) if s.length < n]
    if short:
        raise ContractError(f"{len(short)} sequences are shorter than the required {n} frames (first: #{short[0]})")


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    curve: list[tuple[int, float, float]]  # (iteration, loss, lr)
    validation: list[tuple[int, dict]] = field(default_factory=list)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "lr"])
        for it, loss, lr in self.curve:
            w.writerow([it, repr(loss), repr(lr)])
        return buf.getvalue()


def train_step(model: RecurrentFlowNet, frames, gts, cfg: TrainConfig, weights: LossWeights):
    model.zero_grad()
    out = model.forward_sequence(frames, temporal=cfg.temporal)
    flows = [p.flows for p in out.pairs]
    occs = [p.occlusions for p in out.pairs]
    parts = sequence_loss(flows, occs, gts, weights)
    parts.total.backward()
    return parts


def _diverged(model: RecurrentFlowNet, diag_dir, it: int, loss: float, why: str):
    if diag_dir is not None:
        Path(diag_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, Path(diag_dir) / "diverged.ckpt", {"iteration": it, "loss": repr(loss)})
    raise DivergenceError(f"{why} at iteration {it} (loss={loss})")


def train(
    model: RecurrentFlowNet,
    dataset: Sequence,
    cfg: TrainConfig,
    val_dataset: Sequence | None = None,
    diag_dir: str | Path | None = None,
    on_iteration: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps; deterministic given ``cfg.seed``.

    A non-finite loss or gradient raises DivergenceError after writing
    ``diverged.ckpt`` into ``diag_dir`` (when given).
    """
    cfg.validate()
    n = cfg.frames_per_sample
    _check_dataset(dataset, n)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    weights = cfg.loss_weights(model.config.levels)
    named = model.named_parameters()
    state = AdamState()
    result = TrainResult([])

    for it in range(cfg.iterations):
        lr = lr_at(cfg, it)
        frames, gts = sample_batch(dataset, cfg.batch_size, n, rng, cfg.supervise_last_only)
        try:
            parts = train_step(model, frames, gts, cfg, weights)
        except DomainError as exc:
            # a sigmoid only leaves [0, 1] through NaN, i.e. the weights blew up
            _diverged(model, diag_dir, it, float("nan"), str(exc))
        loss = parts.total.item()
        grads = {k: p.grad for k, p in named.items()}
        finite = np.isfinite(loss) and all(g is None or np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            _diverged(model, diag_dir, it, loss, "non-finite loss or gradient")
        clip_global_norm(grads, cfg.grad_clip)
        new = optimizer_step({k: p.values for k, p in named.items()}, grads, state, lr, cfg.betas, cfg.eps)
        for k, p in named.items():
            p.values = new[k]
        result.curve.append((it, loss, lr))
        if on_iteration is not None:
            on_iteration(it, loss, lr)
        if val_dataset is not None and cfg.val_every and (it + 1) % cfg.val_every == 0:
            n_eval = min(cfg.seq_len, min(s.length for s in val_dataset))
            result.validation.append((it + 1, evaluate(model, val_dataset, n_eval).metrics))
    model.zero_grad()
    return result


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalResult:
    metrics: dict
    per_sample: list[dict]
    flows: np.ndarray  # (S, 2, H, W) full-resolution predictions of the scored pair
    occlusions: np.ndarray | None


def predict_last(model: RecurrentFlowNet, frames: Sequence[Tensor]) -> tuple[np.ndarray, np.ndarray | None]:
    """Full-resolution flow and occlusion of the last pair of ``frames`` (no graph is recorded)."""
    with no_grad():
        out = model.forward_sequence(frames, temporal=True)
        last = out.pairs[-1]
        flow = full_resolution(last.flow).values
        occ = None
        if last.occlusion is not None:
            occ = upsample2x(last.occlusion).values
    return flow, occ


def evaluate(model: RecurrentFlowNet, dataset: Sequence, n_prime: int, batch_size: int = 8) -> EvalResult:
    """Run the last ``n_prime`` frames of each sequence and score only the final pair.

    Metrics pool every pixel of every scored pair.
    """
    if n_prime < 2:
        raise ContractError(f"n_prime must be >= 2, got {n_prime}")
    _check_dataset(dataset, n_prime)
    preds, occ_preds, gts, occ_gts = [], [], [], []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        frames = [Tensor(np.stack([s.frames[s.length - n_prime + k] for s in chunk])) for k in range(n_prime)]
        flow, occ = predict_last(model, frames)
        preds.append(flow)
        occ_preds.append(occ)
        gts.append(np.stack([s.flow[-1] for s in chunk]))
        occ_gts.append(np.stack([s.occ[-1] for s in chunk]))
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    occ_gt = np.concatenate(occ_gts)
    occ_pred = None if occ_preds[0] is None else np.concatenate(occ_preds)
    metrics = flow_metrics(pred, gt, occ_gt=occ_gt, occ_pred=occ_pred)
    metrics["n_prime"] = n_prime
    metrics["samples"] = len(dataset)
    per_sample = []
    for i in range(len(dataset)):
        m = flow_metrics(pred[i], gt[i], occ_gt=occ_gt[i], occ_pred=None if occ_pred is None else occ_pred[i])
        m["index"] = i
        per_sample.append(m)
    return EvalResult(metrics, per_sample, pred, occ_pred)


def zero_flow_metrics(dataset: Sequence) -> dict:
    gt = np.stack([s.flow[-1] for s in dataset])
    occ = np.stack([s.occ[-1] for s in dataset])
    return flow_metrics(np.zeros_like(gt), gt, occ_gt=occ)
