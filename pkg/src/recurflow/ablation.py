"""Ablation harness: train each arm from a shared two-frame pretraining and compare."""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import copy_weights, save_checkpoint
from .data.synthetic import SuiteSpec, generate_suite, suite_preset
from .errors import ConfigError
from .network import ModelConfig, RecurrentFlowNet, count_parameters
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

ARM_METRICS = ("epe_all", "epe_noc", "epe_occ", "fl_all", "occ_f1")
_LABELS = {"none": "2F", "TRFlow": "TRFlow", "TRFeat": "TRFeat"}


@dataclass
class Arm:
    name: str
    config: ModelConfig


def standard_arms(base: ModelConfig, full: bool = False) -> list[Arm]:
    """2F / TRFlow / TRFeat arms with and without occlusion.

    The short list keeps the 2F base without occlusion plus every temporal
    mode with occlusion; ``full`` adds every combination and the unshared decoder.
    """
    arms = []
    shares = (True, False) if full else (base.share_decoder_across_scales,)
    for share in shares:
        for mode in ("none", "TRFlow", "TRFeat"):
            for occ in (False, True):
                if not full and mode != "none" and not occ:
                    continue
                name = _LABELS[mode] + ("+occ" if occ else "") + ("" if share else " unshared")
                cfg = base.replace(temporal_mode=mode, use_occlusion=occ, share_decoder_across_scales=share)
                arms.append(Arm(name, cfg))
    return arms


@dataclass
class AblationReport:
    arms: list[str]
    params: dict[str, int]
    per_seed: dict[str, list[dict]]  # arm -> metrics per seed at n_prime
    n_prime: int
    seeds: list[int]
    sweep: dict[str, dict[int, list[dict]]] = field(default_factory=dict)  # arm -> N' -> per seed

    def median(self, arm: str, metric: str, n_prime: int | None = None) -> float | None:
        rows = self.per_seed[arm] if n_prime is None else self.sweep[arm][n_prime]
        vals = [r.get(metric) for r in rows if r.get(metric) is not None]
        return float(np.median(vals)) if vals else None

    def relative(self, arm: str) -> float:
        base = self.params[self.arms[0]]
        return (self.params[arm] - base) / base

    def format(self) -> str:
        head = f"{'arm':<22}{'params':>10}{'relative':>10}" + "".join(f"{m:>10}" for m in ARM_METRICS)
        lines = [f"# median over seeds {self.seeds}, last pair scored at N'={self.n_prime}", head]
        for arm in self.arms:
            row = f"{arm:<22}{self.params[arm]:>10d}{100 * self.relative(arm):>+9.1f}%"
            for m in ARM_METRICS:
                v = self.median(arm, m)
                row += f"{'NA':>10}" if v is None else f"{v:>10.4f}"
            lines.append(row)
        for arm, by_n in self.sweep.items():
            lines.append(f"# N' sweep for {arm}: epe_all / epe_occ")
            for n in sorted(by_n):
                a, o = self.median(arm, "epe_all", n), self.median(arm, "epe_occ", n)
                lines.append(f"  N'={n}  {a:.4f}  {'NA' if o is None else f'{o:.4f}'}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        """Machine-readable ``arm.metric=value`` lines."""
        out = []
        for arm in self.arms:
            key = arm.replace(" ", "_")
            out.append(f"{key}.params={self.params[arm]}")
            for m in ARM_METRICS:
                v = self.median(arm, m)
                out.append(f"{key}.{m}={'NA' if v is None else f'{v:.6f}'}")
        return "\n".join(out) + "\n"

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["sweep"] = {a: {str(n): rows for n, rows in by.items()} for a, by in self.sweep.items()}
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AblationReport":
        d = json.loads(text)
        d["sweep"] = {a: {int(n): rows for n, rows in by.items()} for a, by in d["sweep"].items()}
        return cls(**d)


def _pretrain_key(cfg: ModelConfig, seed: int) -> tuple:
    # two-frame pretraining never reads the temporal path, so every temporal
    # mode shares one pretrained network
    return (json.dumps(cfg.replace(temporal_mode="none").to_dict(), sort_keys=True), seed)


def run_ablation(
    arms: Sequence[Arm],
    train_data: Sequence,
    val_data: Sequence,
    pretrain: TrainConfig,
    multiframe: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    n_prime: int = 4,
    sweep: dict[str, Sequence[int]] | None = None,
    checkpoint_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> AblationReport:
    """Train every arm for every seed (pretrain, then multi-frame) and score on ``val_data``.

    Arms that differ only in temporal mode start the multi-frame stage from the
    same pretrained weights, which is exact: with the temporal input absent the
    temporal weights get zero gradient and Adam leaves them at their initial value.
    ``sweep`` maps arm names to extra N' values to evaluate.
    """
    if pretrain.stage != "pretrain_2frame" or multiframe.stage != "multiframe":
        raise ConfigError("run_ablation needs a pretrain_2frame stage and a multiframe stage")
    names = [a.name for a in arms]
    if len(set(names)) != len(names):
        raise ConfigError("arm names must be unique")
    sweep = dict(sweep or {})
    say = progress or log.info
    per_seed: dict[str, list[dict]] = {a.name: [] for a in arms}
    sweep_out: dict[str, dict[int, list[dict]]] = {a: {n: [] for n in ns} for a, ns in sweep.items()}
    for seed in seeds:
        cache: dict[tuple, RecurrentFlowNet] = {}
        for arm in arms:
            key = _pretrain_key(arm.config, seed)
            if key not in cache:
                base = RecurrentFlowNet(arm.config.replace(temporal_mode="none"), seed=seed)
                say(f"seed {seed}: two-frame pretraining ({arm.name})")
                train(base, train_data, dataclasses.replace(pretrain, seed=seed))
                cache[key] = base
            model = RecurrentFlowNet(arm.config, seed=seed)
            copy_weights(cache[key], model)
            say(f"seed {seed}: multi-frame stage ({arm.name})")
            train(model, train_data, dataclasses.replace(multiframe, seed=seed))
            per_seed[arm.name].append(evaluate(model, val_data, n_prime).metrics)
            for n in sweep.get(arm.name, ()):
                sweep_out[arm.name][n].append(evaluate(model, val_data, n).metrics)
            if checkpoint_dir is not None:
                d = Path(checkpoint_dir)
                d.mkdir(parents=True, exist_ok=True)
                fname = f"{arm.name.replace(' ', '_').replace('+', '_')}_seed{seed}.ckpt"
                save_checkpoint(model, d / fname, {"arm": arm.name, "seed": seed})
    params = {a.name: count_parameters(a.config)["total"] for a in arms}
    return AblationReport(names, params, per_seed, n_prime, list(seeds), sweep_out)


def parameter_table(base: ModelConfig) -> str:
    """Per-submodule parameter counts of every ablation arm, relative to the first arm."""
    arms = standard_arms(base, full=True)
    keys = ("encoder", "adapter", "estimator", "occlusion_head", "context", "temporal", "decoder", "total")
    counts = [count_parameters(a.config) for a in arms]
    base_total = counts[0]["total"]
    head = f"{'arm':<20}" + "".join(f"{k:>15}" for k in keys) + f"{'relative':>10}"
    lines = [head]
    for a, c in zip(arms, counts):
        rel = 100.0 * (c["total"] - base_total) / base_total
        lines.append(f"{a.name:<20}" + "".join(f"{c[k]:>15d}" for k in keys) + f"{rel:>+9.2f}%")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# the toy-scale plan
# --------------------------------------------------------------------------


def toy_model() -> ModelConfig:
    """Narrow three-level network used for the CPU ablation."""
    return ModelConfig(
        levels=3,
        encoder_widths=(16, 24, 32),
        adapter_width=16,
        estimator_widths=(24, 24, 16),
        context_widths=(24, 24, 24),
        context_dilations=(1, 2, 4, 1),
    )


@dataclass
class AblationPlan:
    model: ModelConfig = field(default_factory=toy_model)
    train_suite: SuiteSpec = field(default_factory=lambda: suite_preset("sprites", height=32, width=32, frames=4))
    val_suite: SuiteSpec = field(default_factory=lambda: suite_preset("sprites", height=32, width=32, frames=6))
    train_count: int = 1024
    val_count: int = 64
    data_seed: int = 1
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(stage="pretrain_2frame"))
    multiframe: TrainConfig = field(default_factory=lambda: TrainConfig(stage="multiframe"))
    seeds: tuple[int, ...] = (0, 1, 2)
    n_prime: int = 4
    sweep: tuple[int, ...] = (2, 3, 4, 5, 6)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train_suite": self.train_suite.to_dict(),
            "val_suite": self.val_suite.to_dict(),
            "train_count": self.train_count,
            "val_count": self.val_count,
            "data_seed": self.data_seed,
            "pretrain": self.pretrain.to_dict(),
            "multiframe": self.multiframe.to_dict(),
            "seeds": list(self.seeds),
            "n_prime": self.n_prime,
            "sweep": list(self.sweep),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationPlan":
        plan = cls()
        for key, value in d.items():
            if key == "model":
                plan.model = ModelConfig.from_dict(value)
            elif key in ("train_suite", "val_suite"):
                setattr(plan, key, SuiteSpec.from_dict(value))
            elif key in ("pretrain", "multiframe"):
                setattr(plan, key, TrainConfig.from_dict(value))
            elif key in ("seeds", "sweep"):
                setattr(plan, key, tuple(int(v) for v in value))
            elif key in ("train_count", "val_count", "data_seed", "n_prime"):
                setattr(plan, key, int(value))
            else:
                raise ConfigError(f"unknown ablation plan key {key!r}")
        return plan

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def run_plan(
    plan: AblationPlan,
    checkpoint_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> AblationReport:
    train_data = generate_suite(plan.train_suite, plan.train_count, plan.data_seed)
    val_data = generate_suite(plan.val_suite, plan.val_count, plan.data_seed + 1000)
    arms = standard_arms(plan.model)
    sweep = {a.name: plan.sweep for a in arms if a.config.temporal_mode == "TRFeat"}
    return run_ablation(
        arms,
        train_data,
        val_data,
        plan.pretrain,
        plan.multiframe,
        plan.seeds,
        plan.n_prime,
        sweep,
        checkpoint_dir,
        progress,
    )


_TRAINING_MODULES = (
    "_kernels.py",
    "tensor.py",
    "flow_ops.py",
    "network.py",
    "losses.py",
    "trainer.py",
    "ablation.py",
    "data/synthetic.py",
)


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr):
            if isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
                node.body = body[1:] or [ast.Pass()]
    return tree


def code_fingerprint() -> str:
    """Hash of the syntax trees of every module that influences training (comments and docstrings ignored)."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for rel in _TRAINING_MODULES:
        tree = _strip_docstrings(ast.parse((root / rel).read_text()))
        h.update(rel.encode() + b"\0" + ast.dump(tree).encode() + b"\0")
    return h.hexdigest()[:16]


def cached_report(
    plan: AblationPlan,
    cache_dir: str | Path,
    checkpoint_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> tuple[AblationReport, Path]:
    """Load the report for (plan, code) from ``cache_dir`` or run the plan and store it there."""
    cache_dir = Path(cache_dir)
    key = f"ablation-{plan.digest()}-{code_fingerprint()}"
    path = cache_dir / f"{key}.json"
    if path.exists():
        return AblationReport.from_json(path.read_text()), path
    report = run_plan(plan, checkpoint_dir=checkpoint_dir or cache_dir / key, progress=progress)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    return report, path
