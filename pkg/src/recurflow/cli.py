"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 divergence, 4 incompatibility,
5 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .data import flowio
from .data.store import load_dataset, save_dataset
from .data.synthetic import SceneSpec, SuiteSpec, generate, generate_suite, suite_preset
from .data.viz import flow_to_color
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    FormatError,
    IncompatibilityError,
)
from .gradcheck import run_gradcheck
from .losses import format_report
from .manifest import RunManifest, content_hash, timestamp
from .network import ModelConfig, RecurrentFlowNet
from .tensor import Tensor, no_grad, upsample2x
from .ablation import AblationPlan, parameter_table, run_plan
from .trainer import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_INCOMPATIBLE = 4
EXIT_VERIFY = 5

OUT_ENV = "RECURFLOW_OUT"

log = logging.getLogger("recurflow")


class VerificationFailed(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _out_dir(args, command: str, identity: dict) -> Path:
    if args.out is not None:
        return Path(args.out)
    digest = hashlib.sha1(json.dumps(identity, sort_keys=True).encode()).hexdigest()[:10]
    return Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{digest}"


def _model_config(data: dict) -> ModelConfig:
    return ModelConfig.from_dict(data.get("model", {}))


def _stages(data: dict) -> list[TrainConfig]:
    if "stages" in data:
        stages = [TrainConfig.from_dict(s) for s in data["stages"]]
    else:
        stages = [TrainConfig.from_dict(data.get("train", {}))]
    for s in stages:
        s.validate()
    return stages


def _write_text(path: Path, text: str) -> None:
    path.write_text(text)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _samples_from_spec(spec: dict, count: int, seed: int):
    if "scene" in spec:
        scene = SceneSpec.from_dict(spec["scene"])
        frames = int(spec.get("frames", 4))
        return [generate(scene, frames, seed + i) for i in range(count)], {"scene": scene.to_dict(), "frames": frames}
    suite_d = dict(spec.get("suite", {}))
    preset = suite_d.pop("preset", None)
    suite = suite_preset(preset, **suite_d) if preset else SuiteSpec.from_dict(suite_d)
    suite.validate()
    return generate_suite(suite, count, seed), {"suite": suite.to_dict()}


def cmd_generate(args) -> int:
    spec = _read_json(args.spec)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    try:
        samples, resolved = _samples_from_spec(spec, args.count, args.seed)
    except TypeError as e:
        raise ConfigError(f"invalid spec: {e}") from e
    identity = {"spec": resolved, "count": args.count, "seed": args.seed}
    out = _out_dir(args, "generate", identity)
    out.mkdir(parents=True, exist_ok=True)
    started = timestamp()
    entries = save_dataset(samples, out)
    m = RunManifest(
        command="generate",
        config={**resolved, "count": args.count},
        seed=args.seed,
        inputs={"spec": content_hash(args.spec)},
        outputs=[e["name"] for e in entries],
        entries=entries,
        started=started,
        finished=timestamp(),
    )
    m.write(out)
    print(f"wrote {len(entries)} sequences to {out}")
    print(f"content_hash={content_hash(out)}")
    return EXIT_OK


def _load_data(path) -> list:
    if path is None:
        raise ConfigError("a data directory is required")
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"data directory {p} does not exist")
    return load_dataset(p)


def cmd_train(args) -> int:
    cfg_data = _read_json(args.config)
    model_cfg = _model_config(cfg_data)
    stages = _stages(cfg_data)
    seed = int(cfg_data.get("seed", stages[0].seed))
    if "seed" in cfg_data:
        stages = [dataclasses.replace(s, seed=seed) for s in stages]
    data = _load_data(args.data)
    val = _load_data(args.val) if args.val else None
    _check_images(model_cfg, data[0].frames.shape)

    identity = {
        "model": model_cfg.to_dict(),
        "stages": [s.to_dict() for s in stages],
        "seed": seed,
        "data": content_hash(args.data),
    }
    out = _out_dir(args, "train", identity)
    out.mkdir(parents=True, exist_ok=True)
    started = timestamp()

    if args.init:
        model, _ = load_checkpoint(args.init)
        if config_hash(model.config) != config_hash(model_cfg):
            raise IncompatibilityError("--init checkpoint config differs from the training config")
    else:
        model = RecurrentFlowNet(model_cfg, seed=seed)
    outputs = []
    for i, stage in enumerate(stages):
        name = f"loss_{i}_{stage.stage}.csv"
        try:
            res = train(model, data, stage, val_dataset=val, diag_dir=out)
        except DivergenceError:
            _write_text(out / "diverged.txt", f"stage={stage.stage}\n")
            raise
        _write_text(out / name, res.curve_csv())
        outputs.append(name)
        if res.validation:
            vname = f"val_{i}_{stage.stage}.txt"
            _write_text(out / vname, "".join(format_report(m, prefix=f"it{it}.") for it, m in res.validation))
            outputs.append(vname)
        print(f"stage {stage.stage}: {stage.iterations} iterations, final loss {res.curve[-1][1]:.6f}" if res.curve else f"stage {stage.stage}: 0 iterations")
    save_checkpoint(model, out / "model.ckpt", {"stages": [s.to_dict() for s in stages]})
    outputs.append("model.ckpt")
    RunManifest(
        command="train",
        config={"model": model_cfg.to_dict(), "stages": [s.to_dict() for s in stages]},
        seed=seed,
        inputs={"config": content_hash(args.config), "data": identity["data"]}
        | ({"init": content_hash(args.init)} if args.init else {}),
        outputs=outputs,
        started=started,
        finished=timestamp(),
    ).write(out)
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def _check_images(cfg: ModelConfig, frames_shape) -> None:
    c, h, w = frames_shape[-3:]
    if c != cfg.in_channels:
        raise IncompatibilityError(f"data has {c} channels, model expects {cfg.in_channels}")
    d = cfg.downsample
    if h % d or w % d:
        raise IncompatibilityError(f"data frames {h}x{w} are not divisible by 2^levels = {d}")


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if args.config:
        want = _model_config(_read_json(args.config))
        if config_hash(want) != config_hash(model.config):
            raise IncompatibilityError(
                f"checkpoint config hash {config_hash(model.config)} != requested {config_hash(want)}"
            )
    data = _load_data(args.data)
    _check_images(model.config, data[0].frames.shape)
    if args.frames < 2:
        raise ContractError("--frames must be >= 2")
    identity = {"checkpoint": content_hash(args.checkpoint), "data": content_hash(args.data), "frames": args.frames}
    out = _out_dir(args, "eval", identity)
    out.mkdir(parents=True, exist_ok=True)
    started = timestamp()
    res = evaluate(model, data, args.frames)
    summary = f"metrics_N{args.frames}.txt"
    _write_text(out / summary, format_report(res.metrics))
    outputs = [summary]
    if args.per_sample:
        name = f"per_sample_N{args.frames}.csv"
        keys = ["index", "epe_all", "epe_noc", "epe_occ", "fl_all", "occ_f1"]
        with open(out / name, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(keys)
            for row in res.per_sample:
                w.writerow(["NA" if row.get(k) is None else row.get(k) for k in keys])
        outputs.append(name)
    if args.viz:
        vdir = out / f"viz_N{args.frames}"
        vdir.mkdir(exist_ok=True)
        for i, flow in enumerate(res.flows):
            flowio.write_png8(flow_to_color(flow), vdir / f"pair_{i:04d}.png")
            outputs.append(f"{vdir.name}/pair_{i:04d}.png")
    RunManifest(
        command="eval",
        config={"model": model.config.to_dict(), "frames": args.frames},
        seed=model.seed,
        inputs={"checkpoint": identity["checkpoint"], "data": identity["data"]},
        outputs=outputs,
        started=started,
        finished=timestamp(),
    ).write(out)
    sys.stdout.write(format_report(res.metrics))
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if len(args.frames) < 2:
        raise ContractError("infer needs at least 2 frames")
    images = [flowio.read_image(p) for p in args.frames]
    shape = images[0].shape
    for p, im in zip(args.frames, images):
        if im.shape != shape:
            raise DimensionError(f"{p}: size {im.shape[1:]} differs from {shape[1:]}")
    d = model.config.downsample
    if shape[1] % d or shape[2] % d:
        raise DimensionError(f"frame size {shape[1]}x{shape[2]} is not divisible by 2^levels = {d}")
    with no_grad():
        out = model.forward_sequence([Tensor(im[None]) for im in images], temporal=True)
        last = out.pairs[-1]
        flow = (upsample2x(last.flow) * 2.0).values[0]
        occ = upsample2x(last.occlusion).values[0, 0] if last.occlusion is not None else None
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    flowio.write_flo(flow, out_path)
    if args.occ:
        if occ is None:
            raise IncompatibilityError("checkpoint has no occlusion output")
        flowio.write_png8(np.round(np.clip(occ, 0, 1) * 255).astype(np.uint8), args.occ)
    print(f"temporal_steps={len(out.backward_flows) if model.config.temporal_mode != 'none' else 0}")
    print(f"mean_abs_flow={float(np.mean(np.sqrt(flow[0] ** 2 + flow[1] ** 2))):.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _model_config(_read_json(args.config)) if args.config else ModelConfig()
    report = run_gradcheck(cfg, samples=args.samples, seed=args.seed)
    sys.stdout.write(report.format())
    if not report.passed:
        worst = ", ".join(f"{r.name} ({r.max_rel_error:.2e})" for r in report.failures())
        raise VerificationFailed(f"gradient check failed: {worst}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _model_config(_read_json(args.config)) if args.config else ModelConfig()
    sys.stdout.write(parameter_table(cfg))
    return EXIT_OK


def cmd_ablate(args) -> int:
    plan = AblationPlan.from_dict(_read_json(args.plan)) if args.plan else AblationPlan()
    out = _out_dir(args, "ablate", plan.to_dict())
    out.mkdir(parents=True, exist_ok=True)
    started = timestamp()
    report = run_plan(plan, checkpoint_dir=out / "checkpoints", progress=lambda m: print(m, flush=True))
    _write_text(out / "report.txt", report.format())
    _write_text(out / "summary.txt", report.summary())
    _write_text(out / "report.json", report.to_json() + "\n")
    RunManifest(
        command="ablate",
        config=plan.to_dict(),
        seed=plan.seeds[0],
        inputs={"plan": content_hash(args.plan)} if args.plan else {},
        outputs=["report.txt", "summary.txt", "report.json", "checkpoints"],
        started=started,
        finished=timestamp(),
    ).write(out)
    sys.stdout.write(report.format())
    return EXIT_OK


def cmd_convert(args) -> int:
    src, dst = Path(args.src), Path(args.dst)
    if not src.is_file():
        raise FileNotFoundError(f"{src} does not exist")
    if src.suffix == ".flo":
        flow = flowio.read_flo(src)
        valid = None
    elif src.suffix == ".png":
        flow, valid = flowio.read_kitti_png(src)
    else:
        raise ConfigError(f"unknown input format {src.suffix!r}")
    if dst.suffix == ".flo":
        flowio.write_flo(flow, dst)
    elif dst.suffix == ".png":
        if args.color:
            flowio.write_png8(flow_to_color(flow), dst)
        else:
            flowio.write_kitti_png(flow, dst, valid)
    else:
        raise ConfigError(f"unknown output format {dst.suffix!r}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recurflow", description="Multi-frame optical flow toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("spec", help="JSON file with a 'suite' or a 'scene' (+ 'frames') object")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model (one or more stages)")
    t.add_argument("config", help="JSON with 'model' and 'train' or 'stages'")
    t.add_argument("--data", required=True)
    t.add_argument("--val", default=None)
    t.add_argument("--init", default=None, help="start from this checkpoint")
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score the last pair of each sequence")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--frames", type=int, default=2, help="frames N' fed to the model")
    e.add_argument("--config", default=None, help="require the checkpoint to match this config")
    e.add_argument("--per-sample", action="store_true")
    e.add_argument("--viz", action="store_true")
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="flow of the last pair of a frame sequence")
    i.add_argument("checkpoint")
    i.add_argument("frames", nargs="+")
    i.add_argument("--out", required=True, help="output .flo path")
    i.add_argument("--occ", default=None, help="optional occlusion PNG path")
    i.set_defaults(fn=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    c.add_argument("config", nargs="?", default=None)
    c.add_argument("--samples", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    pp = sub.add_parser("params", help="parameter counts of every ablation arm")
    pp.add_argument("config", nargs="?", default=None)
    pp.set_defaults(fn=cmd_params)

    a = sub.add_parser("ablate", help="train and compare the ablation arms")
    a.add_argument("plan", nargs="?", default=None, help="JSON overrides of the default toy plan")
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_ablate)

    v = sub.add_parser("convert", help="convert between .flo and KITTI PNG flow files")
    v.add_argument("src")
    v.add_argument("dst")
    v.add_argument("--color", action="store_true", help="write a colour-coded PNG instead")
    v.set_defaults(fn=cmd_convert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except IncompatibilityError as e:
        print(f"error: incompatible input: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except VerificationFailed as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, ContractError, DimensionError, FormatError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
