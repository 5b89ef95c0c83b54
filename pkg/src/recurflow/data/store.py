"""Datasets on disk: one directory per sequence plus a manifest at the root.

    <root>/manifest.json
    <root>/seq_0000/frame_00.png   16-bit RGB
    <root>/seq_0000/flow_00.flo    forward flow frame 0 -> 1
    <root>/seq_0000/occ_00.png     8-bit occlusion mask (255 = occluded)
    <root>/seq_0000/scene.json     SceneSpec of the sequence
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from ..errors import FormatError
from .flowio import read_flo, read_image, write_flo, write_image, write_png8
from .synthetic import SceneSpec, SequenceSample


def save_sequence(sample: SequenceSample, seq_dir: Path) -> list[str]:
    seq_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for t in range(sample.length):
        name = f"frame_{t:02d}.png"
        write_image(sample.frames[t], seq_dir / name)
        files.append(name)
    for t in range(sample.length - 1):
        write_flo(sample.flow[t], seq_dir / f"flow_{t:02d}.flo")
        write_png8((sample.occ[t, 0] > 0.5).astype(np.uint8) * 255, seq_dir / f"occ_{t:02d}.png")
        files += [f"flow_{t:02d}.flo", f"occ_{t:02d}.png"]
    if sample.meta is not None:
        (seq_dir / "scene.json").write_text(json.dumps(sample.meta.to_dict(), sort_keys=True, indent=1) + "\n")
        files.append("scene.json")
    return files


def save_dataset(samples: list[SequenceSample], root: Path) -> list[dict]:
    """Write every sample; returns manifest entries (one per sequence)."""
    root = Path(root)
    entries = []
    for i, s in enumerate(samples):
        name = f"seq_{i:04d}"
        files = save_sequence(s, root / name)
        entries.append({"name": name, "frames": int(s.length), "files": files})
    return entries


def load_sequence(seq_dir: Path) -> SequenceSample:
    seq_dir = Path(seq_dir)
    frame_paths = sorted(seq_dir.glob("frame_*.png"))
    if len(frame_paths) < 2:
        raise FormatError(f"{seq_dir}: need at least 2 frames, found {len(frame_paths)}")
    frames = np.stack([read_image(p) for p in frame_paths])
    flows, occs = [], []
    for t in range(len(frame_paths) - 1):
        fp = seq_dir / f"flow_{t:02d}.flo"
        op = seq_dir / f"occ_{t:02d}.png"
        if not fp.exists() or not op.exists():
            raise FormatError(f"{seq_dir}: missing ground truth for pair {t}")
        flows.append(read_flo(fp))
        occ = cv2.imread(str(op), cv2.IMREAD_UNCHANGED)
        if occ is None:
            raise FormatError(f"cannot decode {op}")
        occs.append((occ > 127).astype(np.float64)[None])
    meta = None
    scene = seq_dir / "scene.json"
    if scene.exists():
        meta = SceneSpec.from_dict(json.loads(scene.read_text()))
    return SequenceSample(frames, np.stack(flows), np.stack(occs), meta)


def load_dataset(root: Path) -> list[SequenceSample]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    manifest = root / "manifest.json"
    if manifest.exists():
        names = [e["name"] for e in json.loads(manifest.read_text()).get("entries", [])]
    else:
        names = sorted(p.name for p in root.iterdir() if p.is_dir() and p.name.startswith("seq_"))
    if not names:
        raise FormatError(f"{root}: no sequences found")
    return [load_sequence(root / n) for n in names]
