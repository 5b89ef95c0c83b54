"""Versioned single-file checkpoint: header JSON + raw little-endian float64 payload.

    bytes 0-7    magic b"RFLOWCKP"
    bytes 8-11   format version (uint32 LE)
    bytes 12-19  header length n (uint64 LE)
    next n bytes UTF-8 JSON: model config, parameter table, free-form meta
    remainder    parameter values in table order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .network import ModelConfig, RecurrentFlowNet

MAGIC = b"RFLOWCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def encode_checkpoint(model: RecurrentFlowNet, meta: dict | None = None) -> bytes:
    params = sorted(model.named_parameters().items())
    table = []
    offset = 0
    for name, p in params:
        table.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size
    header = {
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "seed": model.seed,
        "params": table,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p.values, dtype="<f8").tobytes() for _, p in params)
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def decode_checkpoint(data: bytes) -> tuple[RecurrentFlowNet, dict]:
    if len(data) < _PREFIX.size:
        raise FormatError("checkpoint truncated inside the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise FormatError("checkpoint truncated inside the header")
    header = json.loads(data[start : start + hlen].decode())
    payload = data[start + hlen :]
    model = RecurrentFlowNet(ModelConfig.from_dict(header["config"]), seed=header.get("seed", 0))
    named = model.named_parameters()
    if set(named) != {e["name"] for e in header["params"]}:
        raise FormatError("checkpoint parameter names do not match its config")
    total = sum(int(np.prod(e["shape"])) for e in header["params"])
    if len(payload) != 8 * total:
        raise FormatError(f"checkpoint payload has {len(payload)} bytes, expected {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8")
    for e in header["params"]:
        p = named[e["name"]]
        n = int(np.prod(e["shape"]))
        if list(p.shape) != e["shape"]:
            raise FormatError(f"shape mismatch for {e['name']}: {p.shape} vs {e['shape']}")
        p.values = flat[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return model, header.get("meta", {})


def save_checkpoint(model: RecurrentFlowNet, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, meta))


def load_checkpoint(path) -> tuple[RecurrentFlowNet, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def copy_weights(src: RecurrentFlowNet, dst: RecurrentFlowNet) -> list[str]:
    """Copy every parameter present in both models by name; returns the copied names."""
    a = src.named_parameters()
    copied = []
    for name, p in dst.named_parameters().items():
        if name in a:
            if a[name].shape != p.shape:
                raise FormatError(f"cannot copy {name}: {a[name].shape} vs {p.shape}")
            p.values = a[name].values.copy()
            copied.append(name)
    return copied
