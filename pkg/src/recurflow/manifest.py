"""Run manifests: what was run, with which resolved config, on which inputs."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

MANIFEST_NAME = "manifest.json"


def content_hash(path) -> str:
    """Git-style tree hash of a file or directory (sha1 over sorted relative paths and blob hashes).

    The manifest file itself is skipped so a directory hash does not depend on
    its own record.
    """
    path = Path(path)
    if path.is_file():
        return _blob_hash(path.read_bytes())
    h = hashlib.sha1()
    for p in sorted(path.rglob("*")):
        if not p.is_file() or p.name == MANIFEST_NAME:
            continue
        rel = p.relative_to(path).as_posix()
        h.update(f"{rel}\0{_blob_hash(p.read_bytes())}\n".encode())
    return h.hexdigest()


def _blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the clock for reproducible builds
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)  # name -> content hash
    outputs: list[str] = field(default_factory=list)
    entries: list[dict] = field(default_factory=list)
    started: str = ""
    finished: str = ""

    def identity(self) -> dict:
        """The fields that determine the outputs (everything except timestamps)."""
        d = asdict(self)
        d.pop("started")
        d.pop("finished")
        return d

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def read(cls, out_dir) -> "RunManifest":
        return cls(**json.loads((Path(out_dir) / MANIFEST_NAME).read_text()))
