"""Flow file formats: Middlebury ``.flo`` and KITTI 16-bit PNG.

Flow arrays are channel-first, shape (2, H, W): channel 0 horizontal, 1 vertical.
"""

from __future__ import annotations

import os
import struct

import cv2
import numpy as np

from ..errors import FormatError

FLO_MAGIC = 202021.25
_HEADER = struct.Struct("<fii")
KITTI_OFFSET = 2**15
KITTI_SCALE = 64.0


def encode_flo(flow: np.ndarray) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must have shape (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    payload = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes()
    return _HEADER.pack(FLO_MAGIC, w, h) + payload


def decode_flo(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated .flo header: {len(data)} bytes, need {_HEADER.size} (offset {len(data)})")
    magic, w, h = _HEADER.unpack_from(data, 0)
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad .flo magic {magic!r} at offset 0")
    if w < 0 or h < 0:
        raise FormatError(f"negative .flo dimensions {w}x{h} at offset 4")
    need = _HEADER.size + 8 * w * h
    if len(data) < need:
        raise FormatError(f"truncated .flo payload: file ends at byte offset {len(data)}, expected {need}")
    if len(data) > need:
        raise FormatError(f"trailing bytes in .flo file after offset {need}")
    vals = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=_HEADER.size)
    return vals.reshape(h, w, 2).transpose(2, 0, 1).astype(np.float64)


def write_flo(flow: np.ndarray, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_flo(flow))


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_flo(f.read())


def write_kitti_png(flow: np.ndarray, path, valid: np.ndarray | None = None) -> None:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must have shape (2, H, W), got {flow.shape}")
    enc = np.round(flow * KITTI_SCALE + KITTI_OFFSET)
    if (enc < 0).any() or (enc > 65535).any():
        raise ValueError("flow outside the representable KITTI range (about +-512 px)")
    if valid is None:
        valid = np.ones(flow.shape[1:])
    rgb = np.stack([enc[0], enc[1], np.asarray(valid, dtype=np.float64).reshape(flow.shape[1:])], axis=-1)
    # cv2 stores BGR
    ok = cv2.imwrite(os.fspath(path), rgb[..., ::-1].astype(np.uint16))
    if not ok:
        raise OSError(f"could not write {path}")


def read_kitti_png(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (flow (2, H, W), valid (H, W) bool)."""
    img = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot decode PNG {path}")
    if img.dtype != np.uint16:
        raise FormatError(f"KITTI flow PNG must be 16-bit, got {img.dtype}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"KITTI flow PNG must have 3 channels, got shape {img.shape}")
    rgb = img[..., ::-1].astype(np.float64)
    flow = (rgb[..., :2] - KITTI_OFFSET) / KITTI_SCALE
    return flow.transpose(2, 0, 1), rgb[..., 2] > 0


def write_png8(img: np.ndarray, path) -> None:
    """Write an 8-bit image given as (H, W) or (H, W, 3) RGB uint8."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., ::-1]
    if not cv2.imwrite(os.fspath(path), img.astype(np.uint8)):
        raise OSError(f"could not write {path}")


def write_image(frame: np.ndarray, path) -> None:
    """Write a (3, H, W) float image in [0, 1] as 16-bit RGB PNG."""
    q = np.round(np.clip(frame, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(os.fspath(path), q.transpose(1, 2, 0)[..., ::-1]):
        raise OSError(f"could not write {path}")


def read_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG into a (3, H, W) float array in [0, 1]."""
    img = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot decode image {path}")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"unsupported image dtype {img.dtype} in {path}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img[..., :3][..., ::-1]
    return img.transpose(2, 0, 1).astype(np.float64) / scale
