"""On-disk formats: 8-bit PNGs, raw float32 sidecars, and feature files.

Sidecars and feature files are little-endian float32, row-major, behind a
16-byte header of magic + version + three dimension fields. PNGs are the
quantized artifacts that evaluation runs on; sidecars preserve the
unquantized optimizer output.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ContractViolationError
from .types import ImageTensor, as_image_array, quantize_8bit

_SIDECAR_MAGIC = b"ADVF"
_FEATURE_MAGIC = b"FTRS"
_VERSION = 1


def save_png(x, path) -> None:
    """Quantize to 8 bits and write a PNG (mode L for C=1, RGB for C=3)."""
    arr = as_image_array(x)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[2] == 1:
        img = Image.fromarray(u8[:, :, 0], mode="L")
    elif u8.shape[2] == 3:
        img = Image.fromarray(u8, mode="RGB")
    else:
        raise ContractViolationError(f"PNG export supports 1 or 3 channels, got {u8.shape[2]}")
    img.save(Path(path), format="PNG")


def load_png(path) -> ImageTensor:
    with Image.open(Path(path)) as img:
        arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageTensor(arr.astype(np.float64) / 255.0)


def _write_array(path, magic: bytes, dims, arr: np.ndarray) -> None:
    header = struct.pack("<4sIIII", magic, _VERSION, *dims)
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(header + data)


def _read_array(path, magic: bytes):
    raw = Path(path).read_bytes()
    got_magic, version, d0, d1, d2 = struct.unpack_from("<4sIIII", raw)
    if got_magic != magic or version != _VERSION:
        raise ContractViolationError(f"bad header in {path}")
    arr = np.frombuffer(raw, dtype="<f4", offset=20)
    return (d0, d1, d2), arr.astype(np.float64)


def save_image_sidecar(x, path) -> None:
    """Raw unquantized image floats with an (H, W, C) header."""
    arr = as_image_array(x)
    _write_array(path, _SIDECAR_MAGIC, arr.shape, arr)


def load_image_sidecar(path) -> np.ndarray:
    (h, w, c), flat = _read_array(path, _SIDECAR_MAGIC)
    return flat.reshape(h, w, c)


def save_feature_file(features: np.ndarray, grid_hw, path) -> None:
    """Patch feature block (N_f, N_h*N_w) with an (N_f, N_h, N_w) header."""
    f = np.asarray(features, dtype=np.float64)
    gh, gw = grid_hw
    if f.ndim != 2 or f.shape[1] != gh * gw:
        raise ContractViolationError(f"feature block {f.shape} does not match grid {grid_hw}")
    _write_array(path, _FEATURE_MAGIC, (f.shape[0], gh, gw), f)


def load_feature_file(path):
    (nf, gh, gw), flat = _read_array(path, _FEATURE_MAGIC)
    return flat.reshape(nf, gh * gw), (gh, gw)


def content_hash(x) -> str:
    """Stable hex digest of an image's quantized pixel content."""
    arr = as_image_array(quantize_8bit(x))
    u8 = np.round(arr * 255.0).astype(np.uint8)
    h = hashlib.sha256()
    h.update(struct.pack("<III", *u8.shape))
    h.update(u8.tobytes())
    return h.hexdigest()
