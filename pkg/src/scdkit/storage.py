"""Checkpoint storage: a flat named-tensor archive with a JSON header.

The format is a plain zip holding one ``.npy`` entry per tensor plus a
``header.json``. Entries are written in sorted name order with a fixed
timestamp, so saving the same state twice produces identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError

_HEADER_NAME = "header.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_tensor_archive(path, tensors: Mapping[str, object], header: dict) -> None:
    """Write tensors (numpy arrays or anything with ``.detach().numpy()``)."""
    arrays = {}
    for name, value in tensors.items():
        if name == _HEADER_NAME:
            raise ConfigError(f"tensor name {name!r} collides with the header entry")
        if hasattr(value, "detach"):
            value = value.detach().cpu().numpy()
        arrays[name] = np.ascontiguousarray(value)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo(_HEADER_NAME, date_time=_EPOCH)
        zf.writestr(info, json.dumps(header, indent=2, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name], allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_tensor_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        if _HEADER_NAME not in names:
            raise ConfigError(f"{path} has no header entry")
        header = json.loads(zf.read(_HEADER_NAME))
        tensors = {}
        for entry in names:
            if entry == _HEADER_NAME:
                continue
            if not entry.endswith(".npy"):
                raise ConfigError(f"unexpected archive entry {entry!r}")
            buf = io.BytesIO(zf.read(entry))
            tensors[entry[: -len(".npy")]] = np.load(buf, allow_pickle=False)
    return tensors, header


def check_shapes(
    loaded: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]
) -> None:
    """Validate an archive against a model's parameter shapes."""
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    if missing or extra:
        raise ShapeError(
            f"archive/model name mismatch; missing={missing[:5]}, extra={extra[:5]}"
        )
    for name, shape in expected.items():
        got = tuple(loaded[name].shape)
        if got != tuple(shape):
            raise ShapeError(f"{name}: archive shape {got} != model shape {tuple(shape)}")


def state_fingerprint(tensors: Mapping[str, object]) -> str:
    """SHA-256 over names and raw bytes; detects any parameter drift."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        value = tensors[name]
        if hasattr(value, "detach"):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value)
        digest.update(name.encode())
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()
