"""Checkpoint container and its binary file format.

Layout: the 8 magic bytes ``CARCKPT1``, a little-endian uint64 header
length, a UTF-8 JSON header, then raw little-endian tensor payloads in
directory order. The header's ``tensors`` list gives each tensor's name,
shape, dtype (``<f4`` or ``<f8``), byte offset relative to the payload
start and byte length. Float32 tensors are stored as 32-bit; float64
tensors keep their full precision so 64-bit runs resume bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CARCKPT1"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    geometry: dict
    topology: dict
    config: dict
    rgb_mean: list
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    lr: float = 0.0
    step: int = 0
    epoch: int = 0
    best_val_psnr: float | None = None
    stale_epochs: int = 0
    rng_state: dict | None = None
    version: int = FORMAT_VERSION

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("param/" + k, v) for k, v in self.params.items()]
        out += [("adam_m/" + k, v) for k, v in self.adam_m.items()]
        out += [("adam_v/" + k, v) for k, v in self.adam_v.items()]
        return out


def _dtype_code(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "<f4"
    if a.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported tensor dtype {a.dtype}")


def to_bytes(c: Checkpoint) -> bytes:
    directory, payloads, offset = [], [], 0
    for name, arr in c.tensors():
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    best = c.best_val_psnr
    header = {
        "version": c.version, "geometry": c.geometry, "topology": c.topology, "config": c.config,
        "rgb_mean": [float(x) for x in c.rgb_mean], "adam_t": c.adam_t, "lr": c.lr, "step": c.step,
        "epoch": c.epoch, "best_val_psnr": None if best is None else str(best) if np.isinf(best) else best,
        "stale_epochs": c.stale_epochs, "rng_state": c.rng_state, "tensors": directory,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(payloads)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {header.get('version')} != supported {FORMAT_VERSION}")
    body = memoryview(data)[16 + hlen:]
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(body):
            raise CheckpointError(f"truncated checkpoint payload for {entry['name']}")
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"unsupported tensor dtype {entry['dtype']}")
        arr = np.frombuffer(body[start:start + nbytes], dtype=dtype).reshape(entry["shape"]).copy()
        kind, _, name = entry["name"].partition("/")
        if kind not in groups:
            raise CheckpointError(f"unknown tensor group in {entry['name']}")
        groups[kind][name] = arr.astype(dtype.newbyteorder("="), copy=False)
    best = header["best_val_psnr"]
    return Checkpoint(
        geometry=header["geometry"], topology=header["topology"], config=header["config"],
        rgb_mean=header["rgb_mean"], params=groups["param"], adam_m=groups["adam_m"], adam_v=groups["adam_v"],
        adam_t=header["adam_t"], lr=header["lr"], step=header["step"], epoch=header["epoch"],
        best_val_psnr=float(best) if isinstance(best, str) else best, stale_epochs=header["stale_epochs"],
        rng_state=header["rng_state"], version=header["version"],
    )


def save_checkpoint(c: Checkpoint, path: str | os.PathLike) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(c))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no such checkpoint: {path}")
    return from_bytes(path.read_bytes())
