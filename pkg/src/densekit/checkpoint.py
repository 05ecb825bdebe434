"""Binary checkpoint format.

Layout::

    b"DKPT" | u32 version (=1) | u32 header length | JSON header | f32 payloads

The header holds the architecture config, a tensor directory (name, dtype,
shape, byte offset, byte length), the epoch counter, the rng state and any
extra metadata.  Payloads are little-endian float32 in directory order.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, PlanMismatchError, TruncatedFileError
from .model import Model, init_model
from .ops import RunningStats
from .plan import ArchConfig, build_plan, config_from_dict

MAGIC = b"DKPT"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class Checkpoint:
    """Decoded checkpoint: model plus training metadata."""

    def __init__(self, model: Model, epoch: int, rng_state: dict, extra: dict, tensors: dict):
        self.model = model
        self.epoch = epoch
        self.rng_state = rng_state
        self.extra = extra
        self.tensors = tensors   # non-model tensors (e.g. optimizer buffers)


def _entries(model: Model, extra_tensors: Optional[dict]):
    for name, t in model.params.items():
        yield f"param/{name}", t.data
    for name, rs in model.running_stats.items():
        yield f"running/{name}/mean", rs.mean
        yield f"running/{name}/var", rs.var
    for name, arr in (extra_tensors or {}).items():
        yield f"extra/{name}", arr


def encode(model: Model, epoch: int = 0, rng_state: Optional[dict] = None,
           extra: Optional[dict] = None, extra_tensors: Optional[dict] = None) -> bytes:
    directory = []
    payloads = []
    offset = 0
    for name, arr in _entries(model, extra_tensors):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({
            "name": name, "dtype": "f32", "shape": list(np.shape(arr)),
            "offset": offset, "length": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = {
        "config": model.config.to_json_dict(),
        "plan_hash": model.config.digest(),
        "tensors": directory,
        "epoch": int(epoch),
        "rng_state": rng_state or {"seed": model.seed},
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(payloads)


def save_checkpoint(model: Model, path, epoch: int = 0, rng_state: Optional[dict] = None,
                    extra: Optional[dict] = None, extra_tensors: Optional[dict] = None) -> Path:
    path = Path(path)
    data = encode(model, epoch, rng_state, extra, extra_tensors)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def decode(data: bytes, expect: Optional[ArchConfig] = None) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise TruncatedFileError(f"checkpoint is only {len(data)} bytes long")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise TruncatedFileError("checkpoint header is truncated")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from exc
    body = start + hlen

    cfg = config_from_dict(header["config"])
    if header.get("plan_hash") != cfg.digest():
        raise FormatError("checkpoint plan hash does not match its own config")
    if expect is not None and expect.digest() != cfg.digest():
        raise PlanMismatchError(
            f"checkpoint was written for {cfg.to_json()}, expected {expect.to_json()}"
        )

    arrays = OrderedDict()
    for entry in header["tensors"]:
        lo = body + entry["offset"]
        hi = lo + entry["length"]
        if hi > len(data):
            raise TruncatedFileError(f"payload for {entry['name']} is truncated")
        if entry["dtype"] != "f32":
            raise FormatError(f"unsupported dtype {entry['dtype']!r} for {entry['name']}")
        arr = np.frombuffer(data[lo:hi], dtype="<f4").astype(np.float32)
        arrays[entry["name"]] = arr.reshape(entry["shape"])

    model = init_model(build_plan(cfg), seed=int(header["rng_state"].get("seed", 0)))
    for name, t in model.params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise FormatError(f"checkpoint is missing parameter {name}")
        if arrays[key].shape != t.shape:
            raise PlanMismatchError(f"{name}: checkpoint shape {arrays[key].shape} vs plan {t.shape}")
        t.data = arrays[key]
    for name in list(model.running_stats):
        model.running_stats[name] = RunningStats(
            arrays[f"running/{name}/mean"].copy(), arrays[f"running/{name}/var"].copy()
        )
    extra_tensors = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return Checkpoint(model, int(header["epoch"]), header["rng_state"],
                      header.get("extra", {}), extra_tensors)


def read_checkpoint(path, expect: Optional[ArchConfig] = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expect)


def load_checkpoint(path, expect: Optional[ArchConfig] = None) -> Model:
    return read_checkpoint(path, expect).model
