"""Checkpoint files: one JSON manifest line, then raw little-endian tensors in manifest order."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatError
from .model import ModelConfig, ModelParams, build_model

MAGIC = "segstitch-checkpoint"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_name(a: np.ndarray) -> str:
    for name, dt in DTYPES.items():
        if a.dtype == dt.newbyteorder("="):
            return name
    raise FormatError(f"unsupported tensor dtype {a.dtype}")


def save_checkpoint(path, params: ModelParams, epoch: int = 0, velocity: dict | None = None,
                    extra: dict | None = None) -> None:
    """``velocity`` maps parameter names to momentum buffers; ``extra`` must be JSON-serializable."""
    arrays = [(name, t.data) for name, t in params.named().items()]
    if velocity:
        arrays += [(f"velocity/{name}", v) for name, v in velocity.items()]
    entries = [{"name": n, "shape": list(a.shape), "dtype": _dtype_name(a)} for n, a in arrays]
    header = {"format": MAGIC, "version": VERSION, "config": params.config.to_dict(), "epoch": int(epoch),
              "tensors": entries, "extra": extra or {}}
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        for (_, a), e in zip(arrays, entries):
            f.write(np.ascontiguousarray(a, dtype=DTYPES[e["dtype"]]).tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Header dict and ``name -> array`` for every stored tensor."""
    with open(path, "rb") as f:
        line = f.readline()
        payload = f.read()
    try:
        header = json.loads(line)
    except ValueError as exc:
        raise CorruptFileError(f"{path}: unreadable checkpoint header") from exc
    if header.get("format") != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    missing = [k for k in ("config", "epoch", "tensors") if k not in header]
    if missing:
        raise CorruptFileError(f"{path}: header lacks {missing}")
    arrays = {}
    offset = 0
    for e in header["tensors"]:
        if e["dtype"] not in DTYPES:
            raise FormatError(f"{path}: unknown dtype {e['dtype']!r}")
        dt = DTYPES[e["dtype"]]
        nbytes = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(payload):
            raise CorruptFileError(f"{path}: payload truncated at tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(payload, dt, count=nbytes // dt.itemsize, offset=offset) \
            .astype(dt.newbyteorder("=")).reshape(e["shape"])
        offset += nbytes
    if offset != len(payload):
        raise CorruptFileError(f"{path}: {len(payload) - offset} trailing bytes")
    return header, arrays


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Rebuild the model from the stored config and copy every tensor in.

    Returns the params and a state dict with ``epoch``, ``velocity`` and ``extra``.
    """
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    params = build_model(cfg)
    named = params.named()
    stored = [n for n in arrays if not n.startswith("velocity/")]
    if stored != list(named):
        raise CorruptFileError(f"{path}: parameter names do not match config")
    for name, t in named.items():
        a = arrays[name]
        if a.shape != t.shape:
            raise CorruptFileError(f"{path}: {name} has shape {a.shape}, expected {t.shape}")
        t.data = a.copy()
    velocity = {n[len("velocity/"):]: a.copy() for n, a in arrays.items() if n.startswith("velocity/")}
    return params, {"epoch": header["epoch"], "velocity": velocity, "extra": header.get("extra", {})}
