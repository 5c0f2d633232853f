"""Versioned binary model checkpoints.

Layout: 8-byte magic, u32 version, u64 header length, UTF-8 JSON header,
then raw little-endian float64 tensor payloads in header order. The
header carries the model spec, step counter, RNG state and the tensor
directory (name, kind, shape), so a checkpoint is self-describing and a
write-then-read round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Param
from .errors import BadCheckpoint
from .nn import ModelSpec, MultiModalNet

MAGIC = b"ECGFCKPT"
VERSION = 1


def _rng_state_to_json(state) -> dict:
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return conv(state)


def save_checkpoint(
    path: str | Path,
    model: MultiModalNet,
    step: int = 0,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    tensors: list[tuple[str, str, np.ndarray]] = []
    for name, p in model.params.items():
        tensors.append((name, "value", p.data))
        tensors.append((name, "m", p.m))
        tensors.append((name, "v", p.v))
    for name, b in model.buffers.items():
        tensors.append((name, "buffer", b))

    header = {
        "version": VERSION,
        "spec": model.spec.to_dict(),
        "step": int(step),
        "rng_state": _rng_state_to_json(rng_state) if rng_state is not None else None,
        "extra": extra or {},
        "tensors": [
            {"name": n, "kind": k, "shape": list(a.shape), "dtype": a.dtype.name}
            for n, k, a in tensors
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(blob)))
        f.write(blob)
        for _, _, arr in tensors:
            le = np.dtype(arr.dtype.name).newbyteorder("<")
            f.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def load_checkpoint(path: str | Path) -> tuple[MultiModalNet, int, dict | None, dict]:
    """Returns (model, step, rng_state, extra)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise BadCheckpoint(f"{path}: bad magic")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise BadCheckpoint(f"{path}: unsupported version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    spec = ModelSpec.from_dict(header["spec"])

    params: dict[str, Param] = {}
    buffers: dict[str, np.ndarray] = {}
    offset = 20 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        dt = np.dtype(entry.get("dtype", "float64"))
        end = offset + dt.itemsize * size
        if end > len(raw):
            raise BadCheckpoint(f"{path}: truncated tensor {entry['name']}")
        le = np.frombuffer(raw[offset:end], dtype=dt.newbyteorder("<"))
        arr = le.astype(dt, copy=True).reshape(shape)
        offset = end
        name, kind = entry["name"], entry["kind"]
        if kind == "value":
            params[name] = Param(arr)
        elif kind == "m":
            params[name].m = arr
        elif kind == "v":
            params[name].v = arr
        elif kind == "buffer":
            buffers[name] = arr
        else:
            raise BadCheckpoint(f"{path}: unknown tensor kind {kind!r}")

    model = MultiModalNet(spec, params, buffers)
    return model, header["step"], header["rng_state"], header.get("extra", {})
