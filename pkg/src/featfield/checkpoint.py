"""Binary checkpoints ("FFCK") for network weights and optimizer state.

Layout (little-endian): magic "FFCK", version u32, metadata length u32,
metadata JSON (step, configs), tensor count u32, then per tensor:
name length u32, UTF-8 name, rank u32, rank x u64 dims, f32 data.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np

from featfield.diffengine import AdamState, Tensor
from featfield.errors import BadMagic, TensorShapeMismatch, TruncatedFile, VersionUnsupported
from featfield.fields import FieldConfig, FieldNetwork

MAGIC = b"FFCK"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    parts = [_U32.pack(len(nb)), nb, _U32.pack(arr.ndim)]
    parts += [_U64.pack(d) for d in arr.shape]
    parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def write_checkpoint_file(path, tensors: "OrderedDict[str, np.ndarray]", meta: dict) -> None:
    path = Path(path)
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta_b)), meta_b, _U32.pack(len(tensors))]
    chunks += [_encode_tensor(k, v) for k, v in tensors.items()]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.raw):
            raise TruncatedFile(self.path, end, len(self.raw))
        out = self.raw[self.pos:end]
        self.pos = end
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def read_checkpoint_file(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    raw = Path(path).read_bytes()
    if len(raw) >= 4 and raw[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, found {raw[:4]!r}")
    r = _Reader(raw, path)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionUnsupported(f"{path}: FFCK version {version} (supported: {VERSION})")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u64() for _ in range(r.u32()))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise TruncatedFile(path, r.pos, len(raw))
    return tensors, meta


def save_checkpoint(net: FieldNetwork, state: Optional[AdamState], path, step: int = 0,
                    extra: Optional[dict] = None) -> None:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for k, v in net.params.items():
        tensors[f"param/{k}"] = v.data
    if state is not None:
        for k in net.params:
            if k in state.m:
                tensors[f"adam.m/{k}"] = state.m[k]
                tensors[f"adam.v/{k}"] = state.v[k]
    meta = {"step": int(step), "adam_step": int(state.step) if state else 0,
            "field_config": net.config.to_dict()}
    if extra:
        meta.update(extra)
    write_checkpoint_file(path, tensors, meta)


def load_checkpoint(path, config: Optional[FieldConfig] = None) -> tuple[FieldNetwork, AdamState, dict]:
    """Returns (net, optimizer state, metadata). The file is fully parsed before any network exists."""
    tensors, meta = read_checkpoint_file(path)
    cfg = config or FieldConfig(**meta["field_config"])
    net = FieldNetwork(cfg, dtype=np.float32)
    for k, p in net.params.items():
        arr = tensors.get(f"param/{k}")
        if arr is None:
            raise TensorShapeMismatch(f"{path}: tensor {k!r} missing from checkpoint")
        if arr.shape != p.shape:
            raise TensorShapeMismatch(f"{path}: tensor {k!r} has shape {arr.shape}, network expects {p.shape}")
    extra = sorted(k for k in tensors if k.startswith("param/") and k[6:] not in net.params)
    if extra:
        raise TensorShapeMismatch(f"{path}: unexpected tensors {extra}")
    for k, p in net.params.items():
        p.data = tensors[f"param/{k}"]
    state = AdamState(step=int(meta.get("adam_step", 0)))
    for k in net.params:
        if f"adam.m/{k}" in tensors:
            state.m[k] = tensors[f"adam.m/{k}"]
            state.v[k] = tensors[f"adam.v/{k}"]
    return net, state, meta
