"""Checkpoint container shared by all networks.

Layout (little-endian)::

    b"NSRM" | u32 version | u32 manifest length | manifest JSON (UTF-8) | payloads

The manifest holds ``{"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset"}]}``
with offsets relative to the payload start. Payloads are float32.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"NSRM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack(tensors: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    entries, payloads, offset = [], [], 0
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "dtype": "float32", "shape": list(a.shape), "offset": offset})
        payloads.append(a.tobytes())
        offset += a.nbytes
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(manifest)), manifest, *payloads])


def unpack(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("not an NSRM checkpoint")
    if len(data) < 12:
        raise CheckpointError("truncated header")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(data[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    base = 12 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32":
            raise CheckpointError(f"unsupported dtype {e['dtype']}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 4 * n > len(data):
            raise CheckpointError(f"payload of {e['name']} is truncated")
        a = np.frombuffer(data, dtype="<f4", count=n, offset=start).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(a.astype(np.float32))
    return tensors, manifest["meta"]


def module_tensors(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_into(prefix: str, module: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    own = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    if not own:
        raise CheckpointError(f"checkpoint has no '{prefix}.*' tensors")
    missing, unexpected = module.load_state_dict(own, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"'{prefix}' tensors do not fit the model (missing {missing}, unexpected {unexpected})")


def save(path, modules: dict[str, nn.Module], meta: dict | None = None) -> None:
    tensors = {}
    for prefix, m in modules.items():
        tensors.update(module_tensors(prefix, m))
    atomic_write(path, pack(tensors, meta))


def load(path) -> tuple[dict[str, torch.Tensor], dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return unpack(p.read_bytes())
