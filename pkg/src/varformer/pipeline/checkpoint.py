"""Unified binary checkpoint.

Layout (all integers little-endian)::

    b"VARF0001"
    u32  section count
    per section: u16 name length, name (utf-8), u64 offset, u64 byte length
    section blobs

Parameter sections ("msvq", "var", "adapter", "restorer") hold the module's
``state_dict`` tensors flattened in key order as float32. The "meta" section
holds the run configuration as UTF-8 JSON.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, Mapping, Tuple

import numpy as np
import torch
from torch import nn

from ..errors import CheckpointError

MAGIC = b"VARF0001"


def module_blob(module: nn.Module) -> bytes:
    parts = [t.detach().cpu().to(torch.float32).contiguous().numpy().ravel() for t in module.state_dict().values()]
    arr = np.concatenate(parts) if parts else np.zeros(0, np.float32)
    return arr.astype("<f4").tobytes()


def load_blob(module: nn.Module, blob: bytes, name: str = "") -> None:
    arr = np.frombuffer(blob, dtype="<f4")
    state = module.state_dict()
    need = sum(t.numel() for t in state.values())
    if arr.size != need:
        raise CheckpointError(f"section {name!r} holds {arr.size} values, module expects {need}")
    new, pos = {}, 0
    for k, t in state.items():
        n = t.numel()
        new[k] = torch.from_numpy(arr[pos : pos + n].copy()).reshape(t.shape).to(t.dtype)
        pos += n
    module.load_state_dict(new)


def write_checkpoint(path: str, sections: Mapping[str, bytes]) -> None:
    names = list(sections)
    header = bytearray(MAGIC) + struct.pack("<I", len(names))
    table_size = sum(2 + len(n.encode()) + 16 for n in names)
    offset = len(header) + table_size
    table, blobs = bytearray(), []
    for n in names:
        blob = sections[n]
        enc = n.encode()
        table += struct.pack("<H", len(enc)) + enc + struct.pack("<QQ", offset, len(blob))
        blobs.append(blob)
        offset += len(blob)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(bytes(header) + bytes(table))
        for b in blobs:
            fh.write(b)


def read_checkpoint(path: str) -> Dict[str, bytes]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    try:
        (count,) = struct.unpack_from("<I", data, 8)
        pos, out = 12, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nlen].decode()
            off, length = struct.unpack_from("<QQ", data, pos + 2 + nlen)
            pos += 2 + nlen + 16
            if off + length > len(data):
                raise CheckpointError(f"{path}: section {name!r} runs past end of file")
            out[name] = data[off : off + length]
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated section table") from e
    return out


def save_modules(path: str, modules: Mapping[str, nn.Module], meta: Mapping) -> None:
    sections = {"meta": json.dumps(dict(meta), sort_keys=True).encode()}
    sections.update({name: module_blob(m) for name, m in modules.items()})
    write_checkpoint(path, sections)


def read_meta(sections: Mapping[str, bytes]) -> dict:
    if "meta" not in sections:
        raise CheckpointError("checkpoint has no 'meta' section")
    return json.loads(sections["meta"].decode())


def require(sections: Mapping[str, bytes], *names: str) -> None:
    missing = [n for n in names if n not in sections]
    if missing:
        raise CheckpointError(f"checkpoint lacks section(s): {', '.join(missing)}")
