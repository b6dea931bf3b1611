"""Binary checkpoint container.

Layout, all integers little-endian::

    magic         8 bytes  b"KNUCKNET"
    version       uint32   FORMAT_VERSION
    header_len    uint32
    header        UTF-8 JSON {"network": <NetworkConfig>, "meta": {...}}
    n_tensors     uint32
    per tensor:
        name_len  uint16, name UTF-8
        ndim      uint8, dims uint32 * ndim
        data      float32 little-endian, C order

Tensors are written in the parameter dict's order, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import LoadError
from .network import NetworkConfig, NetworkParams, parameter_shapes

MAGIC = b"KNUCKNET"
FORMAT_VERSION = 1


def save_checkpoint(params: NetworkParams, path, meta: dict | None = None) -> None:
    header = json.dumps({"network": params.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header,
             struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LoadError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    """Returns ``(params, meta)``; parameters come back as float32 tensors."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise LoadError(f"{path}: not a knucklenet checkpoint (bad magic)")
    version, header_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint format version {version}")
    try:
        header = json.loads(r.take(header_len).decode())
        config = NetworkConfig.from_dict(header["network"])
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"{path}: corrupt checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    expected = parameter_shapes(config)
    got = {k: tuple(v.shape) for k, v in tensors.items()}
    if got != expected:
        raise LoadError(f"{path}: tensor names/shapes do not match the stored network config")
    if r.pos != len(data):
        raise LoadError(f"{path}: {len(data) - r.pos} trailing bytes after the last tensor")
    return NetworkParams(config, tensors), header.get("meta", {})
