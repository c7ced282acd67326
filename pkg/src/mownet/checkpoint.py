"""Binary checkpoint format MOWCKPT1.

Layout: 8-byte magic, then per tensor: name length (u32 LE), UTF-8 name,
rank (u32), dims (u32 each), raw little-endian float64 values. Backbone
and weight-net parameters are stored as the name groups ``theta/...`` and
``phi/...``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamSet
from .errors import FormatError

MAGIC = b"MOWCKPT1"
_MAX_NAME = 1 << 16
_MAX_RANK = 8
_MAX_DIM = 1 << 28


def save_checkpoint(path, theta: ParamSet, phi: ParamSet | None = None) -> None:
    chunks = [MAGIC]
    groups = [("theta", theta)] + ([("phi", phi)] if phi is not None else [])
    for prefix, params in groups:
        for name, tensor in params.items():
            full = f"{prefix}/{name}".encode("utf-8")
            # note: ascontiguousarray would promote 0-d scalars to 1-d
            data = np.asarray(tensor.data, dtype="<f8")
            chunks.append(struct.pack("<I", len(full)))
            chunks.append(full)
            chunks.append(struct.pack("<I", data.ndim))
            chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
            chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte offset {self.off}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def exhausted(self) -> bool:
        return self.off >= len(self.blob)


def load_checkpoint(path) -> tuple[ParamSet, ParamSet | None]:
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a MOWCKPT1 checkpoint")
    groups: dict[str, list[tuple[str, np.ndarray]]] = {"theta": [], "phi": []}
    while not r.exhausted:
        name_len = r.u32("name length")
        if name_len == 0 or name_len > _MAX_NAME:
            raise FormatError(f"{path}: implausible name length {name_len} "
                              f"at byte offset {r.off - 4}")
        name = r.take(name_len, "tensor name").decode("utf-8")
        rank = r.u32("rank")
        if rank > _MAX_RANK:
            raise FormatError(f"{path}: implausible rank {rank} at byte offset {r.off - 4}")
        dims = tuple(r.u32("dimension") for _ in range(rank))
        if any(d > _MAX_DIM for d in dims):
            raise FormatError(f"{path}: implausible dimension in {dims}")
        count = int(np.prod(dims)) if dims else 1
        raw = r.take(8 * count, f"values of {name!r}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
        group, _, short = name.partition("/")
        if group not in groups or not short:
            raise FormatError(f"{path}: tensor name {name!r} lacks a theta/ or phi/ group")
        groups[group].append((short, arr))
    if not groups["theta"]:
        raise FormatError(f"{path}: checkpoint holds no backbone parameters")
    theta = ParamSet(groups["theta"])
    phi = ParamSet(groups["phi"]) if groups["phi"] else None
    return theta, phi
