"""Binary checkpoints of a network's parameters and optimizer state.

Layout (little-endian)::

    b"HPRM", u32 version, u32 len + utf-8 network name,
    u32 len + utf-8 JSON layer stack, u64 optimizer iterations,
    every parameter array as f32 in layer order (names in declaration order),
    every RMSprop cache array as f32 in the same order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, ContractError, FormatError, TruncatedFile, VersionMismatch
from .network import NetworkSpec, ParamStore

MAGIC = b"HPRM"
VERSION = 1


class Reader:
    """Cursor over a bytes buffer that raises TruncatedFile instead of IndexError."""

    def __init__(self, buf: bytes, offset: int = 0, what: str = "file"):
        self.buf, self.pos, self.what = buf, offset, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"{self.what}: unexpected end of data at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def u64(self) -> int:
        return self.unpack("Q")[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self, shape, dtype="<f4") -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape).copy()


def pack_text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(net: NetworkSpec, store: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), pack_text(net.name),
             pack_text(json.dumps(net.to_dict(), sort_keys=True)), struct.pack("<Q", store.iterations)]
    for group in (store.params, store.cache):
        for layer in group:
            for a in layer.values():
                parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def read_checkpoint(reader: Reader) -> tuple[NetworkSpec, ParamStore]:
    if reader.take(4) != MAGIC:
        raise BadMagic(f"{reader.what}: not a parameter checkpoint")
    version = reader.u32()
    if version != VERSION:
        raise VersionMismatch(f"{reader.what}: checkpoint version {version}, expected {VERSION}")
    name = reader.text()
    try:
        net = NetworkSpec.from_dict(json.loads(reader.text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{reader.what}: unreadable layer stack ({exc})") from exc
    if net.name != name:
        raise FormatError(f"{reader.what}: name {name!r} disagrees with stack {net.name!r}")
    iterations = reader.u64()
    params, cache = [], []
    for layer, (ins, _) in zip(net.layers, net.shapes()):
        params.append({k: reader.array(s).astype(np.float32) for k, s in layer.param_shapes(ins).items()})
    for layer, p in zip(net.layers, params):
        cache.append({k: reader.array(p[k].shape).astype(np.float32) for k in layer.trainable})
    return net, ParamStore(params, cache, iterations)


def save_checkpoint(net: NetworkSpec, store: ParamStore, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, store))


def load_checkpoint(path, expect: NetworkSpec | None = None) -> tuple[NetworkSpec, ParamStore]:
    raw = Path(path).read_bytes()
    reader = Reader(raw, what=str(path))
    net, store = read_checkpoint(reader)
    if reader.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - reader.pos} trailing bytes")
    if expect is not None and net != expect:
        raise ContractError(f"{path}: checkpoint holds {net.name!r} with a different layer stack")
    return net, store
