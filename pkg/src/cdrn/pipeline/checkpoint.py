"""Binary checkpoint format.

Layout (little-endian)::

    b"CDRN" | u32 version | u32 tensor count | tensor records
    | u32 optimizer tensor count | tensor records | u32 len | optimizer JSON
    | u32 len | trailer JSON

A tensor record is u32 name length, UTF-8 name, u32 rank, rank x u64
extents, then the float32 row-major payload. JSON blocks use sorted keys, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"CDRN"
VERSION = 1
SUPPORTED_VERSIONS = (1,)


class CheckpointError(Exception):
    pass


class CheckpointHeaderError(CheckpointError):
    """Missing or wrong magic bytes."""


class CheckpointVersionError(CheckpointError):
    """A format version this reader does not understand."""


class TruncatedCheckpointError(CheckpointError):
    """The file ends before a declared payload does."""


class DuplicateTensorError(CheckpointError):
    """Two tensor records share a name."""


class CorruptCheckpointError(CheckpointError):
    """Well-formed framing around unusable content (bad JSON, trailing bytes)."""


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    optimizer_tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    optimizer_meta: Dict = field(default_factory=dict)
    meta: Dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def stage(self) -> int:
        return int(self.meta.get("stage", 0))

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _pack_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps(ckpt: Checkpoint) -> bytes:
    return b"".join(
        [
            MAGIC,
            struct.pack("<I", ckpt.version),
            _pack_tensors(ckpt.tensors),
            _pack_tensors(ckpt.optimizer_tensors),
            _pack_json(ckpt.optimizer_meta),
            _pack_json(ckpt.meta),
        ]
    )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"{what}: need {n} bytes at offset {self.pos}, file has {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def tensors(self, section: str) -> "OrderedDict[str, np.ndarray]":
        count = self.u32(f"{section} count")
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for i in range(count):
            name_len = self.u32(f"{section} record {i} name length")
            try:
                name = self.take(name_len, f"{section} record {i} name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorruptCheckpointError(f"{section} record {i}: undecodable name") from exc
            rank = self.u32(f"{name} rank")
            shape = struct.unpack(f"<{rank}Q", self.take(8 * rank, f"{name} extents"))
            n = int(np.prod(shape, dtype=np.uint64)) if rank else 1
            payload = self.take(4 * n, f"{name} payload")
            if name in out:
                raise DuplicateTensorError(f"{section}: tensor {name!r} appears twice")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        return out

    def json(self, what: str):
        raw = self.take(self.u32(f"{what} length"), what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"{what}: invalid JSON") from exc


def loads(data: bytes) -> Checkpoint:
    """Parse a whole checkpoint; nothing is returned unless every section is intact."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointHeaderError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4, "magic")
    version = r.u32("version")
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}; known {SUPPORTED_VERSIONS}")
    tensors = r.tensors("parameters")
    opt_tensors = r.tensors("optimizer")
    opt_meta = r.json("optimizer metadata")
    meta = r.json("trailer")
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - r.pos} unexpected bytes after the trailer")
    return Checkpoint(tensors, opt_tensors, opt_meta, meta, version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def split_prefixed(tensors: Dict[str, np.ndarray], prefix: str) -> "OrderedDict[str, np.ndarray]":
    """Sub-dictionary of ``prefix.``-named tensors with the prefix removed."""
    p = prefix + "."
    return OrderedDict((k[len(p):], v) for k, v in tensors.items() if k.startswith(p))


def optimizer_state(ckpt: Checkpoint) -> Optional[Dict]:
    """Rebuild an Adam state dict from a checkpoint (None when it holds no optimizer)."""
    if not ckpt.optimizer_meta:
        return None
    names = ckpt.optimizer_meta["params"]
    try:
        m = [ckpt.optimizer_tensors["m:" + n] for n in names]
        v = [ckpt.optimizer_tensors["v:" + n] for n in names]
    except KeyError as exc:
        raise CorruptCheckpointError(f"optimizer moment missing for {exc}") from None
    state = {k: ckpt.optimizer_meta[k] for k in ("lr", "beta1", "beta2", "eps", "t")}
    state.update(m=m, v=v)
    return state
