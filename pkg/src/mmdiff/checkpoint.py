"""Versioned binary checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header, then the raw C-order bytes of every array in header order.
The header holds the metadata map (stage tag, config, seeds, ...) and, per
array, its name, shape, dtype and frozen flag.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ParamBundle

MAGIC = b"MMDCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

STAGES = ("unidiffuser", "bidiffuser", "llm", "align-pre", "align-mid", "adapter", "dialogue")


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    """Not a checkpoint (bad magic or unreadable header)."""


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ShapeInconsistencyError(CheckpointError):
    pass


class CompatibilityError(CheckpointError):
    """The checkpoint's stage tag is not accepted by the consumer."""


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    frozen: list[str] = field(default_factory=list)

    @property
    def stage(self) -> str | None:
        return self.meta.get("stage")

    def bundle(self, prefix: str = "") -> ParamBundle:
        """A ParamBundle over the arrays under ``prefix`` (prefix stripped)."""
        sel = {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}
        b = ParamBundle(sel, frozen=[k[len(prefix):] for k in self.frozen if k.startswith(prefix)])
        for name, arr in sel.items():
            b[name].data = arr.copy()        # keep the stored dtype, whatever the current default
        return b

    def require_stage(self, *stages: str) -> Checkpoint:
        if self.stage not in stages:
            raise CompatibilityError(f"checkpoint stage {self.stage!r} not accepted here (need one of {stages})")
        return self


def from_bundles(bundles: dict[str, ParamBundle], meta: dict) -> Checkpoint:
    """Flatten several bundles into one checkpoint, names prefixed '<key>/'."""
    arrays, frozen = {}, []
    for key, b in bundles.items():
        for name, t in b.items():
            arrays[f"{key}/{name}"] = t.data
            if not t.requires_grad:
                frozen.append(f"{key}/{name}")
    return Checkpoint(arrays, dict(meta), frozen)


def save(ckpt: Checkpoint, path) -> None:
    entries, blobs = [], []
    for name, arr in ckpt.arrays.items():
        a = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str,
                        "frozen": name in ckpt.frozen})
        blobs.append(a.tobytes())
    header = json.dumps({"meta": ckpt.meta, "arrays": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        if raw[:len(MAGIC)] != MAGIC[:len(raw)]:
            raise FormatError(f"{path}: not a checkpoint file")
        raise TruncationError(f"{path}: file ends inside the preamble")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise TruncationError(f"{path}: header truncated")
    try:
        header = json.loads(raw[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header: {e}") from None
    off = start + hlen
    arrays, frozen = {}, []
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        shape = tuple(e["shape"])
        if any(d < 0 for d in shape):
            raise ShapeInconsistencyError(f"{path}: negative dimension in {e['name']}")
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + n > len(raw):
            raise TruncationError(f"{path}: data for {e['name']!r} truncated")
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=off).reshape(shape).copy()
        off += n
        if e.get("frozen"):
            frozen.append(e["name"])
    if off != len(raw):
        raise ShapeInconsistencyError(f"{path}: {len(raw) - off} trailing bytes do not match the declared shapes")
    return Checkpoint(arrays, header["meta"], frozen)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
