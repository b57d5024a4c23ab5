"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CRNT"                magic
    u32                    format version (1)
    u32 + bytes            config JSON (utf-8, sorted keys)
    u32 + bytes            manifest JSON: [{name, shape, offset, trainable}, ...]
    u64                    number of float32 values in the payload
    f32 * count            parameters, concatenated in manifest order (C order)

``offset`` counts float32 values from the start of the payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CRNT"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    manifest: list[dict]
    arrays: dict[str, np.ndarray]  # float64 views of the stored float32 values


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(config: dict, params: list[tuple[str, np.ndarray, bool]]) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr, trainable in params:
        a = np.asarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "trainable": bool(trainable)})
        chunks.append(a.tobytes())
        offset += a.size
    cfg = _dumps(config)
    man = _dumps(manifest)
    head = MAGIC + struct.pack("<I", VERSION)
    head += struct.pack("<I", len(cfg)) + cfg
    head += struct.pack("<I", len(man)) + man
    head += struct.pack("<Q", offset)
    return head + b"".join(chunks)


def save_checkpoint(path, model, config: dict) -> Path:
    """Write ``model``'s parameters (as float32) with a JSON config blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = [(n, p.data, p.trainable) for n, p in model.named_parameters()]
    blob = encode_checkpoint(config, params)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def json(self, what: str):
        n = self.u32(f"{what} length")
        try:
            return json.loads(self.take(n, what).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.path}: corrupt {what} ({exc})") from exc


def decode_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = r.json("config")
    manifest = r.json("manifest")
    count = r.u64("payload size")
    payload = np.frombuffer(r.take(4 * count, "payload"), dtype="<f4")
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    arrays = {}
    for entry in manifest:
        try:
            shape = tuple(int(s) for s in entry["shape"])
            off = int(entry["offset"])
            name = entry["name"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed manifest entry {entry!r}") from exc
        size = int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + size > count:
            raise FormatError(f"{path}: entry {name} exceeds the payload")
        arrays[name] = payload[off : off + size].astype(np.float64).reshape(shape)
    return Checkpoint(config, manifest, arrays)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    return decode_checkpoint(buf, path)
