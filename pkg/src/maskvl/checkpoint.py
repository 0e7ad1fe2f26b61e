"""Versioned binary checkpoints.

Layout (little-endian)::

    8 bytes   magic: ASCII "MASKVL" then CR LF (catches newline mangling)
    u32       format version
    u64       header length in bytes
    ...       UTF-8 JSON header (sorted keys, compact separators)
    ...       float32 payload, tensors back to back in header order

The header carries the config snapshot, vocabulary, step, RNG state,
free-form metadata and a ``tensors`` table of ``{name, shape, offset}``
entries (offsets in bytes into the payload).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"MASKVL\r\n"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict[str, Any]
    vocab: list[str]
    params: dict[str, np.ndarray]
    step: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    rng_state: dict[str, Any] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        tensors = []
        blobs = []
        offset = 0
        for group, arrays in (("param", self.params), ("opt", self.optimizer)):
            for name in sorted(arrays):
                arr = np.ascontiguousarray(arrays[name], dtype="<f4")
                tensors.append({"name": f"{group}:{name}", "shape": list(arr.shape), "offset": offset})
                blobs.append(arr.tobytes())
                offset += arr.nbytes
        header = {
            "kind": self.kind,
            "config": self.config,
            "vocab": self.vocab,
            "step": self.step,
            "optimizer_step": self.optimizer_step,
            "rng_state": self.rng_state,
            "meta": self.meta,
            "tensors": tensors,
            "payload_bytes": offset,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _PREFIX.size:
            raise CheckpointError("file too short for a checkpoint header")
        magic, version, head_len = _PREFIX.unpack_from(raw)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise VersionError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
        start = _PREFIX.size
        if start + head_len > len(raw):
            raise CheckpointError("file ends inside the header")
        try:
            header = json.loads(raw[start: start + head_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable header: {exc}") from None
        payload = memoryview(raw)[start + head_len:]
        if len(payload) != header["payload_bytes"]:
            raise CheckpointError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
        params: dict[str, np.ndarray] = {}
        optimizer: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            group, name = entry["name"].split(":", 1)
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = entry["offset"] + 4 * count
            if end > len(payload):
                raise CheckpointError(f"tensor {entry['name']} runs past the payload")
            arr = np.frombuffer(payload[entry["offset"]: end], dtype="<f4").reshape(shape)
            (params if group == "param" else optimizer)[name] = arr.astype(np.float32)
        return cls(
            kind=header["kind"], config=header["config"], vocab=header["vocab"], params=params,
            step=header["step"], optimizer=optimizer, optimizer_step=header["optimizer_step"],
            rng_state=header["rng_state"], meta=header["meta"],
        )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically: a temp file in the target directory, fsync, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = ckpt.to_bytes()
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
