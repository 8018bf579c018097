"""Binary tensor-archive checkpoints.

Layout (all integers little-endian):

    magic "NARTNSR1"
    u32  tensor count
    per tensor, in sorted name order:
        u16  name byte length, then UTF-8 name
        u8   rank
        u32  dims[rank]
        u8   dtype code (0 = float32 little-endian)
        raw  data
    u32  metadata line count
    per line, in sorted key order:
        u32  byte length, then UTF-8 "key=value"
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"NARTNSR1"
DTYPE_F32 = 0


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)


def save_checkpoint(path, tensors: dict[str, "Tensor | np.ndarray"], metadata: dict[str, str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        value = tensors[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", DTYPE_F32))
        chunks.append(arr.tobytes())
    lines = [f"{k}={metadata[k]}" for k in sorted(metadata)]
    chunks.append(struct.pack("<I", len(lines)))
    for line in lines:
        encoded = line.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    offset = 8
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        (code,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        if code != DTYPE_F32:
            raise CheckpointError(f"{path}: unsupported dtype code {code} for tensor {name}")
        n_elems = int(np.prod(dims, dtype=np.int64)) if rank else 1
        n_bytes = 4 * n_elems
        data = np.frombuffer(blob, dtype="<f4", count=n_elems, offset=offset).reshape(dims)
        offset += n_bytes
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name}")
        tensors[name] = data.copy()
    (line_count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    metadata: dict[str, str] = {}
    for _ in range(line_count):
        (line_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        line = blob[offset : offset + line_len].decode("utf-8")
        offset += line_len
        key, _, value = line.partition("=")
        metadata[key] = value
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return Checkpoint(tensors=tensors, metadata=metadata)


def average_checkpoints(paths: list) -> Checkpoint:
    """Elementwise arithmetic mean of same-named tensors across archives."""
    if not paths:
        raise CheckpointError("average_checkpoints needs at least one checkpoint")
    loaded = [load_checkpoint(p) for p in paths]
    names = sorted(loaded[0].tensors)
    for p, ckpt in zip(paths[1:], loaded[1:]):
        if sorted(ckpt.tensors) != names:
            extra = set(ckpt.tensors) ^ set(names)
            raise CheckpointError(f"{p}: tensor name sets differ (first mismatch: {sorted(extra)[0]})")
        for name in names:
            if ckpt.tensors[name].shape != loaded[0].tensors[name].shape:
                raise CheckpointError(f"{p}: shape mismatch for tensor {name}")
    averaged = {
        name: np.mean([c.tensors[name].astype(np.float64) for c in loaded], axis=0).astype("<f4")
        for name in names
    }
    metadata = dict(loaded[0].metadata)
    metadata["averaged_from"] = str(len(loaded))
    metadata["sources"] = ";".join(Path(p).name for p in paths)
    return Checkpoint(tensors=averaged, metadata=metadata)
