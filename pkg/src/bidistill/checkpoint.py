"""Binary checkpoint format: named float32 tensors, nothing else.

Layout (little-endian throughout):
  magic  = b"SBDN"
  u32    format version (1)
  u32    tensor count
  per tensor, in sorted name order:
    u16  name byte length, then the UTF-8 name
    u8   rank
    u32  per dimension, the size
    f32  row-major data

Model configuration is not stored; tools that rebuild a model from a
checkpoint take the config separately.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputError

MAGIC = b"SBDN"
VERSION = 1


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    off = 4
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = arr.copy()
    if off != len(blob):
        raise InputError(f"{path}: {len(blob) - off} trailing bytes after last tensor")
    return tensors


def model_state(model) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in model.parameters().items()}


def load_into_model(model, path: str) -> None:
    tensors = load_checkpoint(path)
    params = model.parameters()
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise InputError(
            f"{path}: parameter names do not match model (missing {missing}, unexpected {extra})")
    for name, tensor in params.items():
        if tensors[name].shape != tensor.data.shape:
            raise InputError(
                f"{path}: shape mismatch for {name}: "
                f"checkpoint {tensors[name].shape} vs model {tensor.data.shape}")
        tensor.data = tensors[name].astype(np.float32)


def average_checkpoints(paths: list[str]) -> dict[str, np.ndarray]:
    """Arithmetic mean of checkpoints with identical tensor sets.

    Accumulation runs in float64 so averaging k copies of one checkpoint
    reproduces it bit for bit.
    """
    if not paths:
        raise InputError("average_checkpoints: no paths given")
    first = load_checkpoint(paths[0])
    acc = {name: arr.astype(np.float64) for name, arr in first.items()}
    for path in paths[1:]:
        other = load_checkpoint(path)
        if set(other) != set(acc):
            raise InputError(f"{path}: tensor names differ from {paths[0]}")
        for name, arr in other.items():
            if arr.shape != acc[name].shape:
                raise InputError(f"{path}: shape mismatch for {name}")
            acc[name] += arr
    k = float(len(paths))
    return {name: (a / k).astype(np.float32) for name, a in acc.items()}
