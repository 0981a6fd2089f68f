"""
Parameter checkpoints.

HPRNCKPT layout (all little-endian):
    magic "HPRNCKPT" | version u32 | count u32 |
    per parameter: name length u16 | name bytes (utf-8) | rank u8 | dims u32 * rank | float32 values

The 32-bit file is the portable artifact. Resuming a run in 64-bit mode also
needs the exact float64 parameters and Adam moments, which go into an .npz
training-state sidecar next to it.
"""

import struct
from collections import OrderedDict
from typing import Dict, Iterable, Tuple

import numpy as np

from hprn_errors import CheckpointError

MAGIC = b"HPRNCKPT"
VERSION = 1


def save_checkpoint(path: str, named_arrays: Iterable[Tuple[str, np.ndarray]]):
    """Write (name, array) pairs in the HPRNCKPT format."""
    items = [(name, np.asarray(arr)) for name, arr in named_arrays]
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path: str) -> "OrderedDict[str, np.ndarray]":
    """Read an HPRNCKPT file into an ordered name -> float32 array mapping."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}", io_problem=True)

    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an HPRNCKPT file", io_problem=True)
    offset = 8
    version, count = _unpack(blob, "<II", offset, path)
    offset += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}", io_problem=True)

    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = _unpack(blob, "<H", offset, path)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = _unpack(blob, "<B", offset, path)
        offset += 1
        dims = _unpack(blob, f"<{rank}I", offset, path)
        offset += 4 * rank
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset + n_bytes > len(blob):
            raise CheckpointError(f"{path}: truncated values for parameter '{name}'", parameter=name, io_problem=True)
        state[name] = np.frombuffer(blob, dtype="<f4", count=n_bytes // 4, offset=offset).reshape(dims).astype(np.float32)
        offset += n_bytes
    return state


def _unpack(blob: bytes, fmt: str, offset: int, path: str):
    size = struct.calcsize(fmt)
    if offset + size > len(blob):
        raise CheckpointError(f"{path}: truncated at byte {offset}", io_problem=True)
    return struct.unpack_from(fmt, blob, offset)


def check_compatible(state: Dict[str, np.ndarray], expected: Dict[str, Tuple[int, ...]]):
    """Raise CheckpointError naming the first parameter whose presence or shape disagrees."""
    for name, shape in expected.items():
        if name not in state:
            raise CheckpointError(f"Checkpoint has no parameter '{name}' required by the config", parameter=name)
        if tuple(state[name].shape) != tuple(shape):
            raise CheckpointError(
                f"Parameter '{name}': checkpoint shape {tuple(state[name].shape)} != config shape {tuple(shape)}",
                parameter=name,
            )
    extra = [name for name in state if name not in expected]
    if extra:
        raise CheckpointError(f"Checkpoint parameter '{extra[0]}' is not part of the config", parameter=extra[0])


# ========================================
# Training-state sidecar
# ========================================
def save_training_state(path: str, params: Dict[str, np.ndarray], first_moments: Dict[str, np.ndarray],
                        second_moments: Dict[str, np.ndarray], step: int, epoch: int, best_val_mrae: float):
    arrays = {"meta": np.array([step, epoch], dtype=np.int64), "best_val_mrae": np.array(best_val_mrae)}
    for name, arr in params.items():
        arrays[f"param__{name}"] = arr
        arrays[f"m__{name}"] = first_moments[name]
        arrays[f"v__{name}"] = second_moments[name]
    np.savez(path, **arrays)


def load_training_state(path: str) -> dict:
    try:
        archive = np.load(path)
    except OSError as e:
        raise CheckpointError(f"Cannot read training state {path}: {e}", io_problem=True)
    with archive:
        state = {"params": {}, "m": {}, "v": {}}
        for key in archive.files:
            if "__" in key:
                kind, name = key.split("__", 1)
                state["params" if kind == "param" else kind][name] = archive[key]
        state["step"], state["epoch"] = (int(x) for x in archive["meta"])
        state["best_val_mrae"] = float(archive["best_val_mrae"])
    return state
