"""Binary checkpoint format for named parameters plus optimizer state.

Layout (all integers little-endian):

    magic    8 bytes  b"JALNCKPT"
    version  uint32
    n_params uint32
    records  n_params * [name_len:uint16, name:utf8, dtype:uint8,
                         ndim:uint8, shape:int64*ndim, raw buffer]
    has_state uint8
    if has_state: step:uint64, n_slots:uint32, records (same encoding,
                  slot names like "m.<param>" / "v.<param>")
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"JALNCKPT"
VERSION = 1

_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: "<f4", 1: "<f8"}


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class TrainState:
    """Optimizer moments and step counter carried across runs."""

    step: int = 0
    slots: dict = field(default_factory=dict)


def _write_record(fh, name: str, arr: np.ndarray):
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for '{name}'")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())


def _read_record(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    code, ndim = struct.unpack("<BB", fh.read(2))
    shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
    dtype = np.dtype(_CODE_TO_DTYPE[code])
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
    return name, arr.reshape(shape).copy()


def save_checkpoint(path, params: dict, train_state: TrainState | None = None):
    """Write named parameter arrays (and optional optimizer state) to path."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = params[name]
            if not isinstance(arr, np.ndarray):
                arr = arr.data  # Tensor
            _write_record(fh, name, arr)
        if train_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", train_state.step))
            fh.write(struct.pack("<I", len(train_state.slots)))
            for name in sorted(train_state.slots):
                _write_record(fh, name, train_state.slots[name])


def load_checkpoint(path) -> tuple[dict, TrainState | None]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = dict(_read_record(fh) for _ in range(n_params))
        (has_state,) = struct.unpack("<B", fh.read(1))
        state = None
        if has_state:
            (step,) = struct.unpack("<Q", fh.read(8))
            (n_slots,) = struct.unpack("<I", fh.read(4))
            state = TrainState(step=step,
                               slots=dict(_read_record(fh) for _ in range(n_slots)))
    return params, state
