"""Binary checkpoint container.

Layout (little endian)::

    b"LALN"  u32 version=1  u32 n_entries
    per entry: u16 name_len, name (utf-8), u8 dtype (1 = f64), u8 ndim,
               ndim x u32 dims, raw values
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"LALN"
VERSION = 1
DTYPES = {1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def encode(state: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", 1, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at byte offset {pos}, file has {len(buf)}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic at byte offset 0 (not a LALN checkpoint)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte offset 4")
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        at = pos
        dtype_code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if dtype_code not in DTYPES:
            raise CheckpointError(f"entry {name!r}: unknown dtype code {dtype_code} at byte offset {at}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        dt = DTYPES[dtype_code]
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = take(size * dt.itemsize, f"values of {name!r}")
        state[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after last entry at byte offset {pos}")
    return state


def save_state(state: dict[str, np.ndarray], path) -> None:
    """Write atomically: a failed save never leaves a partial file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(state))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_state(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def save_checkpoint(model, path) -> None:
    save_state(model.state_dict(), path)


def load_checkpoint(path):
    """Rebuild a :class:`~loralign.model.ToyRestorer`, adapters included."""
    from .lora import LoraAdapter
    from .autodiff import Param
    from .model import ToyRestorer

    state = load_state(path)
    model = ToyRestorer()
    for name in [n for n in state if n.endswith(".lora_A")]:
        layer_name = name[: -len(".lora_A")]
        if layer_name not in model.layers or f"{layer_name}.lora_B" not in state:
            raise CheckpointError(f"adapter entry {name!r} has no matching layer or B factor")
        a, b = state[name], state[f"{layer_name}.lora_B"]
        model.layers[layer_name].adapter = LoraAdapter(
            Param(a, name=name), Param(b, name=f"{layer_name}.lora_B"), a.shape[1]
        )
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    extra = set(state) - set(model.named_parameters())
    if extra:
        raise CheckpointError(f"unknown checkpoint entries: {sorted(extra)[:5]}")
    return model
