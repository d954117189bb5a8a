"""Binary tensor (MSBT) and checkpoint (MSBC) files.

All integers little-endian.  MSBT: ``b"MSBT"``, u32 version, u32 rank,
rank x u64 dims, float32 row-major payload.  MSBC: ``b"MSBC"``, u32 version,
u32-length-prefixed UTF-8 ``key=value`` block, u32 entry count, then per entry
u32 name length, UTF-8 name, inline MSBT; then a flag byte, and when the flag
is 1 the ADAM moments follow in the same entry layout (``adam_m/<name>``,
``adam_v/<name>``).
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"MSBT"
CHECKPOINT_MAGIC = b"MSBC"
VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(f, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<II", VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes())


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of file")
    return buf


def read_tensor(f):
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return data.reshape(dims).astype(np.float32)


def save_tensor(path, array):
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


def _write_entries(f, entries):
    f.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        write_tensor(f, arr)


def _read_entries(f):
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out = []
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, n).decode("utf-8")
        out.append((name, read_tensor(f)))
    return out


def checkpoint_bytes(header, store, with_adam=True):
    f = io.BytesIO()
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<I", VERSION))
    raw = header.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    _write_entries(f, [(p.name, p.value.data) for p in store])
    f.write(struct.pack("<B", 1 if with_adam else 0))
    if with_adam:
        _write_entries(
            f,
            [(f"adam_m/{p.name}", p.adam_m) for p in store] + [(f"adam_v/{p.name}", p.adam_v) for p in store],
        )
    return f.getvalue()


def write_checkpoint(path, header, store, with_adam=True):
    Path(path).write_bytes(checkpoint_bytes(header, store, with_adam))


def read_checkpoint(path):
    """Return ``(header_text, [(name, array)], adam_dict_or_None)``."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        header = _read_exact(f, n).decode("utf-8")
        entries = _read_entries(f)
        flag = f.read(1)
        adam = None
        if flag and flag[0] == 1:
            adam = dict(_read_entries(f))
    return header, entries, adam
