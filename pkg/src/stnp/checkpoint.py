"""Versioned binary container for model parameters and tree arrays.

Layout (all integers little-endian)::

    magic        8 bytes   b"STNPCKPT"
    version      u32       currently 1
    header_len   u32
    header       header_len bytes of UTF-8 JSON (sorted keys, no whitespace)
    n_entries    u32
    entry * n_entries:
        name_len u16, name (UTF-8)
        dtype    1 byte    b"f" float32 | b"d" float64 | b"q" int64
        ndim     u8
        dims     u32 * ndim
        values   prod(dims) * itemsize bytes, little-endian, row-major

Neural process weights are stored as float32; tree baselines use float64
thresholds and int64 index arrays so reloaded trees route samples exactly as
the fitted ones did. Entries are written in the order given; loading then
saving reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STNPCKPT"
VERSION = 1
_DTYPES = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8"), b"q": np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def encode_container(header: dict, entries, default_float: str = "f") -> bytes:
    """Serialize ``header`` and ``(name, array)`` entries to bytes."""
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    entries = list(entries.items()) if isinstance(entries, dict) else list(entries)
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            code = b"q"
        elif arr.dtype == np.dtype("<f8") and default_float == "d":
            code = b"d"
        else:
            code = default_float.encode()
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(code)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_container(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    try:
        version, head_len = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        pos = 16
        header = json.loads(blob[pos:pos + head_len].decode("utf-8"))
        pos += head_len
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        entries: dict[str, np.ndarray] = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code = blob[pos:pos + 1]
            pos += 1
            if code not in _DTYPES:
                raise CheckpointError(f"entry {name!r}: unknown dtype code {code!r}")
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            count = int(np.prod(dims)) if ndim else 1
            nbytes = count * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"entry {name!r}: truncated data")
            entries[name] = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated container: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return header, entries


def save_container(path, header: dict, entries, default_float: str = "f") -> None:
    Path(path).write_bytes(encode_container(header, entries, default_float))


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes())


def save_anp(path, model, extra: dict | None = None) -> None:
    from .anp import config_to_dict

    header = {"kind": "anp", "config": config_to_dict(model.config)}
    if extra:
        header.update(extra)
    save_container(path, header, [(k, p.data) for k, p in model.params.items()])


def load_anp(path, dtype=np.float32):
    from .anp import ANP, config_from_dict

    header, entries = load_container(path)
    if header.get("kind") != "anp":
        raise CheckpointError(f"expected an anp checkpoint, found kind={header.get('kind')!r}")
    return ANP(config_from_dict(header["config"]), entries, dtype=dtype), header
