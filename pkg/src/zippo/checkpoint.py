"""Binary checkpoint sections.

Layout (little-endian)::

    b"ZIPPO\\0"  | version u32 | count u32
    per entry:  name_len u32 | utf-8 name | rank u32 | dims u32[rank] | f32 payload

Scalar configuration values are stored as rank-0 entries so a checkpoint
fully describes the model that wrote it.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ZIPPO\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_sections(path: str | os.PathLike, sections: Mapping[str, np.ndarray]) -> None:
    names = list(sections)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate section names")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.asarray(sections[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_sections(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a ZIPPO checkpoint")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return out


def scalar(value) -> float:
    """Read back a rank-0 config entry.

    Payloads are float32, so 1e-3 comes back as 0.0010000000474974513.
    Printing to 7 significant digits and re-parsing restores any decimal
    that had at most that many digits in the first place.
    """
    return float(f"{float(np.asarray(value).reshape(())):.7g}")


def with_prefix(prefix: str, sections: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in sections.items()}


def strip_prefix(prefix: str, sections: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in sections.items() if k.startswith(prefix)}
