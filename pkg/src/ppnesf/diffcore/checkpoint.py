"""Binary checkpoint container.

Layout (little endian)::

    b"NESF" | u32 version | section*

    section = u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f32 values

Sections whose names start with ``meta.`` carry UTF-8 text, one byte per value.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NESF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def text_section(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def section_text(values: np.ndarray) -> str:
    return np.asarray(values).astype(np.uint8).tobytes().decode("utf-8")


def encode_sections(sections: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in sections.items():
        arr = np.array(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_sections(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic, not a NESF checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, out = 8, {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        name = blob[pos + 4 : pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        shape = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
        pos += 4 + 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return out


def save_checkpoint(path, sections: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sections = dict(sections)
    if meta is not None:
        sections["meta.json"] = text_section(json.dumps(meta, sort_keys=True))
    path.write_bytes(encode_sections(sections))
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    sections = decode_sections(path.read_bytes())
    meta = json.loads(section_text(sections.pop("meta.json"))) if "meta.json" in sections else {}
    return sections, meta
