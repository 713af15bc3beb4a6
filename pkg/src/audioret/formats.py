"""Binary containers: chunk/embedding store ("AEMB") and checkpoints ("ACKP"), plus CSV writers.

AEMB layout (little-endian)::

    b"AEMB" | u32 version=1 | u32 count | u32 dim | count x u64 ids | count*dim x f32

ACKP layout (little-endian)::

    b"ACKP" | u32 version=1 | u64 header_len | JSON header | tensor payload (f64)

The JSON header lists tensors as ``[name, shape]`` in payload order and holds
the step count, config, config hash and any extra metadata.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadMagic, BadVersion, ConfigError, ParseError, TruncatedFile

AEMB_MAGIC = b"AEMB"
CKPT_MAGIC = b"ACKP"
VERSION = 1


def _read_exact(buf: memoryview, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise TruncatedFile(f"truncated while reading {what}: need {n} bytes at {offset}, file has {len(buf)}")
    return bytes(buf[offset : offset + n])


def encode_embeddings(ids: Sequence[int], vectors: np.ndarray) -> bytes:
    ids_arr = np.asarray(list(ids), dtype=np.uint64)
    vec = np.asarray(vectors, dtype=np.float64)
    if vec.ndim != 2:
        vec = vec.reshape(len(ids_arr), -1) if vec.size == 0 else vec
    if vec.ndim != 2 or vec.shape[0] != ids_arr.size:
        raise ConfigError(f"{ids_arr.size} ids but vectors of shape {vec.shape}")
    if np.unique(ids_arr).size != ids_arr.size:
        raise ConfigError("embedding ids must be unique")
    header = AEMB_MAGIC + struct.pack("<III", VERSION, ids_arr.size, vec.shape[1])
    return header + ids_arr.astype("<u8").tobytes() + vec.astype("<f4").tobytes()


def decode_embeddings(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    buf = memoryview(data)
    if _read_exact(buf, 0, 4, "magic") != AEMB_MAGIC:
        raise BadMagic("not an AEMB embedding container")
    version, count, dim = struct.unpack("<III", _read_exact(buf, 4, 12, "header"))
    if version != VERSION:
        raise BadVersion(f"unsupported AEMB version {version}")
    ids = np.frombuffer(_read_exact(buf, 16, 8 * count, "ids"), dtype="<u8").astype(np.uint64)
    payload = _read_exact(buf, 16 + 8 * count, 4 * count * dim, "vectors")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    if len(buf) != 16 + 8 * count + 4 * count * dim:
        raise ParseError("trailing bytes after AEMB payload")
    return ids, vectors


def write_embeddings(path: str | Path, ids: Sequence[int], vectors: np.ndarray) -> None:
    Path(path).write_bytes(encode_embeddings(ids, vectors))


def read_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return decode_embeddings(data)


# ------------------------------------------------------------- checkpoints

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    """``tensors`` is written in insertion order; ``meta`` must be JSON-serialisable."""
    layout = [[name, list(np.shape(arr))] for name, arr in tensors.items()]
    header = json.dumps({"tensors": layout, **meta}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in tensors.values())
    return CKPT_MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + payload


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    buf = memoryview(data)
    if _read_exact(buf, 0, 4, "magic") != CKPT_MAGIC:
        raise BadMagic("not a checkpoint file")
    version, hlen = struct.unpack("<IQ", _read_exact(buf, 4, 12, "header"))
    if version != VERSION:
        raise BadVersion(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(_read_exact(buf, 16, hlen, "json header"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}") from exc
    offset = 16 + hlen
    tensors = {}
    for name, shape in meta.pop("tensors"):
        n = int(np.prod(shape)) if shape else 1
        raw = _read_exact(buf, offset, 8 * n, f"tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(buf):
        raise ParseError("trailing bytes after checkpoint payload")
    return tensors, meta


# --------------------------------------------------------------------- CSV

def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    return out.getvalue()


def format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).write_text(csv_text(header, rows))
