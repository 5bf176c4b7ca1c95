"""On-disk formats: codebook files, tensor checkpoints, semantic-ID maps.

All binary integers are unsigned 32-bit little-endian and all floats 32-bit
little-endian.

Codebook file::

    b"SODA-CB" | version | L | K | d_code | L*K*d_code floats (layer, codeword, dim)

Checkpoint container::

    b"SODA-CK" | version | n_tensors | per tensor:
        name_len | utf-8 name | rank | dims... | floats (row-major)
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .quantizer import CodeSequence

CODEBOOK_MAGIC = b"SODA-CB"
CHECKPOINT_MAGIC = b"SODA-CK"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def save_codebooks(books: torch.Tensor | np.ndarray, path) -> None:
    arr = np.asarray(books.detach().cpu() if torch.is_tensor(books) else books, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"codebooks must be (L, K, d_code), got shape {arr.shape}")
    L, K, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<4I", FORMAT_VERSION, L, K, d))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_codebooks(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[: len(CODEBOOK_MAGIC)] != CODEBOOK_MAGIC:
        raise FormatError(f"{path}: not a codebook file")
    off = len(CODEBOOK_MAGIC)
    if len(data) < off + 16:
        raise FormatError(f"{path}: truncated codebook header")
    version, L, K, d = struct.unpack_from("<4I", data, off)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported codebook version {version}")
    off += 16
    expected = L * K * d * 4
    if len(data) - off != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(data) - off}")
    return np.frombuffer(data, dtype="<f4", offset=off).reshape(L, K, d).astype(np.float32)


def save_checkpoint(tensors: Mapping[str, torch.Tensor], path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<2I", FORMAT_VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 8:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, count = struct.unpack_from("<2I", data, off)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    try:
        out = _read_tensors(data, off, count)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    off, out = out
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return out


def _read_tensors(data: bytes, off: int, count: int):
    out = OrderedDict()
    for _ in range(count):
        (n,) = _U32.unpack_from(data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = _U32.unpack_from(data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return off, out


def save_semantic_ids(id_map: Mapping[str, CodeSequence], path) -> None:
    with open(path, "w") as fh:
        for item in sorted(id_map):
            seq = id_map[item]
            fh.write("\t".join([item, *map(str, seq.codes), str(seq.disambiguation)]) + "\n")


def load_semantic_ids(path) -> dict[str, CodeSequence]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise FormatError(f"{path}:{lineno}: expected item_id, codes..., disambiguation")
        out[fields[0]] = CodeSequence(tuple(int(c) for c in fields[1:-1]), int(fields[-1]))
    return out
