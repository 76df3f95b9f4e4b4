"""Versioned binary container for trained models.

Layout (all integers little-endian): an 8-byte magic, a u32 format version,
the phenotype text and a metadata JSON blob (both u32-length-prefixed
UTF-8), then a u32 array count followed by named tensors (u32 name length,
name, u8 dtype code, u8 rank, u32 dims, raw little-endian values). The
phenotype text plus metadata are enough to recompile the network; the
tensors then overwrite its weights and running statistics.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import derive_rng
from .genotype import phenotype_from_text
from .network import NetworkModel, compile_network

MAGIC = b"GNMODEL1"
FORMAT_VERSION = 1

_DTYPE_CODES = {"float64": 0, "float32": 1}
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class ModelFormatError(RuntimeError):
    """Raised for unreadable or incompatible model files."""


def save_model(model: NetworkModel, phenotype_text: str, path, extra_meta: dict = None) -> None:
    meta = {
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = model.snapshot()

    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for text in (phenotype_text, json.dumps(meta)):
        blob = text.encode("utf-8")
        chunks.append(struct.pack("<I", len(blob)))
        chunks.append(blob)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        code = _DTYPE_CODES.get(arr.dtype.name)
        if code is None:
            raise ModelFormatError(f"cannot store dtype {arr.dtype} for {name!r}")
        name_blob = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_blob)))
        chunks.append(name_blob)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ModelFormatError(f"model file {self.path} is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_model(path):
    """Returns (model, phenotype_text, meta)."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(8) != MAGIC:
        raise ModelFormatError(f"{path} is not a model file (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    phenotype_text = reader.take(reader.u32()).decode("utf-8")
    meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    arrays = {}
    dtype = np.float64
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        code, rank = struct.unpack("<BB", reader.take(2))
        if code not in _DTYPES:
            raise ModelFormatError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        raw = reader.take(int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize)
        arrays[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
        dtype = arrays[name].dtype.type

    phenotype = phenotype_from_text(phenotype_text)
    model = compile_network(
        phenotype,
        tuple(meta["input_shape"]),
        meta["num_classes"],
        derive_rng(0),
        dtype=dtype,
    )
    try:
        model.load_snapshot(arrays)
    except KeyError as exc:
        raise ModelFormatError(f"{path} is missing tensor {exc}") from None
    return model, phenotype_text, meta
