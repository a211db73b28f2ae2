"""Binary on-disk formats: framed float32 matrices and named-tensor blobs.

Both formats are little-endian and bit-exact on round-trip. Sequence files
carry a 16-byte header (magic, version, T, D_total) followed by a row-major
float32 [T x D_total] matrix. Checkpoint blobs reuse the same float32
little-endian convention with a per-tensor name/dtype/shape frame.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

SEQUENCE_MAGIC = b"GMC1"
BLOB_MAGIC = b"GTB1"
FORMAT_VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f4"): b"f",
    np.dtype("<f8"): b"d",
    np.dtype("<i8"): b"i",
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class FormatError(Exception):
    """Raised when a binary file fails structural validation."""


def write_matrix(path: Path, data: np.ndarray) -> None:
    """Write a [T x D] float32 matrix with the 16-byte sequence header."""
    if data.ndim != 2:
        raise FormatError(f"expected 2-D matrix, got shape {data.shape}")
    rows, cols = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SEQUENCE_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, rows, cols))
        fh.write(payload.tobytes())


def read_matrix(path: Path, expect_rows: int | None = None,
                expect_cols: int | None = None) -> np.ndarray:
    """Read a framed float32 matrix, validating header and payload length."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != SEQUENCE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    expected = 16 + rows * cols * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length {len(raw) - 16} does not match "
            f"header shape ({rows} x {cols})")
    if expect_rows is not None and rows != expect_rows:
        raise FormatError(f"{path}: row count {rows} != manifest {expect_rows}")
    if expect_cols is not None and cols != expect_cols:
        raise FormatError(f"{path}: col count {cols} != manifest {expect_cols}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, cols).copy()


def write_tensor_blob(path: Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays as a single blob; float arrays stored as float32."""
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, array in tensors.items():
            arr = np.asarray(array)
            if arr.dtype.kind == "f" and arr.dtype != np.dtype("<f8"):
                arr = arr.astype("<f4")
            elif arr.dtype.kind in "iub" and arr.dtype != np.dtype("<i8"):
                arr = arr.astype("<i8")
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(_DTYPE_TAGS[arr.dtype])
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensor_blob(path: Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != BLOB_MAGIC:
        raise FormatError(f"{path}: not a tensor blob")
    version, count = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported blob version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag = raw[offset:offset + 1]
        offset += 1
        if tag not in _TAG_DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag!r} for {name}")
        dtype = _TAG_DTYPES[tag]
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated tensor payload for {name}")
        out[name] = np.frombuffer(
            raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
            offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return out
