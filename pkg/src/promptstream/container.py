"""Versioned binary container for named tensors plus JSON metadata.

Layout: magic ``CPTRD`` | version uint32 LE | header-length uint32 LE |
header JSON (UTF-8) | tensor payload. The header carries the kind of
artifact, the model-config fields, free-form metadata, and a tensor
directory (name, shape, element count) in payload order. Tensor data is
stored as little-endian float32, so writing quantizes float64 values;
callers that need exact round trips snap values to float32 precision first
(see :func:`snap_f32`).
"""

import json
import struct

import numpy as np

MAGIC = b"CPTRD"
VERSION = 1


class ContainerError(ValueError):
    """Raised for malformed container files; message includes a byte position."""


def snap_f32(arr: np.ndarray) -> np.ndarray:
    """Round a float64 array to the nearest float32-representable values."""
    return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


def write_container(path, kind: str, config: dict, tensors: dict, meta: dict | None = None):
    """Write named tensors with metadata; values are stored as float32 LE."""
    directory = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        data = arr.astype("<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape)})
        payloads.append(data)
    header = {
        "kind": kind,
        "config": config,
        "meta": meta or {},
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for data in payloads:
            fh.write(data)


def read_container(path):
    """Read a container; returns (kind, config, meta, tensors dict of float64)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic at byte 0 (not a CPTRD container)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise ContainerError(f"{path}: truncated header at byte {len(blob)}")
    (version,) = struct.unpack_from("<I", blob, pos)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version} at byte {pos}")
    pos += 4
    (header_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + header_len:
        raise ContainerError(f"{path}: truncated header at byte {len(blob)}")
    try:
        header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header JSON at byte {pos}: {exc}") from exc
    pos += header_len
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * count
        if len(blob) < pos + nbytes:
            raise ContainerError(
                f"{path}: tensor {entry['name']!r} truncated at byte {len(blob)} "
                f"(need {pos + nbytes})"
            )
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        tensors[entry["name"]] = flat.astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(blob):
        raise ContainerError(f"{path}: {len(blob) - pos} trailing bytes after payload at byte {pos}")
    return header["kind"], header["config"], header["meta"], tensors
