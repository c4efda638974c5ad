"""On-disk formats: portable 2D arrays and the checkpoint container.

Portable array files carry one ASCII header line
``"H W dtype=f32 order=row-major\\n"`` followed by raw little-endian
float32 values in row-major order. Checkpoints are a single file:
8-byte magic, little-endian uint64 header length, a UTF-8 JSON header
holding the user manifest plus a name/shape tensor index, then the
concatenated raw little-endian float32 tensor payloads.
"""

import json
from pathlib import Path

import numpy as np

__all__ = ["save_array", "load_array", "save_checkpoint", "load_checkpoint"]

_CHECKPOINT_MAGIC = b"AGCKPT\x00\x01"


def save_array(path, values):
    """Write a 2D float array in the portable array format."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"portable arrays are 2D, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"{h} {w} dtype=f32 order=row-major\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_array(path):
    """Read a portable 2D float32 array."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        fields = header.split()
        if len(fields) != 4 or fields[2] != "dtype=f32" or fields[3] != "order=row-major":
            raise ValueError(f"{path}: unrecognized array header {header!r}")
        h, w = int(fields[0]), int(fields[1])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).copy()


def save_checkpoint(path, manifest, tensors):
    """Write a manifest plus named float32 tensors to one container file.

    Args:
        manifest: JSON-serializable metadata dict.
        tensors: mapping name -> array-like; each is stored as
            little-endian float32 with its shape in the index.
    """
    blobs = []
    index = []
    offset = 0
    for name, values in tensors.items():
        arr = np.asarray(values, dtype="<f4")
        blob = arr.tobytes()  # row-major copy regardless of input layout
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"manifest": manifest, "tensors": index}, sort_keys=True).encode(
        "utf-8"
    )
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(np.uint64(len(header)).tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint container; returns (manifest, {name: float32 array})."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint container")
        header_len = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return header["manifest"], tensors
