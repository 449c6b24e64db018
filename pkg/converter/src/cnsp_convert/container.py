"""Stand-alone reader/writer for the CNSP weight and CNDS dataset containers.

These byte layouts are the interface to the modularization toolkit; this
module implements them from the documented format so the converter stays
independent of the toolkit's code.

CNSP: magic b"CNSP" | u32 version=1 | u32 count
      per tensor: u16 name_len | utf-8 name | u8 ndim | ndim x u32 dims | f32 data
CNDS: magic b"CNDS" | u32 count | u32 C | u32 H | u32 W | u32 num_classes
      count*C*H*W f32 pixels | count x u32 labels
All integers little-endian; tensor data little-endian float32.
"""

from __future__ import annotations

import struct

import numpy as np

WEIGHT_MAGIC = b"CNSP"
WEIGHT_VERSION = 1
DATASET_MAGIC = b"CNDS"


class ContainerError(Exception):
    pass


def write_weights(entries: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    out += WEIGHT_MAGIC
    out += struct.pack("<II", WEIGHT_VERSION, len(entries))
    for name, tensor in entries.items():
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        name_bytes = name.encode("utf-8")
        out += struct.pack("<H", len(name_bytes))
        out += name_bytes
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def read_weights(data: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ContainerError(f"truncated container at offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != WEIGHT_MAGIC:
        raise ContainerError("bad magic: not a CNSP container")
    version, count = struct.unpack("<II", take(8))
    if version != WEIGHT_VERSION:
        raise ContainerError(f"unsupported CNSP version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        entries[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    if pos != len(data):
        raise ContainerError("trailing bytes after the last tensor")
    return entries


def write_dataset(images: np.ndarray, labels: np.ndarray, num_classes: int) -> bytes:
    images = np.ascontiguousarray(images, dtype="<f4")
    if images.ndim != 4:
        raise ContainerError(f"images must be (count, C, H, W), got {images.shape}")
    count, c, h, w = images.shape
    out = bytearray()
    out += DATASET_MAGIC
    out += struct.pack("<5I", count, c, h, w, num_classes)
    out += images.tobytes()
    out += np.ascontiguousarray(labels, dtype="<u4").tobytes()
    return bytes(out)
