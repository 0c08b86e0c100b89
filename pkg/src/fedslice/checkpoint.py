"""Binary checkpoint container for named float64 tensors.

Layout, all little-endian:
  magic "RFFM" | u32 version | u32 tensor count |
  per tensor: u32 name length | UTF-8 name | u32 rank |
              rank x u64 dims | row-major f64 payload
Roundtrips are bit-exact; trailing bytes, bad magic, truncation, and
non-finite payloads are rejected with the failing byte offset.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"RFFM"
VERSION = 1


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += arr.astype("<f8").tobytes(order="C")
    with open(path, "wb") as f:
        f.write(bytes(blob))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated container: needed {n} bytes for {what} "
                              f"at offset {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} at offset 4")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_at = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 tensor name at offset {name_at}") from exc
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims")) if rank else ()
        n_values = 1
        for d in dims:
            n_values *= d
        payload_at = pos
        data = np.frombuffer(take(8 * n_values, f"payload of {name!r}"), dtype="<f8")
        arr = data.astype(np.float64).reshape(dims)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite values in tensor {name!r} at offset {payload_at}")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r} at offset {name_at}")
        tensors[name] = arr
    if pos != len(blob):
        raise FormatError(f"trailing bytes at offset {pos}")
    return tensors
