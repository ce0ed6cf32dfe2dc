"""Binary checkpoint container: a JSON manifest plus named float32 arrays.

Layout (little-endian):
    magic "ICCKPT01" | manifest length (u64) | manifest JSON (utf-8)
    array count (u64) | per array:
        name length (u16), name (utf-8), rank (u8), dims (u32 each), f32 data
"""

import hashlib
import json
import struct

import numpy as np

MAGIC = b"ICCKPT01"


class CheckpointError(ValueError):
    """Malformed checkpoint file or mismatched model specification."""


def spec_hash(config: dict) -> str:
    """Stable hash of an architecture configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, manifest: dict, arrays: dict):
    chunks = [MAGIC]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<Q", len(blob)))
    chunks.append(blob)
    chunks.append(struct.pack("<Q", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:8]!r}")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (mlen,) = take("<Q")
    if off + mlen > len(raw):
        raise CheckpointError("truncated manifest")
    manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
    off += mlen
    (count,) = take("<Q")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
        size = numel * 4
        if off + size > len(raw):
            raise CheckpointError(f"truncated array {name!r}")
        arrays[name] = (
            np.frombuffer(raw, dtype="<f4", count=numel, offset=off)
            .reshape(dims)
            .copy()
        )
        off += size
    if off != len(raw):
        raise CheckpointError("trailing bytes after last array")
    return manifest, arrays
