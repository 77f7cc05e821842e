"""NTL v1 checkpoint format.

Layout: magic ``NTL1``; u32 little-endian tensor count; per tensor a u16 name
length, UTF-8 name, u8 dtype code (0 = float32), u8 rank, rank u32 dims and
the raw little-endian float32 payload; a trailing CRC32 over all preceding
bytes; finally a u32-length-prefixed UTF-8 JSON metadata footer.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"NTL1"
DTYPE_F32 = 0


class CheckpointFormatError(ValueError):
    pass


class ChecksumError(CheckpointFormatError):
    pass


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointFormatError(f"tensor name too long: {name!r}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    footer = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = body + struct.pack("<I", zlib.crc32(body)) + struct.pack("<I", len(footer)) + footer
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read an NTL v1 file; integrity is verified before anything is built."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not an NTL v1 checkpoint (bad magic)")

    pos = 4
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries: list[tuple[str, int, tuple]] = []
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointFormatError(f"{path}: truncated header near byte {pos}: {e}") from None
        if dtype != DTYPE_F32:
            raise CheckpointFormatError(f"{path}: unsupported dtype code {dtype} for {name!r}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise CheckpointFormatError(f"{path}: payload for {name!r} runs past end of file")
        entries.append((name, pos, dims))
        pos += nbytes

    if pos + 8 > len(blob):
        raise CheckpointFormatError(f"{path}: missing checksum/footer")
    (stored_crc,) = struct.unpack_from("<I", blob, pos)
    if zlib.crc32(blob[:pos]) != stored_crc:
        raise ChecksumError(f"{path}: CRC32 mismatch; refusing to load")
    pos += 4
    (flen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if pos + flen > len(blob):
        raise CheckpointFormatError(f"{path}: footer runs past end of file")
    try:
        meta = json.loads(blob[pos : pos + flen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: bad metadata footer: {e}") from None

    tensors = {}
    for name, off, dims in entries:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
        tensors[name] = arr.copy()
    return tensors, meta
