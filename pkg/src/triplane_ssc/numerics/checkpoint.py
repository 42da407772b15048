"""Binary parameter checkpoints.

Layout (little-endian): magic ``ETFW``, version u32, block count u32, then per
block: name length u32, UTF-8 name, rank u32, extents u64 x rank, f64 payload.
"""
import struct

import numpy as np

MAGIC = b"ETFW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(state):
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f8")  # tobytes() is C order; ascontiguousarray would lift 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf):
    def need(offset, n, what):
        if offset + n > len(buf):
            raise CheckpointError(f"truncated checkpoint reading {what} at offset {offset}")

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at offset 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    offset = 12
    state = {}
    for _ in range(count):
        need(offset, 4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        need(offset, nlen, "name")
        try:
            name = buf[offset : offset + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid UTF-8 name at offset {offset}") from exc
        offset += nlen
        need(offset, 4, "rank")
        (rank,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        need(offset, 8 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}Q", buf, offset)
        offset += 8 * rank
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        need(offset, nbytes, f"payload of {name}")
        state[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(buf):
        raise CheckpointError(f"trailing bytes after last block at offset {offset}")
    return state


def save_checkpoint(state, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(state))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
