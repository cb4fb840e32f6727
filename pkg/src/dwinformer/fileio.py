"""Binary file formats: tensor files, checkpoint containers, 16-bit PGM.

Tensor file (little-endian)::

    offset  size      field
    0       4         magic b"DWTN"
    4       1         version (1)
    5       1         dtype (0 = float32, 1 = float64)
    6       1         rank r
    7       4 * r     dims, uint32 each
    7+4r    ...       row-major payload

Checkpoint container (little-endian)::

    b"DWCK", version u8, meta_len u32, meta (UTF-8 JSON, sorted keys),
    count u32, then per entry:
        name_len u16, name (UTF-8), rank u8, dims u32 * rank,
        offset u64, length u64
    followed by the concatenated tensor-file blobs; ``offset`` is relative
    to the first blob.
"""

import json
import struct

import numpy as np

from dwinformer.errors import DomainError, FormatError

MAGIC = b"DWTN"
VERSION = 1
HEADER_SIZE = 7
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

CKPT_MAGIC = b"DWCK"


def _as_array(t):
    return t.data if hasattr(t, "data") and not isinstance(t, (np.ndarray, np.generic)) else np.asarray(t)


def encode_tensor(t):
    arr = _as_array(t)
    if arr.dtype not in _DTYPE_CODES:
        raise TypeError(f"cannot encode dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank above 255 is not representable")
    header = MAGIC + bytes([VERSION, _DTYPE_CODES[arr.dtype], arr.ndim])
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header + dims + payload


def decode_tensor(buf, base=0):
    """Parse one tensor file from ``buf``; ``base`` shifts reported offsets."""
    n = len(buf)
    if n < 4 or bytes(buf[:4]) != MAGIC:
        raise FormatError("bad magic, expected b'DWTN'", base)
    if n < 5:
        raise FormatError("truncated header: missing version", base + 4)
    if buf[4] != VERSION:
        raise FormatError(f"unsupported version {buf[4]}", base + 4)
    if n < 6:
        raise FormatError("truncated header: missing dtype", base + 5)
    if buf[5] not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {buf[5]}", base + 5)
    if n < 7:
        raise FormatError("truncated header: missing rank", base + 6)
    dtype = _CODE_DTYPES[buf[5]]
    rank = buf[6]
    dims = []
    pos = HEADER_SIZE
    for _ in range(rank):
        if pos + 4 > n:
            raise FormatError("truncated dimension table", base + pos)
        (d,) = struct.unpack_from("<I", buf, pos)
        if d == 0:
            raise FormatError("zero-length dimension", base + pos)
        dims.append(d)
        pos += 4
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if n - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {n - pos}", base + n)
    if n - pos > need:
        raise FormatError(f"{n - pos - need} trailing bytes after payload", base + pos + need)
    arr = np.frombuffer(bytes(buf[pos:pos + need]), dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t))


def read_tensor(path):
    """Read a tensor file into a :class:`~dwinformer.tensor.Tensor`."""
    from dwinformer.tensor import Tensor

    with open(path, "rb") as fh:
        arr = decode_tensor(fh.read())
    return Tensor(arr, dtype=arr.dtype)


# ---------------------------------------------------------------- checkpoints


def encode_container(tensors, meta=None):
    """Serialize an ordered ``{name: array}`` mapping plus JSON metadata."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs, entries = [], []
    offset = 0
    for name, t in tensors.items():
        blob = encode_tensor(t)
        arr = _as_array(t)
        nb = name.encode("utf-8")
        entries.append(struct.pack("<H", len(nb)) + nb + bytes([arr.ndim])
                       + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<QQ", offset, len(blob)))
        blobs.append(blob)
        offset += len(blob)
    head = CKPT_MAGIC + bytes([VERSION]) + struct.pack("<I", len(meta_bytes)) + meta_bytes
    head += struct.pack("<I", len(entries))
    return head + b"".join(entries) + b"".join(blobs)


def decode_container(buf):
    """Inverse of :func:`encode_container`; returns ``(dict of arrays, meta)``."""
    n = len(buf)
    if n < 4 or bytes(buf[:4]) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic, expected b'DWCK'", 0)
    if n < 9:
        raise FormatError("truncated checkpoint header", n)
    if buf[4] != VERSION:
        raise FormatError(f"unsupported checkpoint version {buf[4]}", 4)
    (meta_len,) = struct.unpack_from("<I", buf, 5)
    pos = 9
    if pos + meta_len + 4 > n:
        raise FormatError("truncated checkpoint metadata", n)
    try:
        meta = json.loads(bytes(buf[pos:pos + meta_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("checkpoint metadata is not valid JSON", pos) from None
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = []
    for _ in range(count):
        try:
            (ln,) = struct.unpack_from("<H", buf, pos)
            name = bytes(buf[pos + 2:pos + 2 + ln]).decode("utf-8")
            pos += 2 + ln
            rank = buf[pos]
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            off, length = struct.unpack_from("<QQ", buf, pos)
            pos += 16
        except (struct.error, IndexError):
            raise FormatError("truncated checkpoint manifest", pos) from None
        entries.append((name, tuple(dims), off, length))
    out = {}
    for name, dims, off, length in entries:
        start = pos + off
        if start + length > n:
            raise FormatError(f"tensor {name!r} runs past end of file", n)
        arr = decode_tensor(memoryview(buf)[start:start + length], base=start)
        if arr.shape != dims:
            raise FormatError(f"tensor {name!r}: manifest shape {dims} != stored {arr.shape}", start)
        out[name] = arr
    return out, meta


def write_container(path, tensors, meta=None):
    with open(path, "wb") as fh:
        fh.write(encode_container(tensors, meta))


def read_container(path):
    with open(path, "rb") as fh:
        return decode_container(fh.read())


# ---------------------------------------------------------------- PGM


def depth_to_pgm_values(depth, max_depth):
    d = np.asarray(_as_array(depth), dtype=np.float64)
    if d.ndim == 3 and d.shape[-1] == 1:
        d = d[..., 0]
    if d.ndim != 2:
        raise ValueError(f"expected an (H, W) or (H, W, 1) map, got {d.shape}")
    if not np.all(np.isfinite(d)) or d.min() < 0 or d.max() > max_depth:
        raise DomainError(f"depth values must lie in [0, {max_depth}]")
    # round half up
    return np.floor(d / max_depth * 65535.0 + 0.5).astype(np.uint16)


def export_pgm16(depth, path, max_depth):
    """Write a binary 16-bit PGM: value = round(depth / max_depth * 65535)."""
    vals = depth_to_pgm_values(depth, max_depth)
    h, w = vals.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(vals.astype(">u2").tobytes())


def read_pgm(path):
    """Parse a binary P5 PGM (8- or 16-bit) into an (H, W) integer array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5)", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header", pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if not 0 < maxval < 65536:
        raise FormatError(f"invalid maxval {maxval}", pos)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError("truncated PGM raster", len(buf))
    return np.frombuffer(buf[pos:pos + need], dtype=dtype).reshape(h, w).astype(np.int64)
