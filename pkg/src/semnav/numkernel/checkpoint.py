"""Binary parameter container.

Layout (little-endian)::

    magic   8 bytes  b"SNAVCKPT"
    version u32
    meta    u32 length + UTF-8 JSON (sorted keys)
    count   u32
    entries count x (u32 name length, UTF-8 name, u32 ndim, ndim x u32 dims,
                     prod(dims) x f64 row-major values)

Entry order is the order given at save time. Reading then writing a file
reproduces it byte for byte.
"""
import json
import struct

import numpy as np

from ..errors import ContractViolation, DatasetError

MAGIC = b"SNAVCKPT"
VERSION = 1


def dumps(named_arrays, meta=None):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes]
    named_arrays = list(named_arrays)
    parts.append(struct.pack("<I", len(named_arrays)))
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(getattr(arr, "data", arr), dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf):
    """Return (list of (name, array), meta dict)."""
    if buf[:8] != MAGIC:
        raise ContractViolation("not a parameter checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise ContractViolation(f"unsupported checkpoint version {version}")
    off = 12
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + n].decode())
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        out.append((name, arr))
    if off != len(buf):
        raise ContractViolation("trailing bytes in checkpoint")
    return out, meta


def save(path, named_arrays, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(named_arrays, meta))


def load(path):
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except FileNotFoundError:
        raise DatasetError(f"checkpoint not found: {path}") from None
