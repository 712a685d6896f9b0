"""Reader and writer for the UMVT binary tensor format.

Layout: ``b"UMVT"``, version u8 (=1), rank u8, dims as u32 little-endian,
dtype code u8, then the row-major little-endian payload. Code 0 is float32;
code 1 (float64) is accepted as an extension for wide-precision checkpoints.
"""
import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"UMVT"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def dumps(arr, dtype=None):
    arr = np.asarray(arr)
    if dtype is not None:
        arr = arr.astype(dtype)
    if arr.dtype not in _CODE_OF:
        arr = arr.astype(np.float32)
    if arr.ndim > 255:
        raise FormatError("rank above 255")
    code = _CODE_OF[arr.dtype]
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", code)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def loads(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad UMVT magic")
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported UMVT version {version}")
    pos = offset + 6
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    (code,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown UMVT dtype code {code}")
    dt = DTYPE_CODES[code]
    n = int(np.prod(dims, dtype=np.int64))
    end = pos + n * dt.itemsize
    if end > len(buf):
        raise FormatError("truncated UMVT payload")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), end


def save(path, arr, dtype=None):
    with open(path, "wb") as fh:
        fh.write(dumps(arr, dtype))


def load(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = loads(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after tensor")
    return arr


def save_bundle(dirpath, tensors, meta=None):
    """Write named tensors to ``dirpath/tensors.bin`` with a ``manifest.json`` index.

    The manifest maps each name to its byte offset and dims; ``meta`` is
    stored alongside verbatim. Names are written in sorted order.
    """
    import json
    import os

    os.makedirs(dirpath, exist_ok=True)
    index, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        blob = dumps(arr)
        index[name] = {"offset": offset, "dims": [int(d) for d in arr.shape], "dtype": str(arr.dtype)}
        chunks.append(blob)
        offset += len(blob)
    with open(os.path.join(dirpath, "tensors.bin"), "wb") as fh:
        fh.write(b"".join(chunks))
    manifest = {"format": "UMVT-bundle", "version": VERSION, "tensors": index, "meta": meta or {}}
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_bundle(dirpath):
    """Inverse of :func:`save_bundle`; returns ``(tensors, meta)``."""
    import json
    import os

    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "UMVT-bundle":
        raise FormatError(f"{dirpath}: not a tensor bundle")
    with open(os.path.join(dirpath, "tensors.bin"), "rb") as fh:
        buf = fh.read()
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr, _ = loads(buf, entry["offset"])
        if list(arr.shape) != entry["dims"]:
            raise FormatError(f"{name}: manifest dims {entry['dims']} != stored {list(arr.shape)}")
        tensors[name] = arr
    return tensors, manifest["meta"]
