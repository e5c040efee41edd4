"""Binary container for named float64 tensors.

Layout: the magic bytes, then one record per tensor until end of file.
Record: name length (u64 LE), UTF-8 name, rank (u64 LE), one extent per axis
(u64 LE), then the values as IEEE-754 float64 LE in C order. Round-trips are
bit-exact.
"""

import struct

import numpy as np

MAGIC = b"SBADV1"


def save_tensors(path, tensors):
    """Write named arrays in order; accepts a mapping or (name, array) pairs."""
    items = tensors.items() if hasattr(tensors, "items") else tensors
    seen = set()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, values in items:
            if not name:
                raise ValueError("save_tensors: empty tensor name")
            if name in seen:
                raise ValueError(f"save_tensors: duplicate tensor name {name!r}")
            seen.add(name)
            arr = np.asarray(values, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_tensors(path):
    """Read a container back into an ordered dict of name -> array."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        while True:
            header = fh.read(8)
            if not header:
                break
            if len(header) != 8:
                raise ValueError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<Q", header)
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, path))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, path))[0]
                for _ in range(rank))
            count = 1
            for extent in shape:
                count *= extent
            raw = _read_exact(fh, count * 8, path)
            values = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            if name in out:
                raise ValueError(f"{path}: duplicate tensor name {name!r}")
            out[name] = values
    return out


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"{path}: truncated container")
    return data
