"""Binary tensor container: magic, version, JSON header, raw little-endian arrays.

Shared by the backbone weight-import format (magic FPTW) and learnable-state
checkpoints (magic FPTS). Arrays are stored in the header's declared order so
files are byte-identical across writes of the same state.
"""

import json
import struct

import numpy as np

CONTAINER_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "uint32": "<u4"}


class ContainerError(IOError):
    """Malformed or mismatched tensor container."""


def write_container(path, magic, extra, arrays):
    """Write named arrays plus an extra metadata dict.

    arrays: ordered list of (name, ndarray). The header records name, shape,
    and dtype per tensor; payload follows in the same order.
    """
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    directory = []
    payload = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype_name} for tensor {name}")
        directory.append({"name": name, "shape": list(arr.shape), "dtype": dtype_name})
        payload.append(np.ascontiguousarray(arr).astype(_DTYPES[dtype_name]).tobytes())
    header = dict(extra)
    header["tensors"] = directory
    header["endianness"] = "little"
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic.encode("ascii"))
        fh.write(struct.pack("<I", CONTAINER_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def read_container(path, magic):
    """Read back (extra_metadata, {name: array}) written by write_container."""
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic.encode("ascii"):
            raise ContainerError(f"bad magic {got!r}, expected {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CONTAINER_VERSION:
            raise ContainerError(f"unsupported container version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header.pop("tensors"):
            shape = tuple(entry["shape"])
            dtype = _DTYPES[entry["dtype"]]
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * np.dtype(dtype).itemsize)
            if len(raw) != count * np.dtype(dtype).itemsize:
                raise ContainerError(f"truncated payload for tensor {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(
                entry["dtype"]
            )
        header.pop("endianness", None)
        return header, arrays
