"""Checkpoint serialization: a flat, ordered name -> tensor container.

Layout (all integers little-endian):
  magic "HIFW", version byte 1, tensor count u32; then per tensor:
  name length u32, UTF-8 name, rank u32, one u32 per dim, dtype tag u8
  (1 = float32, 2 = float64), raw row-major payload.

Round-trips are bit-exact. Model state = parameters plus batch-norm
running buffers, keyed by dotted module path.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (
    BadMagic,
    CorruptCheckpoint,
    MissingTensor,
    ShapeMismatch,
    UnexpectedTensor,
)

MAGIC = b"HIFW"
VERSION = 1
_TAG_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPE_FOR_TAG = {1: np.dtype(np.float32), 2: np.dtype(np.float64)}


def save_arrays(path, arrays):
    """Write an ordered {name: float array} mapping."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            tag = _TAG_FOR_DTYPE.get(arr.dtype)
            if tag is None:
                raise CorruptCheckpoint(
                    f"tensor '{name}' has unsupported dtype {arr.dtype}"
                )
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(struct.pack("<B", tag))
            data = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fh.write(data.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptCheckpoint(f"truncated file while reading {what}")
    return buf


def load_arrays(path):
    """Read back a {name: array} mapping in file order."""
    arrays = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagic(f"{path}: magic {magic!r} != {MAGIC!r}")
        version = _read_exact(fh, 1, "version")[0]
        if version != VERSION:
            raise BadMagic(f"{path}: version {version}, expected {VERSION}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            try:
                name = _read_exact(fh, name_len, "name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorruptCheckpoint(f"tensor {i}: bad name bytes") from exc
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            if rank > 8:
                raise CorruptCheckpoint(f"'{name}': implausible rank {rank}")
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dim"))[0]
                for _ in range(rank)
            )
            tag = _read_exact(fh, 1, "dtype tag")[0]
            dtype = _DTYPE_FOR_TAG.get(tag)
            if dtype is None:
                raise CorruptCheckpoint(f"'{name}': unknown dtype tag {tag}")
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            payload = _read_exact(fh, n_bytes, f"payload of '{name}'")
            arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<"))
            if name in arrays:
                raise CorruptCheckpoint(f"duplicate tensor name '{name}'")
            arrays[name] = arr.astype(dtype, copy=True).reshape(shape)
        if fh.read(1):
            raise CorruptCheckpoint(f"{path}: trailing bytes after last tensor")
    return arrays


def _buffer_sites(model, prefix=""):
    for name in getattr(model, "_buffers", ()) or ():
        yield prefix + name, model, name
    for cname, child in model.named_children():
        yield from _buffer_sites(child, prefix + cname + ".")


def model_arrays(model):
    """Parameters followed by buffers, in registration order."""
    arrays = {}
    for name, p in model.named_parameters():
        arrays[name] = p.data
    for name, owner, attr in _buffer_sites(model):
        arrays[name] = getattr(owner, attr)
    return arrays


def load_into_model(model, arrays, partial=False):
    """Copy arrays into the model by name.

    Strict mode requires an exact name set and exact shapes. Partial mode
    loads the name/shape intersection and reports everything else.
    """
    report = {"loaded": [], "skipped_shape": [], "missing": [], "unused": []}
    targets = {}
    for name, p in model.named_parameters():
        targets[name] = ("param", p)
    for name, owner, attr in _buffer_sites(model):
        targets[name] = ("buffer", (owner, attr))

    for name, (kind, site) in targets.items():
        if name not in arrays:
            if partial:
                report["missing"].append(name)
                continue
            raise MissingTensor(f"checkpoint lacks tensor '{name}'")
        arr = arrays[name]
        want = site.data.shape if kind == "param" else getattr(*site).shape
        if tuple(arr.shape) != tuple(want):
            if partial:
                report["skipped_shape"].append(name)
                continue
            raise ShapeMismatch(
                f"'{name}': checkpoint shape {arr.shape}, model wants {want}"
            )
        if kind == "param":
            site.data[...] = arr.astype(site.data.dtype, copy=False)
        else:
            owner, attr = site
            setattr(owner, attr, arr.astype(getattr(owner, attr).dtype, copy=True))
        report["loaded"].append(name)

    extra = [n for n in arrays if n not in targets]
    if extra:
        if not partial:
            raise UnexpectedTensor(
                f"checkpoint tensors not in model: {extra[:5]}"
                + ("..." if len(extra) > 5 else "")
            )
        report["unused"] = extra
    return report


def save_model(model, path):
    save_arrays(path, model_arrays(model))


def load_model(model, path, partial=False):
    return load_into_model(model, load_arrays(path), partial=partial)
