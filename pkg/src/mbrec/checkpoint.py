"""Versioned on-disk checkpoint format.

A checkpoint is a pair of files sharing a base path:

  <base>.manifest   plain-text key=value metadata, one pair per line, plus
                    one `tensor.<name>=<dtype>:<dim,dim,...>` line per stored
                    tensor in storage order
  <base>.bin        binary blob: magic "MBRC", a u32 format version, a u32
                    record count, then per record a length-prefixed utf-8
                    name, a dtype code (u8), ndim (u8), u32 dims, and the
                    raw little-endian element bytes

Tensors are written in the order of the mapping passed to save, and load
returns them in stored order, so save -> load -> save reproduces both files
byte for byte. Loading verifies the blob against the manifest: every shape
and dtype must match, and extra or missing tensors are errors.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MBRC"
VERSION = 1

_DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_CODE_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}
_DTYPE_NAMES = {torch.float32: "float32", torch.float64: "float64",
                torch.int64: "int64"}
_NAME_DTYPES = {v: k for k, v in _DTYPE_NAMES.items()}
_NUMPY_LE = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


class CheckpointError(Exception):
    pass


def manifest_path(base) -> Path:
    return Path(str(base) + ".manifest")


def blob_path(base) -> Path:
    return Path(str(base) + ".bin")


def _shape_str(shape: tuple[int, ...]) -> str:
    return ",".join(str(s) for s in shape)


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "":
        return ()
    return tuple(int(s) for s in text.split(","))


def save_checkpoint(base, meta: dict[str, str],
                    tensors: dict[str, torch.Tensor]) -> tuple[Path, Path]:
    """Write manifest and blob for the given metadata and tensor mapping."""
    lines = []
    for key, value in meta.items():
        if key.startswith("tensor."):
            raise CheckpointError(f"meta key {key!r} uses the reserved "
                                  "tensor. prefix")
        text = str(value)
        if "\n" in key or "\n" in text or "=" in key:
            raise CheckpointError(f"meta entry {key!r} not representable")
        lines.append(f"{key}={text}")

    records = []
    for name, tensor in tensors.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        lines.append(f"tensor.{name}={_DTYPE_NAMES[t.dtype]}:"
                     f"{_shape_str(tuple(t.shape))}")
        name_bytes = name.encode("utf-8")
        payload = np.ascontiguousarray(t.numpy()).astype(
            _NUMPY_LE[t.dtype], copy=False).tobytes()
        rec = struct.pack("<H", len(name_bytes)) + name_bytes
        rec += struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim())
        rec += struct.pack(f"<{t.dim()}I", *t.shape)
        rec += payload
        records.append(rec)

    mpath, bpath = manifest_path(base), blob_path(base)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    mpath.write_text("".join(line + "\n" for line in lines))
    with open(bpath, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for rec in records:
            fh.write(rec)
    return mpath, bpath


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated blob while reading {what}")
    return data


def load_checkpoint(base) -> tuple[dict[str, str], dict[str, torch.Tensor]]:
    """Read a checkpoint pair; returns (meta, tensors) in stored order."""
    mpath, bpath = manifest_path(base), blob_path(base)
    if not mpath.exists() or not bpath.exists():
        raise CheckpointError(f"checkpoint {base} incomplete: need both "
                              f"{mpath.name} and {bpath.name}")

    meta: dict[str, str] = {}
    declared: dict[str, tuple[torch.dtype, tuple[int, ...]]] = {}
    for lineno, raw in enumerate(mpath.read_text().splitlines(), start=1):
        if raw == "":
            continue
        if "=" not in raw:
            raise CheckpointError(f"{mpath}:{lineno}: not a key=value line")
        key, value = raw.split("=", 1)
        if key.startswith("tensor."):
            name = key[len("tensor."):]
            dtype_name, _, shape_text = value.partition(":")
            if dtype_name not in _NAME_DTYPES:
                raise CheckpointError(f"{mpath}:{lineno}: unknown dtype "
                                      f"{dtype_name!r}")
            declared[name] = (_NAME_DTYPES[dtype_name],
                              _parse_shape(shape_text))
        else:
            meta[key] = value

    tensors: dict[str, torch.Tensor] = {}
    with open(bpath, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{bpath}: bad magic")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"{bpath}: unsupported version {version}")
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name size"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "record"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{bpath}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I",
                                  _read_exact(fh, 4 * ndim, "shape"))
            dtype = _CODE_DTYPES[code]
            if name not in declared:
                raise CheckpointError(f"tensor {name!r} in blob but not in "
                                      "manifest")
            want_dtype, want_shape = declared[name]
            if dtype != want_dtype or tuple(shape) != want_shape:
                raise CheckpointError(
                    f"tensor {name!r}: blob has {dtype} {tuple(shape)}, "
                    f"manifest declares {want_dtype} {want_shape}")
            numel = 1
            for s in shape:
                numel *= s
            raw = _read_exact(fh, numel * np.dtype(_NUMPY_LE[dtype]).itemsize,
                              f"data of {name!r}")
            arr = np.frombuffer(raw, dtype=_NUMPY_LE[dtype]).reshape(shape)
            tensors[name] = torch.from_numpy(arr.astype(
                arr.dtype.newbyteorder("="), copy=True))
        if fh.read(1) != b"":
            raise CheckpointError(f"{bpath}: trailing bytes after records")

    missing = [n for n in declared if n not in tensors]
    if missing:
        raise CheckpointError(f"manifest declares tensors missing from blob: "
                              f"{missing}")
    return meta, tensors
