"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MGPCKPT\\n"                     magic, 8 bytes
    u64 header_len, header JSON       format version, dims, model kind, shapes, metadata
    repeated per array, in header order:
        u32 name_len, name (utf-8), u64 count, count * f64
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, DimensionError
from .kernel import MgpParams
from .model import MGP, RAW, Model
from .rnn import RnnParams

MAGIC = b"MGPCKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    meta: dict = field(default_factory=dict)

    @property
    def dims(self):
        return self.model.dims


def _arrays(model: Model) -> dict:
    out = {}
    if model.mgp is not None:
        out.update({f"mgp.{k}": v for k, v in model.mgp.numpy().items()})
    out.update({f"rnn.{k}": v for k, v in model.rnn.numpy().items()})
    out["center"] = np.asarray(model.center, float)
    out["scale"] = np.asarray(model.scale, float)
    if model.fill_values is not None:
        out["fill_values"] = np.asarray(model.fill_values, float)
    return out


def dumps_checkpoint(cp: Checkpoint) -> bytes:
    arrays = _arrays(cp.model)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": cp.model.kind,
        "dims": {"M": cp.model.M, "B": cp.model.B, "P": cp.model.P},
        "arrays": list(arrays),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "meta": cp.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(hbytes)), hbytes]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<Q", flat.size), flat.tobytes()]
    return b"".join(parts)


def save_checkpoint(cp: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps_checkpoint(cp))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("corrupt checkpoint: unexpected end of file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def loads_checkpoint(buf: bytes, expected_dims: Optional[tuple] = None) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", r.take(8))
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    arrays = {}
    for expected in header["arrays"]:
        (nlen,) = struct.unpack("<I", r.take(4))
        name = r.take(nlen).decode("utf-8")
        if name != expected:
            raise CheckpointError(f"corrupt checkpoint: array {name!r} where {expected!r} expected")
        (count,) = struct.unpack("<Q", r.take(8))
        shape = header["shapes"][name]
        if int(np.prod(shape)) != count:
            raise CheckpointError(f"corrupt checkpoint: array {name!r} has {count} elements, shape {shape}")
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError("corrupt checkpoint: trailing bytes")

    d = header["dims"]
    dims = (d["M"], d["B"], d["P"])
    if expected_dims is not None and tuple(expected_dims) != dims:
        names = ("M", "B", "P")
        diffs = [f"{n}: expected {e}, found {f}" for n, e, f in zip(names, expected_dims, dims) if e != f]
        raise DimensionError("checkpoint dimension mismatch (" + "; ".join(diffs) + ")")

    kind = header["kind"]
    if kind not in (MGP, RAW):
        raise CheckpointError(f"unknown model kind {kind!r}")
    try:
        rnn = RnnParams.from_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("rnn.")})
        mgp = None
        if kind == MGP:
            mgp = MgpParams.from_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("mgp.")})
        center, scale = arrays["center"], arrays["scale"]
    except KeyError as exc:
        raise CheckpointError(f"corrupt checkpoint: missing array {exc}") from None
    if kind == MGP:
        if mgp.M != dims[0] or mgp.P != dims[2]:
            raise DimensionError(f"MGP parameters have (M, P) = ({mgp.M}, {mgp.P}) but header says {dims}")
    M, B, P = dims
    if rnn.input_width != 2 * M + B + P:
        raise DimensionError(f"network input width {rnn.input_width} inconsistent with dims {dims}")
    model = Model(
        kind=kind,
        rnn=rnn,
        M=M,
        B=B,
        P=P,
        center=center,
        scale=scale,
        mgp=mgp,
        fill_values=arrays.get("fill_values"),
    )
    return Checkpoint(model, header.get("meta", {}))


def load_checkpoint(path, expected_dims: Optional[tuple] = None) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes(), expected_dims)
