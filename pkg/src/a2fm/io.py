"""Binary tensor, perturbation and checkpoint files.

Tensor layout (little-endian): ``b"A2FM"``, u16 version, u8 rank, rank x u32
extents, float32 payload in row-major order. A perturbation file is a tensor
file. A checkpoint is ``b"A2FMCKPT"``, u16 version, the model kind as a
u16-length-prefixed UTF-8 string, u8 count plus u32 architecture extents
``(T_in, W, H, C, K)``, the hidden sizes as a length-prefixed JSON string,
a u32 block count, then each parameter block as a length-prefixed name
followed by a tensor record.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import Model, ModelKind, param_shapes

TENSOR_MAGIC = b"A2FM"
CKPT_MAGIC = b"A2FMCKPT"
VERSION = 1


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated: needed {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _check_header(r: _Reader, magic: bytes):
    got = r.data[: len(magic)]
    if got != magic:
        if len(got) < len(magic) and got == magic[: len(got)]:
            raise TruncatedError("file truncated inside the magic bytes")
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
    r.take(len(magic))
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"format version {version} is not supported (expected {VERSION})")


def _string(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _tensor_record(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.ndim > 255:
        raise FormatError("rank too large")
    head = struct.pack("<B", a.ndim) + b"".join(struct.pack("<I", d) for d in a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def _read_tensor_record(r: _Reader) -> np.ndarray:
    (rank,) = r.unpack("<B")
    shape = r.unpack("<" + "I" * rank) if rank else ()
    n = int(np.prod(shape, dtype=np.int64))
    payload = r.take(4 * n)
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


def encode_tensor(a: np.ndarray) -> bytes:
    return TENSOR_MAGIC + struct.pack("<H", VERSION) + _tensor_record(a)


def decode_tensor(data: bytes) -> np.ndarray:
    r = _Reader(data)
    _check_header(r, TENSOR_MAGIC)
    a = _read_tensor_record(r)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after tensor")
    return a


def encode_checkpoint(model: Model) -> bytes:
    dims = model.dims + (model.K,)
    out = [CKPT_MAGIC, struct.pack("<H", VERSION), _string(model.kind.value)]
    out.append(struct.pack("<B", len(dims)) + b"".join(struct.pack("<I", d) for d in dims))
    out.append(_string(json.dumps(model.hidden, sort_keys=True)))
    out.append(struct.pack("<I", len(model.params)))
    for name, block in model.params.items():
        out.append(_string(name) + _tensor_record(block))
    return b"".join(out)


def decode_checkpoint(data: bytes) -> Model:
    r = _Reader(data)
    _check_header(r, CKPT_MAGIC)
    kind_name = r.string()
    try:
        kind = ModelKind(kind_name)
    except ValueError:
        raise FormatError(f"unknown model kind {kind_name!r}") from None
    (n,) = r.unpack("<B")
    dims = r.unpack("<" + "I" * n)
    if n != 5:
        raise FormatError(f"expected 5 architecture extents, got {n}")
    hidden = json.loads(r.string())
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        name = r.string()
        params[name] = _read_tensor_record(r)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    expected = param_shapes(kind, dims[:4], dims[4], hidden)
    if list(expected) != list(params) or any(expected[k] != params[k].shape for k in expected):
        raise FormatError("parameter blocks do not match the declared architecture")
    return Model(kind, dims[0], tuple(dims[1:4]), dims[4], hidden, params)


def save_artifact(path, value, kind: str | None = None) -> Path:
    """Write a model checkpoint or a tensor/perturbation file."""
    path = Path(path)
    if kind is None:
        kind = "checkpoint" if isinstance(value, Model) else "tensor"
    if kind == "checkpoint":
        if not isinstance(value, Model):
            raise FormatError("checkpoint artifacts hold models")
        data = encode_checkpoint(value)
    elif kind in ("tensor", "perturbation"):
        data = encode_tensor(np.asarray(value, dtype=np.float64))
    else:
        raise FormatError(f"unknown artifact kind {kind!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def load_artifact(path, kind: str = "tensor"):
    if kind not in ("checkpoint", "tensor", "perturbation"):
        raise FormatError(f"unknown artifact kind {kind!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}")
    data = path.read_bytes()
    return decode_checkpoint(data) if kind == "checkpoint" else decode_tensor(data)
