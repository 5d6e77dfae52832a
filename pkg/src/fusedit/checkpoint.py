"""FDTK checkpoint files.

Layout, all little-endian::

    b"FDTK"  version:u32
    repeat { name_len:u32  name:bytes  rank:u32  extents:u32*rank  payload }

Version 1 stores payloads as f32. Version 2 (the default written here) is the
same record layout with f64 payloads, so a float64 run resumes bit-exactly.
Names are namespaced: ``llm.*`` frozen, ``dit.*`` trainable, ``opt.m.*`` /
``opt.v.*`` optimizer moments, ``ema.*`` shadows and ``state.*`` counters.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"FDTK"
PAYLOAD = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DEFAULT_VERSION = 2


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, expected, found):
        super().__init__(f"tensor {name!r}: checkpoint has shape {tuple(found)}, model expects {tuple(expected)}")
        self.name = name


class MissingTensorError(CheckpointError):
    pass


def encode(tensors: dict[str, np.ndarray], version: int = DEFAULT_VERSION) -> bytes:
    if version not in PAYLOAD:
        raise UnsupportedVersionError(f"cannot write version {version}")
    dt = PAYLOAD[version]
    out = [MAGIC, struct.pack("<I", version)]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(np.ascontiguousarray(a, dtype=dt).tobytes())
    return b"".join(out)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise TruncatedCheckpointError("file shorter than the header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version not in PAYLOAD:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    dt = PAYLOAD[version]
    pos, out = 8, {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"payload truncated at byte {pos} (need {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(count * dt.itemsize), dtype=dt).astype(np.float64).reshape(shape)
        out[name] = data
    return out


def save(path, tensors: dict[str, np.ndarray], version: int = DEFAULT_VERSION) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, version))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model / optimizer state <-> flat tensor dict
# ---------------------------------------------------------------------------


def pack(model, state=None) -> dict[str, np.ndarray]:
    """Flatten a model (and optionally its TrainState) into checkpoint records."""
    out = {name: p.data for name, p in model.parameters().items()}
    if state is not None:
        out["state.step"] = np.asarray(float(state.step))
        out["state.seed"] = np.asarray(float(state.seed))
        for name in model.dit:
            out[f"opt.m.dit.{name}"] = state.m[name]
            out[f"opt.v.dit.{name}"] = state.v[name]
            out[f"ema.dit.{name}"] = state.ema[name]
    return out


def _take(tensors: dict, name: str, expected: tuple) -> np.ndarray:
    if name not in tensors:
        raise MissingTensorError(f"checkpoint lacks tensor {name!r}")
    arr = tensors[name]
    if arr.shape != tuple(expected):
        raise ShapeMismatchError(name, expected, arr.shape)
    return arr.copy()


def unpack(tensors: dict[str, np.ndarray], model, state=None) -> None:
    """Load records into ``model`` (and ``state``) in place, checking every shape.

    ``llm.*`` tensors come back frozen and ``dit.*`` trainable, whatever
    flags the receiving tensors had.
    """
    for name, p in model.llm.items():
        model.llm[name] = Tensor(_take(tensors, f"llm.{name}", p.shape), requires_grad=False, name=f"llm.{name}")
    for name, p in model.dit.items():
        model.dit[name] = Tensor(_take(tensors, f"dit.{name}", p.shape), requires_grad=True, name=f"dit.{name}")
    if state is None:
        return
    for key in ("state.step", "state.seed"):
        if key not in tensors:
            raise MissingTensorError(f"checkpoint lacks {key!r} (saved without training state?)")
    state.step = int(tensors["state.step"])
    state.seed = int(tensors["state.seed"])
    for name, p in model.dit.items():
        state.m[name] = _take(tensors, f"opt.m.dit.{name}", p.shape)
        state.v[name] = _take(tensors, f"opt.v.dit.{name}", p.shape)
        state.ema[name] = _take(tensors, f"ema.dit.{name}", p.shape)


def save_training(path, model, state=None, version: int = DEFAULT_VERSION) -> None:
    save(path, pack(model, state), version)


def load_training(path, model, state=None) -> None:
    unpack(load(path), model, state)
