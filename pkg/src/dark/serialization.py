"""Binary weight and checkpoint files.

Weights::

    b"DARKWT01" | version u32 | count u32 |
    count x (name_len u16 | utf-8 name | rank u8 | dims u32 x rank | float32 data)

Checkpoints append a train-state section to the weight block::

    b"DARKTS01" | iteration u64 | stage u32 | rng_len u32 | utf-8 json rng state |
    count u32 | tensors as above, named "<param>.m" / "<param>.v"

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "WEIGHT_MAGIC",
    "STATE_MAGIC",
    "FORMAT_VERSION",
    "WeightFormatError",
    "encode_tensors",
    "decode_tensors",
    "save_weights",
    "load_weights",
    "read_weight_file",
    "assign_weights",
    "CheckpointData",
    "save_checkpoint",
    "read_checkpoint",
    "atomic_write_bytes",
]

WEIGHT_MAGIC = b"DARKWT01"
STATE_MAGIC = b"DARKTS01"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    pass


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent if str(path.parent) else ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_block(named: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [struct.pack("<I", len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_block(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I", "tensor count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"tensor {i}: name is not valid UTF-8") from exc
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims)
        if name in out:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        out[name] = data.astype(np.float32)
    return out


def encode_tensors(named: list[tuple[str, np.ndarray]]) -> bytes:
    return WEIGHT_MAGIC + struct.pack("<I", FORMAT_VERSION) + _encode_block(named)


def decode_tensors(buf: bytes, allow_trailing: bool = False) -> tuple[dict[str, np.ndarray], int]:
    r = _Reader(buf)
    if r.take(8, "magic") != WEIGHT_MAGIC:
        raise WeightFormatError("bad magic: not a weight file")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    tensors = _decode_block(r)
    if not allow_trailing and r.pos != len(buf):
        raise WeightFormatError(f"{len(buf) - r.pos} unexpected trailing bytes")
    return tensors, r.pos


def _model_arrays(model) -> list[tuple[str, np.ndarray]]:
    return [(name, p.data) for name, p in model.named_parameters()]


def validate_against(model, tensors: dict[str, np.ndarray]) -> None:
    """Raise naming the first parameter (in model order) that does not match."""
    for name, p in model.named_parameters():
        if name not in tensors:
            raise WeightFormatError(f"tensor {name!r} missing from file")
        if tuple(tensors[name].shape) != tuple(p.shape):
            raise WeightFormatError(
                f"shape mismatch for tensor {name!r}: file {tuple(tensors[name].shape)}, model {tuple(p.shape)}"
            )
    extra = sorted(set(tensors) - {n for n, _ in model.named_parameters()})
    if extra:
        raise WeightFormatError(f"unexpected tensor {extra[0]!r} in file")


def assign_weights(model, tensors: dict[str, np.ndarray]) -> None:
    validate_against(model, tensors)
    for name, p in model.named_parameters():
        p.data = tensors[name].astype(p.data.dtype, copy=True)


def save_weights(model, path) -> None:
    atomic_write_bytes(path, encode_tensors(_model_arrays(model)))


def read_weight_file(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] == WEIGHT_MAGIC:
        tensors, end = decode_tensors(buf, allow_trailing=True)
        # a checkpoint is also a valid weight source
        if end != len(buf) and buf[end : end + 8] != STATE_MAGIC:
            raise WeightFormatError(f"{len(buf) - end} unexpected trailing bytes")
        if end != len(buf):
            read_checkpoint_bytes(buf)
        return tensors
    raise WeightFormatError(f"{path}: bad magic, not a weight file")


def load_weights(path, config=None, seed: int = 0):
    """Build a model for ``config`` and fill it from ``path``.

    The file is parsed and checked in full before any parameter is touched.
    """
    from dark.model import build_model

    tensors = read_weight_file(path)
    model = build_model(config, seed=seed)
    assign_weights(model, tensors)
    return model


# ---------------------------------------------------------------- checkpoints


@dataclass
class CheckpointData:
    weights: dict[str, np.ndarray]
    iteration: int
    stage: int
    rng_state: dict
    moments: dict[str, np.ndarray]


def encode_checkpoint(weights, iteration: int, stage: int, rng_state: dict, moments) -> bytes:
    rng_raw = json.dumps(rng_state, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            encode_tensors(list(weights)),
            STATE_MAGIC,
            struct.pack("<QII", iteration, stage, len(rng_raw)),
            rng_raw,
            _encode_block(list(moments)),
        ]
    )


def save_checkpoint(path, model, iteration: int, stage: int, rng_state: dict, m: dict, v: dict) -> None:
    moments = []
    for name, _ in model.named_parameters():
        moments.append((f"{name}.m", m[name]))
        moments.append((f"{name}.v", v[name]))
    atomic_write_bytes(path, encode_checkpoint(_model_arrays(model), iteration, stage, rng_state, moments))


def read_checkpoint_bytes(buf: bytes) -> CheckpointData:
    weights, end = decode_tensors(buf, allow_trailing=True)
    r = _Reader(buf, end)
    if r.take(8, "train-state magic") != STATE_MAGIC:
        raise WeightFormatError("bad train-state magic: not a checkpoint")
    iteration, stage, rng_len = r.unpack("<QII", "train-state header")
    try:
        rng_state = json.loads(r.take(rng_len, "rng state").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError("corrupt rng state") from exc
    moments = _decode_block(r)
    if r.pos != len(buf):
        raise WeightFormatError(f"{len(buf) - r.pos} unexpected trailing bytes")
    for name, arr in weights.items():
        for suffix in (".m", ".v"):
            key = name + suffix
            if key not in moments:
                raise WeightFormatError(f"checkpoint lacks optimizer moment {key!r}")
            if moments[key].shape != arr.shape:
                raise WeightFormatError(f"moment {key!r} shape {moments[key].shape} != parameter {arr.shape}")
    return CheckpointData(weights, iteration, stage, rng_state, moments)


def read_checkpoint(path) -> CheckpointData:
    return read_checkpoint_bytes(Path(path).read_bytes())
