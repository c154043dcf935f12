"""Binary matrix and checkpoint formats.

Matrix record (little-endian)::

    b"RTTS" | version u16 | dtype u8 (1=f32, 2=f64) | rank u8 | extents u32 x rank | row-major data

Checkpoint::

    b"RTTK" | version u16 | header length u32 | UTF-8 JSON header | matrix records

The header holds both configs, the metadata (step, stage, rng counters) and
the ordered list of tensor names with their record sizes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from retts.numerics import Tensor

MATRIX_MAGIC = b"RTTS"
MATRIX_VERSION = 1
CHECKPOINT_MAGIC = b"RTTK"
CHECKPOINT_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}

# fields that change parameter shapes; a mismatch makes a checkpoint unusable
ARCHITECTURE_FIELDS = (
    "m", "enc_layers", "dec_layers", "gfe_layers", "d_model", "ffn_hidden", "gfe_channels",
    "gfe_ffn_hidden", "n_heads", "n_mels", "phoneme_vocab", "feature_dim",
    "predictor_channels", "aligner_dim",
)


class FormatError(ValueError):
    """Corrupt or unsupported file contents."""


class CompatibilityError(ValueError):
    """Checkpoint was written for a different architecture."""


def encode_matrix(array) -> bytes:
    if isinstance(array, Tensor):
        array = array.data
    array = np.asarray(array)
    if array.dtype not in _CODES:
        array = array.astype(np.float64)
    if array.ndim > 255:
        raise ValueError("rank above 255 is not representable")
    if any(extent == 0 for extent in array.shape):
        raise ValueError(f"zero-extent dimension in shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError("matrix contains non-finite values")
    head = MATRIX_MAGIC + struct.pack("<HBB", MATRIX_VERSION, _CODES[array.dtype], array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype=_DTYPES[_CODES[array.dtype]]).tobytes()


def decode_matrix(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record at ``offset``; returns the array and the offset after it."""
    if len(buf) < offset + 8:
        raise FormatError(f"truncated matrix header at offset {offset}")
    if buf[offset:offset + 4] != MATRIX_MAGIC:
        raise FormatError(f"bad matrix magic at offset {offset}")
    version, code, rank = struct.unpack_from("<HBB", buf, offset + 4)
    if version != MATRIX_VERSION:
        raise FormatError(f"unsupported matrix version {version} at offset {offset + 4}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code} at offset {offset + 6}")
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise FormatError(f"truncated extents at offset {pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    if any(extent == 0 for extent in shape):
        raise FormatError(f"zero extent in shape {shape} at offset {pos}")
    pos += 4 * rank
    nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated data at offset {pos}: need {nbytes} bytes, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=_DTYPES[code], count=nbytes // _DTYPES[code].itemsize, offset=pos)
    return data.reshape(shape).astype(_DTYPES[code].newbyteorder("=")), pos + nbytes


def save_matrix(path, array) -> None:
    blob = encode_matrix(array)
    Path(path).write_bytes(blob)


def load_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_matrix(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes at offset {end}")
    return array


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def model_state(self) -> dict[str, np.ndarray]:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.tensors)
    blobs = [encode_matrix(ckpt.tensors[n]) for n in names]
    header = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "meta": ckpt.meta,
        "tensors": [[n, len(b)] for n, b in zip(names, blobs)],
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(raw)) + raw
            + b"".join(blobs))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 10 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic at offset 0")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    if len(buf) < 10 + hlen:
        raise FormatError(f"truncated checkpoint header at offset 10")
    try:
        header = json.loads(buf[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header at offset 10: {exc}") from exc
    pos = 10 + hlen
    tensors = {}
    for name, size in header["tensors"]:
        array, end = decode_matrix(buf, pos)
        if end - pos != size:
            raise FormatError(f"tensor {name!r} size mismatch at offset {pos}")
        tensors[name] = array
        pos = end
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes at offset {pos}")
    return Checkpoint(header["model_config"], header["train_config"], header["meta"], tensors, version)


def check_compatible(saved: dict, expected: dict) -> None:
    diffs = [f"{k}: checkpoint={saved.get(k)} expected={expected.get(k)}"
             for k in ARCHITECTURE_FIELDS if saved.get(k) != expected.get(k)]
    if diffs:
        raise CompatibilityError("incompatible model config: " + "; ".join(diffs))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path, expected_model_config: dict | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected_model_config is not None:
        check_compatible(ckpt.model_config, expected_model_config)
    return ckpt
