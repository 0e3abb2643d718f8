"""Weight checkpoints.

Layout: ``b"STRMW"``, uint32 LE version, uint32 LE tensor count, then per
tensor (sorted by name): uint32 name length, UTF-8 name, uint32 ndim,
ndim x uint64 extents, float32 LE values in row-major order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..dataspace.types import FormatError
from ..encoders import make_backend
from ..fileio import atomic_write_bytes, atomic_write_text
from ..numerics import Tensor
from .model import ModelConfig, SpatialModel

MAGIC = b"STRMW"
VERSION = 1


def encode_weights(tensors: Mapping[str, np.ndarray | Tensor]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_weights(payload: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if payload[:5] != MAGIC:
        raise FormatError(f"{source}: not a weight checkpoint")
    version, count = struct.unpack_from("<II", payload, 5)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    off = 13
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", payload, off)
            off += 4
            name = payload[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", payload, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", payload, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(payload, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{source}: truncated checkpoint ({exc})") from exc
    if off != len(payload):
        raise FormatError(f"{source}: {len(payload) - off} trailing bytes")
    return out


def save_weights(path, tensors: Mapping[str, np.ndarray | Tensor]) -> Path:
    return atomic_write_bytes(path, encode_weights(tensors))


def load_weights(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return decode_weights(path.read_bytes(), str(path))


def weights_digest(tensors: Mapping[str, np.ndarray | Tensor]) -> str:
    return hashlib.sha256(encode_weights(tensors)).hexdigest()


def save_model(directory, model: SpatialModel) -> Path:
    d = Path(directory)
    path = save_weights(d / "weights.strmw", model.named_parameters())
    atomic_write_text(d / "model_config.json", json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def model_from_weights(config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> SpatialModel:
    """Rebuild a model; decoder tensors are optional (downstream use drops them)."""
    he = make_backend(config.he_encoder, config.feature_dim, config.he_dim, frozen=config.he_frozen)
    st = make_backend(config.st_encoder, config.n_genes, config.st_dim, frozen=config.st_frozen)
    weights: dict[str, Tensor] = {}
    for name, arr in tensors.items():
        if name.startswith("enc_he."):
            target = he.params
            key = name[len("enc_he."):]
        elif name.startswith("enc_st."):
            target = st.params
            key = name[len("enc_st."):]
        else:
            target, key = weights, name
        if key in target and target[key].shape != arr.shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {target[key].shape}")
        target[key] = Tensor(np.array(arr, dtype=np.float64), True)
    he.set_frozen(config.he_frozen)
    st.set_frozen(config.st_frozen)
    return SpatialModel(config, weights, he, st)


def load_model(directory, drop_decoders: bool = False) -> SpatialModel:
    d = Path(directory)
    cfg_path = d / "model_config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"missing file: {cfg_path}")
    config = ModelConfig(**json.loads(cfg_path.read_text(encoding="utf-8")))
    tensors = load_weights(d / "weights.strmw")
    if drop_decoders:
        tensors = {k: v for k, v in tensors.items() if not k.startswith("dec_")}
    return model_from_weights(config, tensors)
