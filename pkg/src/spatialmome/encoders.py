"""Spot-level encoders: toy trainable backends and a precomputed-vector store.

The real foundation models are external; anything that can export one vector
per spot plugs in through :class:`EmbeddingStore`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataspace.formats import read_features, write_features
from .dataspace.types import FormatError
from .fileio import read_csv, write_csv
from .numerics import Tensor, ag

ST, HE = "ST", "HE"


@dataclass
class SpotEmbedding:
    modality: str
    vector: np.ndarray

    def __post_init__(self):
        if self.modality not in (ST, HE):
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass
class EmbeddingStore:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for sid, v in self.vectors.items():
            if len(v) != self.dim:
                raise FormatError(f"vector for {sid!r} has length {len(v)}, store dimension is {self.dim}")

    def lookup(self, spot_ids: Sequence[str]) -> np.ndarray:
        out = np.empty((len(spot_ids), self.dim))
        for i, sid in enumerate(spot_ids):
            try:
                out[i] = self.vectors[sid]
            except KeyError:
                raise KeyError(f"spot_id {sid!r} not in embedding store") from None
        return out


def write_embedding_store(path, store: EmbeddingStore) -> tuple[Path, Path]:
    """Write vectors in the feature-matrix layout plus ``<path>.index.csv``."""
    path = Path(path)
    ids = list(store.vectors)
    mat = np.stack([store.vectors[i] for i in ids]) if ids else np.zeros((0, store.dim))
    write_features(path, mat)
    index = path.with_suffix(path.suffix + ".index.csv")
    write_csv(index, ["spot_id"], ([i] for i in ids))
    return path, index


def load_embedding_store(path, expected_dim: int | None = None, index_path=None) -> EmbeddingStore:
    path = Path(path)
    index_path = Path(index_path) if index_path else path.with_suffix(path.suffix + ".index.csv")
    mat = read_features(path)
    header, rows = read_csv(index_path)
    if header != ["spot_id"]:
        raise FormatError(f"{index_path}: expected header ['spot_id'], got {header}")
    if len(rows) != mat.shape[0]:
        raise FormatError(f"{index_path}: {len(rows)} ids for {mat.shape[0]} vectors")
    if expected_dim is not None and mat.shape[1] != expected_dim:
        raise FormatError(f"{path}: store dimension {mat.shape[1]} != configured {expected_dim}")
    return EmbeddingStore(mat.shape[1], {r[0]: mat[i].astype(np.float64) for i, r in enumerate(rows)})


@dataclass
class EncoderBackend:
    kind: str  # "toy-linear" | "toy-mlp" | "precomputed"
    in_dim: int
    out_dim: int
    params: dict[str, Tensor] = field(default_factory=dict)
    frozen: bool = False
    store: EmbeddingStore | None = None

    def __post_init__(self):
        if self.kind not in ("toy-linear", "toy-mlp", "precomputed"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "precomputed":
            self.frozen = True
            if self.store is None or self.store.dim != self.out_dim:
                raise FormatError("precomputed backend needs a store matching out_dim")
        self.set_frozen(self.frozen)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen or self.kind == "precomputed"
        for p in self.params.values():
            p.requires_grad = not self.frozen


def make_backend(kind: str, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 frozen: bool = False, init: str = "random", hidden: int | None = None,
                 store: EmbeddingStore | None = None) -> EncoderBackend:
    """Build a backend. ``init`` is ``random``, ``zeros`` or ``identity`` (linear only)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    params: dict[str, Tensor] = {}
    if kind == "toy-linear":
        if init == "identity":
            if in_dim != out_dim:
                raise ValueError("identity init needs in_dim == out_dim")
            w = np.eye(in_dim)
        elif init == "zeros":
            w = np.zeros((in_dim, out_dim))
        else:
            w = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
        params = {"w": Tensor(w, True), "b": Tensor(np.zeros(out_dim), True)}
    elif kind == "toy-mlp":
        h = hidden or out_dim
        scale = 0.0 if init == "zeros" else 1.0
        params = {
            "w1": Tensor(scale * rng.standard_normal((in_dim, h)) / np.sqrt(in_dim), True),
            "b1": Tensor(np.zeros(h), True),
            "w2": Tensor(scale * rng.standard_normal((h, out_dim)) / np.sqrt(h), True),
            "b2": Tensor(np.zeros(out_dim), True),
        }
    return EncoderBackend(kind, in_dim, out_dim, params, frozen, store)


def _apply(backend: EncoderBackend, x) -> Tensor:
    if backend.kind == "precomputed":
        return Tensor(backend.store.lookup(list(x)))
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.shape[-1] != backend.in_dim:
        raise ValueError(f"input dimension {x.shape[-1]} != backend input {backend.in_dim}")
    p = backend.params
    if backend.kind == "toy-linear":
        return x @ p["w"] + p["b"]
    return ag.gelu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def encode_st(expression, backend: EncoderBackend) -> Tensor:
    """Rows of normalised expression (or spot ids for a store) -> (n, h)."""
    return _apply(backend, expression)


def encode_he(features, backend: EncoderBackend) -> Tensor:
    """Rows of patch features (or spot ids for a store) -> (n, d)."""
    return _apply(backend, features)


def embed_one(modality: str, x, backend: EncoderBackend) -> SpotEmbedding:
    fn = encode_st if modality == ST else encode_he
    return SpotEmbedding(modality, fn(x if backend.kind != "precomputed" else [x], backend).data[0].copy())
