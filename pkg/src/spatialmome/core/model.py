"""Spatial encoder: tokens, 2-D linear attention bias, shared-attention blocks
with per-modality feed-forward experts, masked reconstruction decoders.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from ..dataspace import (GenePanel, Neighborhood, PanelRegistry, SlideDataset, build_neighborhoods,
                         panel_union, union_expression)
from ..encoders import HE, ST, EncoderBackend, encode_he, encode_st, make_backend
from ..numerics import Tensor, ag, no_record
from ..seeding import rng_for
from . import layers

MODALITIES = (HE, ST)


@dataclass
class ModelConfig:
    dim: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    visible: int = 5
    grid_size: int = 5
    slope_exponent: float = 8.0
    feature_dim: int = 768
    he_dim: int = 768
    st_dim: int = 64
    n_genes: int = 0
    decoder_dim: int = 0
    decoder_blocks: int = 2
    he_encoder: str = "toy-mlp"
    st_encoder: str = "toy-linear"
    he_frozen: bool = False
    st_frozen: bool = True
    neighborhood_mode: str = "grid"
    knn_k: int = 9

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError("dim must be divisible by n_heads")
        if self.grid_size < 1 or self.grid_size % 2 == 0:
            raise ValueError("grid_size must be odd")
        if self.neighborhood_mode == "grid" and self.visible > self.grid_size ** 2:
            raise ValueError("visible count exceeds the window size")
        if self.neighborhood_mode not in ("grid", "knn"):
            raise ValueError("neighborhood_mode must be 'grid' or 'knn'")
        if not self.decoder_dim:
            self.decoder_dim = self.dim

    def slopes(self) -> np.ndarray:
        h = np.arange(1, self.n_heads + 1)
        return 2.0 ** (-self.slope_exponent * h / self.n_heads)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SpatialModel:
    config: ModelConfig
    weights: dict[str, Tensor]
    he_encoder: EncoderBackend
    st_encoder: EncoderBackend

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.weights)
        out.update({f"enc_he.{k}": v for k, v in self.he_encoder.params.items()})
        out.update({f"enc_st.{k}": v for k, v in self.st_encoder.params.items()})
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def param_depth(self, name: str) -> int:
        """Layer-decay group: 0 = input side, ``n_blocks + 1`` = decoders."""
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        if name.startswith("dec_"):
            return self.config.n_blocks + 1
        return 0


def init_model(config: ModelConfig, seed: int = 0) -> SpatialModel:
    if config.n_genes < 1:
        raise ValueError("config.n_genes (union panel size) must be set")
    rng = rng_for(seed, "init")
    D, Dd = config.dim, config.decoder_dim
    w: dict[str, Tensor] = {}
    layers.init_linear(w, "proj_he", config.he_dim, D, rng)
    layers.init_linear(w, "proj_st", config.st_dim, D, rng)
    for m in ("he", "st"):
        w[f"mod.{m}"] = Tensor(0.02 * rng.standard_normal(D), True)
        w[f"mask.{m}"] = Tensor(0.02 * rng.standard_normal(D), True)
    for l in range(config.n_blocks):
        layers.init_block(w, f"blocks.{l}", D, config.ffn_mult, rng, experts=("ffn_he", "ffn_st"))
    for m, n_out in (("he", config.he_dim), ("st", config.n_genes)):
        layers.init_linear(w, f"dec_{m}.in", D, Dd, rng)
        for b in range(config.decoder_blocks):
            layers.init_block(w, f"dec_{m}.blocks.{b}", Dd, config.ffn_mult, rng)
        layers.init_ln(w, f"dec_{m}.ln", Dd)
        layers.init_linear(w, f"dec_{m}.head", Dd, n_out, rng)
    he = make_backend(config.he_encoder, config.feature_dim, config.he_dim, rng, frozen=config.he_frozen)
    st = make_backend(config.st_encoder, config.n_genes, config.st_dim, rng, frozen=config.st_frozen)
    return SpatialModel(config, w, he, st)


# ---------------------------------------------------------------- inputs


@dataclass
class ModelInputs:
    """Per-spot arrays for one or more slides, indexed by a global spot index."""

    he: np.ndarray  # (n, C) patch features
    st: np.ndarray  # (n, G) normalised expression over the union panel
    st_mask: np.ndarray  # (n, G) gene-presence mask
    has_he: np.ndarray
    has_st: np.ndarray
    coords: np.ndarray
    neighborhoods: list[Neighborhood]
    spot_ids: list[str]
    slide_of: np.ndarray
    union: GenePanel
    labels: list[str | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.spot_ids)


def prepare_inputs(datasets: Sequence[SlideDataset], config: ModelConfig, union: GenePanel | None = None,
                   use_st: bool = True) -> ModelInputs:
    """Normalise, lay out over the union panel and build neighbourhoods.

    Spots with an empty library simply carry no ST token.
    """
    if not datasets:
        raise ValueError("need at least one slide")
    if union is None:
        union, _ = panel_union(PanelRegistry(tuple({d.panel.panel_id: d.panel for d in datasets}.values())))
    he, st, mask, has_st, coords, nbhds, ids, slide_of, labels = [], [], [], [], [], [], [], [], []
    offset = 0
    for si, ds in enumerate(datasets):
        n = len(ds)
        expr = np.zeros((n, len(union)))
        m = np.zeros((n, len(union)), dtype=bool)
        present = np.zeros(n, dtype=bool)
        if use_st:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                norm, panel_mask, kept = union_expression(ds, union)
            expr[kept] = norm
            m[kept] = panel_mask
            present[kept] = True
        he.append(ds.features().astype(np.float64))
        st.append(expr)
        mask.append(m)
        has_st.append(present)
        coords.append(ds.coords())
        mode = config.neighborhood_mode
        for nb in build_neighborhoods(ds, mode, grid_size=config.grid_size, k=config.knn_k):
            if mode == "knn" and config.grid_size == 1:
                nb = Neighborhood(nb.anchor, nb.members[:1], nb.rel_coords[:1], nb.anchor_id, nb.member_ids[:1])
            nbhds.append(Neighborhood(nb.anchor + offset, nb.members + offset, nb.rel_coords,
                                      nb.anchor_id, nb.member_ids))
        ids.extend(ds.spot_ids)
        slide_of.append(np.full(n, si))
        labels.extend(ds.labels())
        offset += n
    he_arr = np.concatenate(he)
    return ModelInputs(he_arr, np.concatenate(st), np.concatenate(mask), np.ones(len(he_arr), dtype=bool),
                       np.concatenate(has_st), np.concatenate(coords), nbhds, ids, np.concatenate(slide_of),
                       union, labels)


# ---------------------------------------------------------------- masking


@dataclass
class MaskPlan:
    """Visible / masked member positions per modality for one neighbourhood."""

    visible: dict[str, np.ndarray]
    masked: dict[str, np.ndarray]


def sample_mask(nbhd: Neighborhood, inputs: ModelInputs, config: ModelConfig, rng) -> MaskPlan:
    if config.grid_size == 1:
        raise ValueError("masking is undefined with grid size 1 (no spatial context)")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    visible, masked = {}, {}
    for mod, has in ((HE, inputs.has_he), (ST, inputs.has_st)):
        cand = np.flatnonzero(has[nbhd.members])
        if len(cand) <= config.visible:
            if len(cand) < config.visible:
                warnings.warn(f"neighbourhood of {nbhd.anchor_id!r} has only {len(cand)} {mod} spots; "
                              "all visible", stacklevel=2)
            vis = cand
        else:
            vis = np.sort(rng.choice(cand, size=config.visible, replace=False))
        visible[mod] = vis
        masked[mod] = np.setdiff1d(cand, vis)
    return MaskPlan(visible, masked)


# ---------------------------------------------------------------- attention bias


def alibi_bias(coords: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    """(H, T, T) bias ``-m_h * ||c_i - c_j||``."""
    c = np.asarray(coords, dtype=np.float64)
    diff = c[:, None, :] - c[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return -np.asarray(slopes)[:, None, None] * dist[None]


# ---------------------------------------------------------------- forward


@dataclass
class _Layout:
    B: int
    T: int
    spot: np.ndarray  # (B, T) global spot index, -1 for padding
    mod: np.ndarray  # (B, T) 0 = HE, 1 = ST, -1 padding
    member: np.ndarray  # (B, T) position inside the neighbourhood
    masked: np.ndarray  # (B, T) bool
    bias: np.ndarray  # (B, H, T, T)

    def flat(self, sel: np.ndarray) -> np.ndarray:
        return np.flatnonzero(sel.reshape(-1))


def _layout(model: SpatialModel, inputs: ModelInputs, nbhds: Sequence[Neighborhood],
            plans: Sequence[MaskPlan] | None, modalities: Sequence[str]) -> _Layout:
    rows = []
    for b, nb in enumerate(nbhds):
        toks = []
        masked_sets = {m: set(plans[b].masked[m].tolist()) for m in MODALITIES} if plans else None
        for pos, s in enumerate(nb.members):
            for mi, (mod, has) in enumerate(((HE, inputs.has_he), (ST, inputs.has_st))):
                if mod in modalities and has[s]:
                    toks.append((s, mi, pos, bool(masked_sets and pos in masked_sets[mod])))
        if not toks:
            raise ValueError(f"neighbourhood of {nb.anchor_id!r} has no tokens")
        rows.append(toks)
    B, T = len(rows), max(len(r) for r in rows)
    spot = np.full((B, T), -1, dtype=np.int64)
    mod = np.full((B, T), -1, dtype=np.int64)
    member = np.full((B, T), -1, dtype=np.int64)
    masked = np.zeros((B, T), dtype=bool)
    slopes = model.config.slopes()
    bias = np.zeros((B, len(slopes), T, T))
    for b, toks in enumerate(rows):
        n = len(toks)
        arr = np.array([t[:3] for t in toks], dtype=np.int64)
        spot[b, :n], mod[b, :n], member[b, :n] = arr[:, 0], arr[:, 1], arr[:, 2]
        masked[b, :n] = [t[3] for t in toks]
        bias[b, :, :n, :n] = alibi_bias(nbhds[b].rel_coords[arr[:, 2]], slopes)
        bias[b, :, :, n:] = -np.inf
    return _Layout(B, T, spot, mod, member, masked, bias)


@dataclass
class Forward:
    tokens: Tensor  # (B, T, D) final encoder tokens
    layout: _Layout
    he_spots: np.ndarray
    he_embed: Tensor  # (U, d) spot-level H&E embeddings for ``he_spots``
    attn: list[np.ndarray] = field(default_factory=list)


def mome_block(p: dict, prefix: str, x: Tensor, mod: np.ndarray, n_heads: int, bias,
               keep_attn: list | None = None) -> Tensor:
    """Shared attention, then each token through its own modality's expert."""
    h = layers.ln(p, f"{prefix}.ln1", x)
    a = layers.attention(p, f"{prefix}.attn", h, h, n_heads, bias, return_weights=keep_attn is not None)
    if keep_attn is not None:
        a, w = a
        keep_attn.append(w.data)
    x = x + a
    shape = x.shape
    h2 = ag.reshape(layers.ln(p, f"{prefix}.ln2", x), (-1, shape[-1]))
    flat_mod = mod.reshape(-1)
    n = h2.shape[0]
    y = None
    for mi, name in ((0, "ffn_he"), (1, "ffn_st")):
        idx = np.flatnonzero(flat_mod == mi)
        if len(idx) == 0:
            continue
        part = ag.scatter_rows(layers.ffn(p, f"{prefix}.{name}", h2[idx]), idx, n)
        y = part if y is None else y + part
    if y is None:
        return x
    return x + ag.reshape(y, shape)


def forward(model: SpatialModel, inputs: ModelInputs, nbhds: Sequence[Neighborhood],
            plans: Sequence[MaskPlan] | None = None, modalities: Sequence[str] = MODALITIES,
            keep_attn: bool = False) -> Forward:
    cfg, w = model.config, model.weights
    lay = _layout(model, inputs, nbhds, plans, modalities)
    n = lay.B * lay.T
    flat_spot, flat_mod, flat_masked = lay.spot.reshape(-1), lay.mod.reshape(-1), lay.masked.reshape(-1)

    he_spots = np.unique(flat_spot[flat_mod == 0])
    he_embed = encode_he(inputs.he[he_spots], model.he_encoder) if len(he_spots) else None
    st_spots = np.unique(flat_spot[(flat_mod == 1) & ~flat_masked])
    x = None

    def place(rows: Tensor, idx: np.ndarray):
        nonlocal x
        part = ag.scatter_rows(rows, idx, n)
        x = part if x is None else x + part

    if len(he_spots):
        tok = layers.linear(w, "proj_he", he_embed) + w["mod.he"]
        sel = np.flatnonzero((flat_mod == 0) & ~flat_masked)
        if len(sel):
            place(tok[np.searchsorted(he_spots, flat_spot[sel])], sel)
    if len(st_spots):
        st_embed = encode_st(inputs.st[st_spots], model.st_encoder)
        tok = layers.linear(w, "proj_st", st_embed) + w["mod.st"]
        sel = np.flatnonzero((flat_mod == 1) & ~flat_masked)
        place(tok[np.searchsorted(st_spots, flat_spot[sel])], sel)
    sel = np.flatnonzero(flat_masked)
    if len(sel):
        mt = ag.stack([w["mask.he"] + w["mod.he"], w["mask.st"] + w["mod.st"]])
        place(mt[flat_mod[sel]], sel)
    x = ag.reshape(x, (lay.B, lay.T, cfg.dim))
    attn: list[np.ndarray] = []
    for l in range(cfg.n_blocks):
        x = mome_block(w, f"blocks.{l}", x, lay.mod, cfg.n_heads, lay.bias, attn if keep_attn else None)
    return Forward(x, lay, he_spots, he_embed, attn)


@dataclass
class Encoded:
    tokens: list[np.ndarray]  # per neighbourhood (T_b, D)
    token_modality: list[np.ndarray]
    token_spot: list[np.ndarray]
    fused: list[np.ndarray]  # anchor embedding: [HE ; ST] or the single available token


def encode(model: SpatialModel, inputs: ModelInputs, nbhds: Sequence[Neighborhood],
           modalities: Sequence[str] = MODALITIES, batch_size: int = 64) -> Encoded:
    toks, mods, spots, fused = [], [], [], []
    with no_record():
        for start in range(0, len(nbhds), batch_size):
            chunk = nbhds[start:start + batch_size]
            fw = forward(model, inputs, chunk, None, modalities)
            for b, nb in enumerate(chunk):
                valid = fw.layout.spot[b] >= 0
                t = fw.tokens.data[b][valid]
                m = fw.layout.mod[b][valid]
                s = fw.layout.spot[b][valid]
                toks.append(t)
                mods.append(m)
                spots.append(s)
                anchor = [t[(s == nb.anchor) & (m == mi)] for mi in (0, 1)]
                fused.append(np.concatenate([a[0] for a in anchor if len(a)]))
    return Encoded(toks, mods, spots, fused)


def fused_matrix(encoded: Encoded) -> np.ndarray:
    dims = {len(f) for f in encoded.fused}
    if len(dims) != 1:
        raise ValueError(f"fused embeddings have mixed widths {sorted(dims)}; "
                         "restrict modalities or drop spots lacking one")
    return np.stack(encoded.fused)


def embed_slides(model: SpatialModel, inputs: ModelInputs, modalities: Sequence[str] = MODALITIES) -> np.ndarray:
    """Fused anchor embedding for every spot, in spot order."""
    order = sorted(range(len(inputs.neighborhoods)), key=lambda i: inputs.neighborhoods[i].anchor)
    enc = encode(model, inputs, [inputs.neighborhoods[i] for i in order], modalities)
    return fused_matrix(enc)


# ---------------------------------------------------------------- pretraining objective


def _decode(w: dict, prefix: str, cfg: ModelConfig, x: Tensor, bias, rows: np.ndarray) -> Tensor:
    z = layers.linear(w, f"{prefix}.in", x)
    for b in range(cfg.decoder_blocks):
        z = layers.transformer_block(w, f"{prefix}.blocks.{b}", z, cfg.n_heads, bias)
    z = ag.reshape(layers.ln(w, f"{prefix}.ln", z), (-1, cfg.decoder_dim))
    return layers.linear(w, f"{prefix}.head", z[rows])


@dataclass
class LossParts:
    total: Tensor
    he: Tensor | None
    st: Tensor | None
    he_pred: Tensor | None = None
    st_pred: Tensor | None = None
    he_target: np.ndarray | None = None
    st_target: np.ndarray | None = None
    st_mask: np.ndarray | None = None
    he_spots: np.ndarray | None = None
    st_spots: np.ndarray | None = None


def pretrain_loss(model: SpatialModel, inputs: ModelInputs, nbhds: Sequence[Neighborhood],
                  plans: Sequence[MaskPlan], targets_override: dict | None = None) -> LossParts:
    """Masked reconstruction loss: per-modality mean of per-spot MSE over masked spots.

    The ST term of a spot averages only over genes present in its panel.
    """
    cfg, w = model.config, model.weights
    fw = forward(model, inputs, nbhds, plans)
    lay = fw.layout
    flat_spot, flat_mod, flat_masked = lay.spot.reshape(-1), lay.mod.reshape(-1), lay.masked.reshape(-1)
    if not flat_masked.any():
        raise ValueError("no masked positions in batch")
    parts: dict = {}
    total = None
    for mi, mod, prefix in ((0, HE, "dec_he"), (1, ST, "dec_st")):
        rows = np.flatnonzero(flat_masked & (flat_mod == mi))
        if len(rows) == 0:
            parts[mod] = (None, None, None, None, None)
            continue
        spots = flat_spot[rows]
        pred = _decode(w, prefix, cfg, fw.tokens, lay.bias, rows)
        if mod == HE:
            target = fw.he_embed.data[np.searchsorted(fw.he_spots, spots)].copy()
            gmask = np.ones_like(target, dtype=bool)
        else:
            target = inputs.st[spots].copy()
            gmask = inputs.st_mask[spots]
        if targets_override and mod in targets_override:
            target = targets_override[mod]
        resid = (pred - Tensor(target)) * Tensor(gmask.astype(np.float64))
        per_spot = ag.sum(ag.square(resid), axis=1) / Tensor(gmask.sum(axis=1).astype(np.float64))
        term = ag.mean(per_spot)
        parts[mod] = (term, pred, target, gmask, spots)
        total = term if total is None else total + term
    return LossParts(total, parts[HE][0], parts[ST][0], parts[HE][1], parts[ST][1], parts[HE][2],
                     parts[ST][2], parts[ST][3], parts[HE][4], parts[ST][4])
