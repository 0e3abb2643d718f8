"""Slide-level risk model: latent compression, cross-modal fusion, attention-MIL pooling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..encoders import HE, ST
from ..core.layers import attention, ffn, init_attention, init_ffn, init_linear, init_ln, linear, ln
from ..numerics import OptimizerConfig, OptimizerState, Tape, Tensor, adamw_step, ag, forward_backward, lr_at
from ..seeding import rng_for
from .survival import cox_nll_loss

@dataclass
class SlideBag:
    slide_id: str
    he: np.ndarray | None  # (patches, he_dim)
    st: np.ndarray | None  # (patches, st_dim), measured or virtual
    coords: np.ndarray | None = None

    def __post_init__(self):
        if self.he is None and self.st is None:
            raise ValueError(f"{self.slide_id}: bag has no tokens")
        for name in ("he", "st"):
            a = getattr(self, name)
            if a is not None:
                a = np.atleast_2d(np.asarray(a, dtype=np.float64))
                if len(a) == 0:
                    raise ValueError(f"{self.slide_id}: empty {name} token list")
                if not np.all(np.isfinite(a)):
                    raise ValueError(f"{self.slide_id}: non-finite {name} features")
                setattr(self, name, a)

    def tokens(self, modality: str) -> np.ndarray | None:
        return getattr(self, modality.lower())


@dataclass
class RiskConfig:
    dim: int = 32
    n_queries: int = 64
    n_heads: int = 1
    ffn_mult: int = 2
    attn_dim: int = 16
    hidden: int = 32
    modalities: tuple[str, ...] = (HE, ST)
    lr: float = 1e-3
    epochs: int = 30
    weight_decay: float = 1e-4
    batch_size: int = 0  # 0: full batch

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if not self.modalities or any(m not in (HE, ST) for m in self.modalities):
            raise ValueError(f"modalities must be a nonempty subset of ('HE', 'ST'), got {self.modalities}")
        if self.n_queries < 1:
            raise ValueError("n_queries must be at least 1")
        if self.dim % self.n_heads:
            raise ValueError("dim must be divisible by n_heads")


@dataclass
class RiskModel:
    config: RiskConfig
    params: dict[str, Tensor]
    in_dims: dict[str, int] = field(default_factory=dict)

    @property
    def fused(self) -> bool:
        return len(self.config.modalities) == 2


def init_risk_model(cfg: RiskConfig, in_dims: dict[str, int], seed: int = 0) -> RiskModel:
    rng = rng_for(seed, "init", 1)
    D = cfg.dim
    p: dict[str, Tensor] = {}
    for m in cfg.modalities:
        init_linear(p, f"{m}.in", in_dims[m], D, rng)
        p[f"{m}.queries"] = Tensor(rng.standard_normal((cfg.n_queries, D)), True)
        init_ln(p, f"{m}.ln_q", D)
        init_attention(p, f"{m}.xattn", D, rng)
        init_ln(p, f"{m}.ln_ffn", D)
        init_ffn(p, f"{m}.ffn", D, cfg.ffn_mult, rng)
        init_linear(p, f"{m}.pool.V", D, cfg.attn_dim, rng)
        p[f"{m}.pool.w"] = Tensor(rng.standard_normal(cfg.attn_dim) / np.sqrt(cfg.attn_dim), True)
    if len(cfg.modalities) == 2:
        for d in ("ab", "ba"):
            init_ln(p, f"fuse.{d}.ln_q", D)
            init_ln(p, f"fuse.{d}.ln_kv", D)
            init_attention(p, f"fuse.{d}.attn", D, rng)
    init_linear(p, "head.fc1", D * len(cfg.modalities), cfg.hidden, rng)
    init_linear(p, "head.fc2", cfg.hidden, 1, rng)
    return RiskModel(cfg, p, {m: int(in_dims[m]) for m in cfg.modalities})


def perceiver_compress(tokens, p: dict, prefix: str, n_heads: int = 1) -> Tensor:
    """Learned queries cross-attend to an arbitrary number of patch tokens; returns (Nq, D)."""
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("perceiver_compress needs a nonempty (patches, dim) token matrix")
    # no norm on the patch side: it is singular at the zero input that attribution starts from
    kv = linear(p, f"{prefix}.in", x)
    q = p[f"{prefix}.queries"]
    lat = q + attention(p, f"{prefix}.xattn", ln(p, f"{prefix}.ln_q", q), kv, n_heads)
    return lat + ffn(p, f"{prefix}.ffn", ln(p, f"{prefix}.ln_ffn", lat))


def cross_fuse(a: Tensor, b: Tensor, p: dict, n_heads: int = 1, return_weights: bool = False):
    """One bidirectional cross-attention block with residuals: A reads B, B reads A."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("cross_fuse needs both latent sets")
    da, wa = attention(p, "fuse.ab.attn", ln(p, "fuse.ab.ln_q", a), ln(p, "fuse.ab.ln_kv", b), n_heads,
                       return_weights=True)
    db, wb = attention(p, "fuse.ba.attn", ln(p, "fuse.ba.ln_q", b), ln(p, "fuse.ba.ln_kv", a), n_heads,
                       return_weights=True)
    out = (a + da, b + db)
    return (*out, wa.data, wb.data) if return_weights else out


def abmil_pool(h: Tensor, p: dict, prefix: str) -> tuple[Tensor, np.ndarray]:
    """a_k proportional to exp(w . tanh(V h_k)); returns (sum_k a_k h_k, a)."""
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("abmil_pool needs a nonempty token matrix")
    logits = ag.tanh(linear(p, f"{prefix}.V", h)) @ p[f"{prefix}.w"]
    a = ag.softmax(logits, axis=0)
    pooled = ag.reshape(ag.reshape(a, (1, h.shape[0])) @ h, (h.shape[1],))
    return pooled, a.data


def risk_forward(model: RiskModel, bag: SlideBag, inputs: dict[str, Tensor] | None = None) -> Tensor:
    """Scalar risk for one bag. ``inputs`` may supply the token tensors (for input gradients)."""
    cfg, p = model.config, model.params
    lat = {}
    for m in cfg.modalities:
        x = inputs[m] if inputs is not None and m in inputs else bag.tokens(m)
        if x is None:
            raise ValueError(f"{bag.slide_id}: model expects {m} tokens")
        lat[m] = perceiver_compress(x, p, m, cfg.n_heads)
    if model.fused:
        lat[HE], lat[ST] = cross_fuse(lat[HE], lat[ST], p, cfg.n_heads)
    pooled = [abmil_pool(lat[m], p, f"{m}.pool")[0] for m in cfg.modalities]
    z = pooled[0] if len(pooled) == 1 else ag.concat(pooled, axis=0)
    h = ag.gelu(linear(p, "head.fc1", ag.reshape(z, (1, z.shape[0]))))
    return ag.reshape(linear(p, "head.fc2", h), ())


def predict_risk(model: RiskModel, bags: list[SlideBag]) -> np.ndarray:
    return np.array([float(risk_forward(model, b).data) for b in bags])


@dataclass
class RiskTrainResult:
    model: RiskModel
    trace: list[tuple[int, float]]  # (epoch, mean Cox loss over the epoch)


def train_risk_model(bags: list[SlideBag], times, events, cfg: RiskConfig, seed: int = 0,
                     in_dims: dict[str, int] | None = None) -> RiskTrainResult:
    """AdamW on the Breslow partial likelihood (mean over events per batch)."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    if len(bags) != len(times):
        raise ValueError("bags and survival records differ in length")
    if in_dims is None:
        in_dims = {m: bags[0].tokens(m).shape[1] for m in cfg.modalities}
    model = init_risk_model(cfg, in_dims, seed)
    opt = OptimizerConfig(base_lr=cfg.lr, weight_decay=cfg.weight_decay, warmup_epochs=0,
                          total_epochs=cfg.epochs, layer_decay_lambda=1.0)
    state = OptimizerState()
    n = len(bags)
    bs = n if cfg.batch_size <= 0 else cfg.batch_size
    trace = []
    for epoch in range(cfg.epochs):
        order = rng_for(seed, "survival", epoch).permutation(n)
        losses = []
        n_batches = -(-n // bs)
        for b in range(n_batches):
            idx = order[b * bs:(b + 1) * bs]
            if events[idx].sum() == 0:
                continue
            with Tape() as tape:
                scores = ag.stack([risk_forward(model, bags[i]) for i in idx])
                loss = cox_nll_loss(scores, times[idx], events[idx], reduction="mean")
            grads = forward_backward(tape, loss, model.params.values())
            adamw_step(model.params, {k: grads[t] for k, t in model.params.items()}, state, opt,
                       lr_at(opt, epoch + b / n_batches))
            losses.append(float(loss.data))
        trace.append((epoch, float(np.mean(losses)) if losses else float("nan")))
    return RiskTrainResult(model, trace)
