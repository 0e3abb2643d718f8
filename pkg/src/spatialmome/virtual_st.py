"""Expression prediction from morphology: MLP head on frozen spatial embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ModelInputs, SpatialModel, embed_slides, weights_digest
from .encoders import HE
from .fileio import csv_text
from .numerics import OptimizerConfig, OptimizerState, Tape, Tensor, adamw_step, ag, forward_backward, lr_at
from .seeding import rng_for


@dataclass
class FinetuneConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 5e-4
    epochs: int = 10
    batch_size: int = 16
    hidden: int = 256
    weight_decay: float = 0.05
    head: str = "mlp"  # "mlp" | "linear"
    genes: list[str] | None = None
    n_hvg: int = 50
    modalities: tuple[str, ...] = (HE,)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ValueError("lambdas must be non-negative and not both zero")
        self.modalities = tuple(self.modalities)


@dataclass
class PredictionMatrix:
    spot_ids: list[str]
    genes: list[str]
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.spot_ids), len(self.genes)):
            raise ValueError("prediction shape does not match spots x genes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("predictions must be finite")

    def to_csv(self) -> str:
        return csv_text(["spot_id", *self.genes], ([s, *row] for s, row in zip(self.spot_ids, self.values)))


@dataclass
class GeneScore:
    gene: str
    pcc: float | None  # None when undefined (zero variance)
    n_spots: int

    @property
    def defined(self) -> bool:
        return self.pcc is not None


def init_head(in_dim: int, n_out: int, cfg: FinetuneConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = rng_for(seed, "finetune", 0)
    if cfg.head == "linear":
        return {"fc.w": Tensor(rng.standard_normal((in_dim, n_out)) / np.sqrt(in_dim), True),
                "fc.b": Tensor(np.zeros(n_out), True)}
    h = cfg.hidden
    return {"fc1.w": Tensor(rng.standard_normal((in_dim, h)) / np.sqrt(in_dim), True),
            "fc1.b": Tensor(np.zeros(h), True),
            "fc2.w": Tensor(rng.standard_normal((h, n_out)) / np.sqrt(h), True),
            "fc2.b": Tensor(np.zeros(n_out), True)}


def head_forward(emb, head: dict[str, Tensor]) -> Tensor:
    """Embeddings (n, in) -> predictions (n, genes); two-layer GELU MLP or linear."""
    x = emb if isinstance(emb, Tensor) else Tensor(np.atleast_2d(emb))
    w = head["fc.w"] if "fc.w" in head else head["fc1.w"]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"embedding width {x.shape[-1]} != head input {w.shape[0]}")
    if "fc.w" in head:
        return x @ head["fc.w"] + head["fc.b"]
    return ag.gelu(x @ head["fc1.w"] + head["fc1.b"]) @ head["fc2.w"] + head["fc2.b"]


def loss_l1l2(Y, Yhat, cfg: FinetuneConfig | None = None, lambda1: float = 1.0, lambda2: float = 1.0) -> Tensor:
    """Mean over spots and genes of ``lambda1*|y - yhat| + lambda2*(y - yhat)^2``."""
    if cfg is not None:
        lambda1, lambda2 = cfg.lambda1, cfg.lambda2
    Y = Y if isinstance(Y, Tensor) else Tensor(Y)
    Yhat = Yhat if isinstance(Yhat, Tensor) else Tensor(Yhat)
    if Y.shape != Yhat.shape:
        raise ValueError(f"shape mismatch {Y.shape} vs {Yhat.shape}")
    r = Y - Yhat
    return ag.mean(ag.abs(r) * lambda1 + ag.square(r) * lambda2)


@dataclass
class FinetuneResult:
    head: dict[str, Tensor]
    loss_trace: list[float]  # full-train loss before training, then after each epoch
    backbone_digest_before: str
    backbone_digest_after: str
    genes: list[str] = field(default_factory=list)


def finetune_head(model: SpatialModel, inputs: ModelInputs, targets: np.ndarray, train_idx: Sequence[int],
                  cfg: FinetuneConfig, seed: int = 0, genes: Sequence[str] | None = None,
                  embeddings: np.ndarray | None = None) -> FinetuneResult:
    """Train only the head on frozen fused embeddings of ``train_idx`` spots."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    before = weights_digest(model.named_parameters())
    emb = embed_slides(model, inputs, cfg.modalities) if embeddings is None else embeddings
    X, Y = emb[train_idx], np.asarray(targets, dtype=np.float64)[train_idx]
    head = init_head(X.shape[1], Y.shape[1], cfg, seed)
    # start the output at the training mean so the schedule is spent on signal
    head["fc.b" if cfg.head == "linear" else "fc2.b"].data[:] = Y.mean(axis=0)
    opt = OptimizerConfig(base_lr=cfg.lr, weight_decay=cfg.weight_decay, warmup_epochs=0, total_epochs=cfg.epochs)
    state = OptimizerState()

    def full_loss() -> float:
        return float(loss_l1l2(Y, head_forward(X, head), cfg).data)

    trace = [full_loss()]
    n = len(X)
    steps = -(-n // cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng_for(seed, "finetune", epoch + 1).permutation(n)
        for b in range(steps):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            with Tape() as tape:
                loss = loss_l1l2(Y[idx], head_forward(X[idx], head), cfg)
            grads = forward_backward(tape, loss, head.values())
            adamw_step(head, {k: grads[p] for k, p in head.items()}, state, opt,
                       lr_at(opt, epoch + b / steps))
        trace.append(full_loss())
    after = weights_digest(model.named_parameters())
    return FinetuneResult(head, trace, before, after, list(genes) if genes is not None else [])


def predict(head: dict[str, Tensor], embeddings: np.ndarray, spot_ids: Sequence[str],
            genes: Sequence[str]) -> PredictionMatrix:
    return PredictionMatrix(list(spot_ids), list(genes), head_forward(embeddings, head).data.copy())


def pcc_genewise(Yhat: np.ndarray, Y: np.ndarray, genes: Sequence[str] | None = None) -> list[GeneScore]:
    """Per-gene Pearson correlation across spots (two-pass, centred)."""
    Yhat = np.asarray(Yhat, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Yhat.ndim == 1:
        Yhat, Y = Yhat[:, None], Y[:, None]
    if Yhat.shape != Y.shape:
        raise ValueError("shape mismatch")
    n = Y.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 spots, got {n}")
    genes = list(genes) if genes is not None else [str(j) for j in range(Y.shape[1])]
    a = Yhat - Yhat.mean(axis=0)
    b = Y - Y.mean(axis=0)
    saa, sbb, sab = (a * a).sum(0), (b * b).sum(0), (a * b).sum(0)
    out = []
    for j, g in enumerate(genes):
        if saa[j] == 0 or sbb[j] == 0:
            out.append(GeneScore(g, None, n))
        else:
            out.append(GeneScore(g, float(np.clip(sab[j] / np.sqrt(saa[j] * sbb[j]), -1.0, 1.0)), n))
    return out


def benchmark_report(scores: Sequence[GeneScore], top_k: Sequence[int]) -> list[dict]:
    """Median PCC over the ``k`` best defined genes, one row per ``k``."""
    if not scores:
        raise ValueError("no scores")
    vals = np.sort([s.pcc for s in scores if s.defined])[::-1]
    rows = []
    for k in top_k:
        if k > len(vals) or k < 1:
            rows.append({"k": k, "median_pcc": None, "n_defined": len(vals), "flag": "insufficient_genes"})
        else:
            rows.append({"k": k, "median_pcc": float(np.median(vals[:k])), "n_defined": len(vals), "flag": ""})
    return rows


def split_slides(slide_ids: Sequence[str], train_fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Slide-level split; at least one slide on each side when possible."""
    ids = sorted(slide_ids)
    order = rng_for(seed, "split").permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1) if len(ids) > 1 else len(ids)
    return [ids[i] for i in sorted(order[:n_train])], [ids[i] for i in sorted(order[n_train:])]


def split_by_x(coords: np.ndarray, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Spatially contiguous split: the lowest-x fraction of spots trains."""
    x = np.asarray(coords)[:, 0]
    order = np.lexsort((np.arange(len(x)), x))
    n_train = int(round(train_fraction * len(x)))
    return np.sort(order[:n_train]), np.sort(order[n_train:])
