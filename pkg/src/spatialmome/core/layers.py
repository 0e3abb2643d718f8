"""Parameter-dict building blocks shared by the spatial encoder and the outcome model.

Every layer reads its weights from a flat ``dict[str, Tensor]`` under a name
prefix, which keeps checkpointing and per-group learning rates trivial.
"""
from __future__ import annotations

import numpy as np

from ..numerics import Tensor, ag


def init_linear(params: dict, prefix: str, n_in: int, n_out: int, rng, scale: float = 1.0) -> None:
    params[f"{prefix}.w"] = Tensor(scale * rng.standard_normal((n_in, n_out)) / np.sqrt(n_in), True)
    params[f"{prefix}.b"] = Tensor(np.zeros(n_out), True)


def init_ln(params: dict, prefix: str, dim: int) -> None:
    params[f"{prefix}.g"] = Tensor(np.ones(dim), True)
    params[f"{prefix}.b"] = Tensor(np.zeros(dim), True)


def init_attention(params: dict, prefix: str, dim: int, rng) -> None:
    for name in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{name}", dim, dim, rng)
    # a key bias shifts every logit of a query row equally, so softmax cancels it
    del params[f"{prefix}.k.b"]


def init_ffn(params: dict, prefix: str, dim: int, mult: int, rng) -> None:
    init_linear(params, f"{prefix}.fc1", dim, mult * dim, rng)
    init_linear(params, f"{prefix}.fc2", mult * dim, dim, rng)


def init_block(params: dict, prefix: str, dim: int, mult: int, rng, experts: tuple[str, ...] = ("ffn",)) -> None:
    init_ln(params, f"{prefix}.ln1", dim)
    init_attention(params, f"{prefix}.attn", dim, rng)
    init_ln(params, f"{prefix}.ln2", dim)
    for e in experts:
        init_ffn(params, f"{prefix}.{e}", dim, mult, rng)


def linear(p: dict, prefix: str, x: Tensor) -> Tensor:
    y = x @ p[f"{prefix}.w"]
    b = p.get(f"{prefix}.b")
    return y if b is None else y + b


def ln(p: dict, prefix: str, x: Tensor) -> Tensor:
    return ag.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def ffn(p: dict, prefix: str, x: Tensor) -> Tensor:
    return linear(p, f"{prefix}.fc2", ag.gelu(linear(p, f"{prefix}.fc1", x)))


def attention(p: dict, prefix: str, xq: Tensor, xkv: Tensor, n_heads: int,
              bias: np.ndarray | None = None, return_weights: bool = False):
    """Multi-head attention over the last two axes.

    ``xq``: (..., Tq, D); ``xkv``: (..., Tk, D); ``bias`` broadcasts against
    (..., H, Tq, Tk) and is added to the logits before the softmax.
    """
    D = xq.shape[-1]
    dh = D // n_heads
    lead_q, lead_k = xq.shape[:-1], xkv.shape[:-1]

    def heads(t: Tensor, lead) -> Tensor:
        t = ag.reshape(t, lead + (n_heads, dh))
        nd = len(lead) + 2
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return ag.transpose(t, axes)

    q = heads(linear(p, f"{prefix}.q", xq), lead_q)
    k = heads(linear(p, f"{prefix}.k", xkv), lead_k)
    v = heads(linear(p, f"{prefix}.v", xkv), lead_k)
    logits = (q @ k.T) * (1.0 / np.sqrt(dh))
    if bias is not None:
        logits = logits + bias
    w = ag.softmax(logits, axis=-1)
    o = w @ v
    nd = o.ndim
    o = ag.transpose(o, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    o = ag.reshape(o, lead_q + (D,))
    out = linear(p, f"{prefix}.o", o)
    return (out, w) if return_weights else out


def transformer_block(p: dict, prefix: str, x: Tensor, n_heads: int, bias=None) -> Tensor:
    """Plain pre-norm block with a single shared feed-forward network."""
    h = ln(p, f"{prefix}.ln1", x)
    x = x + attention(p, f"{prefix}.attn", h, h, n_heads, bias)
    return x + ffn(p, f"{prefix}.ffn", ln(p, f"{prefix}.ln2", x))
