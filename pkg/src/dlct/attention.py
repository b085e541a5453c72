"""Relation-aware attention: CRA / MHCRA and graph-masked cross attention (MHLCCA)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .numerics import (
    Tensor,
    add,
    dropout,
    linear,
    log,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    swapaxes,
    transpose,
)

log_ = logging.getLogger(__name__)

MASK_FILL = -1e9


class GraphError(ValueError):
    pass


@dataclass
class AttentionOutput:
    values: Tensor
    weights: Tensor  # [..., heads, N_q, N_k]


def _bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, MASK_FILL)


def graph_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the neighbour set given by ``mask``; non-neighbours get exactly 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise GraphError("graph_softmax: a query row has no neighbours")
    w = softmax(add(scores, _bias(mask)), axis=-1)
    return mul(w, mask.astype(np.float64))


def cra(q: Tensor, k: Tensor, v: Tensor, pos_q=None, pos_k=None, omega=None, mask=None) -> AttentionOutput:
    """softmax((q + pos_q)(k + pos_k)^T / sqrt(d) + log(omega)) v.

    Inputs carry arbitrary leading dims ([..., N, d]); ``omega`` is
    [..., N_q, N_k] and strictly positive. ``mask`` (bool, True = may attend)
    switches the softmax to graph_softmax.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"cra: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"cra: {k.shape[-2]} keys but {v.shape[-2]} values")
    if pos_q is not None:
        if tuple(np.shape(pos_q.data if isinstance(pos_q, Tensor) else pos_q))[-2:] != q.shape[-2:]:
            raise ValueError("cra: pos_q must match the query shape")
        q = add(q, pos_q)
    if pos_k is not None:
        if tuple(np.shape(pos_k.data if isinstance(pos_k, Tensor) else pos_k))[-2:] != k.shape[-2:]:
            raise ValueError("cra: pos_k must match the key shape")
        k = add(k, pos_k)
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if omega is not None:
        scores = add(scores, log(omega if isinstance(omega, Tensor) else Tensor(omega)))
    weights = softmax(scores, axis=-1) if mask is None else graph_softmax(scores, mask)
    return AttentionOutput(matmul(weights, v), weights)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    nd = x.ndim
    return transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    x = transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    *lead, n, h, dh = x.shape
    return reshape(x, (*lead, n, h * dh))


def _project_qkv(x_q, x_k, x_v, params, heads, pos_q, pos_k):
    d = x_q.shape[-1]
    if d % heads:
        raise ValueError(f"d_model={d} is not divisible by heads={heads}")
    q_in = x_q if pos_q is None else add(x_q, pos_q)
    k_in = x_k if pos_k is None else add(x_k, pos_k)
    q = _split_heads(linear(q_in, params["wq"], params["bq"]), heads)
    k = _split_heads(linear(k_in, params["wk"], params["bk"]), heads)
    v = _split_heads(linear(x_v, params["wv"], params["bv"]), heads)
    return q, k, v


def _heads_mask(mask) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    return mask[..., None, :, :]


def _attend(q, k, v, omega, mask, attn_dropout, rng, training):
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if omega is not None:
        scores = add(scores, log(omega))
    weights = softmax(scores, axis=-1) if mask is None else graph_softmax(scores, mask)
    dropped = dropout(weights, attn_dropout, rng, training)
    return matmul(dropped, v), weights


def mhcra(x_q: Tensor, x_k: Tensor, x_v: Tensor, params: Mapping[str, Tensor], heads: int,
          pos_q=None, pos_k=None, omega: Tensor | None = None, key_mask=None,
          attn_dropout: float = 0.0, rng=None, training: bool = False) -> AttentionOutput:
    """Multi-head CRA.

    Absolute encodings are added to the query/key features before the per-head
    projections, so one d_model-wide encoding serves every head. ``omega`` is
    [..., heads, N_q, N_k]; ``key_mask`` is a bool [..., N_q, N_k] (or
    broadcastable) padding/causal mask whose rows must be non-empty.
    """
    q, k, v = _project_qkv(x_q, x_k, x_v, params, heads, pos_q, pos_k)
    out, weights = _attend(q, k, v, omega, _heads_mask(key_mask), attn_dropout, rng, training)
    return AttentionOutput(linear(_merge_heads(out), params["wo"], params["bo"]), weights)


def mhlcca(source: Tensor, target: Tensor, params: Mapping[str, Tensor], heads: int,
           pos_src=None, pos_tgt=None, omega: Tensor | None = None, graph_mask=None,
           attn_dropout: float = 0.0, rng=None, training: bool = False) -> AttentionOutput:
    """Multi-head cross attention restricted to alignment-graph neighbours.

    ``graph_mask`` is the bool cross-level adjacency slice [..., N_src, N_tgt].
    A source node with no neighbour receives an exactly-zero update, leaving
    only its residual path.
    """
    if graph_mask is None:
        raise ValueError("mhlcca needs a graph mask")
    mask = np.asarray(graph_mask, dtype=bool)
    if mask.shape[-2:] != (source.shape[-2], target.shape[-2]):
        raise ValueError(f"mhlcca: graph slice {mask.shape[-2:]} does not match "
                         f"({source.shape[-2]}, {target.shape[-2]})")
    has = mask.any(axis=-1)
    empty = ~has
    if empty.any():
        log_.debug("mhlcca: %d source nodes without neighbours fall back to residual", int(empty.sum()))
        safe = mask | empty[..., None]
    else:
        safe = mask
    q, k, v = _project_qkv(source, target, target, params, heads, pos_src, pos_tgt)
    out, weights = _attend(q, k, v, omega, _heads_mask(safe), attn_dropout, rng, training)
    values = linear(_merge_heads(out), params["wo"], params["bo"])
    if empty.any():
        keep = has[..., None].astype(np.float64)
        values = mul(values, keep)
        weights = mul(weights, keep[..., None, :, :])
    return AttentionOutput(values, weights)
