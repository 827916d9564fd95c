"""Salient flow attention: split-head differential attention with a kNN
mean-centered, neighborhood-masked background pathway.

Two attention maps are formed from split query/key projections. The first is
plain softmax attention; the second is restricted to each token's kappa
spatially-nearest neighbors within its frame, with keys mean-centered over
the neighborhood so that locally-shared (common-mode) content cancels. The
salient map is Attn1 - lambda * Attn2~, whose rows sum to 1 - lambda.

All ops accept arbitrary leading batch axes; the spec-level surface works on
bare (N, d) instances. lambda is passed in materialized form (the backbone
reparameterizes a raw scalar through a sigmoid so the learned value stays in
[0, 1]).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor


@dataclass(frozen=True)
class TokenGrid:
    """Token matrix plus its (frame, row, col) layout."""

    tokens: np.ndarray  # (N, d_model)
    layout: tuple[int, int, int]  # (n_f, n_h, n_w)

    def __post_init__(self):
        n_f, n_h, n_w = self.layout
        if self.tokens.shape[0] != n_f * n_h * n_w:
            raise ValueError(f"{self.tokens.shape[0]} tokens for layout {self.layout}")

    def coords(self) -> np.ndarray:
        n_f, n_h, n_w = self.layout
        f, r, c = np.meshgrid(np.arange(n_f), np.arange(n_h), np.arange(n_w), indexing="ij")
        return np.stack([f.ravel(), r.ravel(), c.ravel()], axis=1)


@dataclass
class SfaParams:
    """Projections for one salient-flow-attention pass.

    w_q, w_k: (d_model, 2d) split as [Q1; Q2] / [K1; K2]; w_v: (d_model, d_v);
    lam: balancing coefficient in [0, 1]; kappa: neighborhood size.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    lam: Tensor | float = 0.5
    kappa: int = 5

    def __post_init__(self):
        if self.w_q.shape != self.w_k.shape:
            raise ValueError("w_q and w_k must share their shape")
        if self.w_q.shape[-1] % 2:
            raise ValueError("query/key projection width must be even (two splits)")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")

    @property
    def split_dim(self) -> int:
        return self.w_q.shape[-1] // 2


@dataclass(frozen=True)
class NeighborIndex:
    """For each spatial token, its kappa nearest same-frame tokens (self first)."""

    idx: np.ndarray  # (P, kappa) integer
    layout: tuple[int, int]  # (n_h, n_w)
    kappa: int


def lambda_from_raw(raw: Tensor) -> Tensor:
    """Sigmoid reparameterization keeping the balance coefficient in [0, 1]."""
    return tape.sigmoid(raw)


def build_neighbor_index(layout: tuple[int, int], kappa: int) -> NeighborIndex:
    """Per-frame spatial kNN on (row, col), Euclidean distance, self included.

    Ties break toward the lowest linear token index, so the index is unique
    and deterministic.
    """
    n_h, n_w = layout
    p = n_h * n_w
    if kappa > p:
        raise ValueError(f"kappa={kappa} exceeds the {p} tokens of one frame")
    rows, cols = np.divmod(np.arange(p), n_w)
    d2 = (rows[:, None] - rows[None, :]) ** 2 + (cols[:, None] - cols[None, :]) ** 2
    order = np.lexsort((np.broadcast_to(np.arange(p), (p, p)), d2), axis=1)
    return NeighborIndex(np.ascontiguousarray(order[:, :kappa]), (n_h, n_w), kappa)


def standard_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with row-stochastic weights."""
    q, k, v = tape.astensor(q), tape.astensor(k), tape.astensor(v)
    scale = float(1.0 / np.sqrt(q.shape[-1]))
    logits = tape.mul(tape.matmul(q, tape.swap_last(k)), scale)
    return tape.matmul(tape.softmax(logits, axis=-1), v)


def _split_projections(x: Tensor, params: SfaParams):
    d = params.split_dim
    qk = tape.matmul(x, params.w_q)
    kk = tape.matmul(x, params.w_k)
    q1 = tape.tslice(qk, (..., slice(0, d)))
    q2 = tape.tslice(qk, (..., slice(d, 2 * d)))
    k1 = tape.tslice(kk, (..., slice(0, d)))
    k2 = tape.tslice(kk, (..., slice(d, 2 * d)))
    v = tape.matmul(x, params.w_v)
    return q1, q2, k1, k2, v


def attention_map(q, k) -> Tensor:
    """Row-stochastic softmax(q k^T / sqrt(d)) map."""
    scale = float(1.0 / np.sqrt(q.shape[-1]))
    return tape.softmax(tape.mul(tape.matmul(q, tape.swap_last(k)), scale), axis=-1)


def diff_attention(x, params: SfaParams) -> Tensor:
    """(Attn1 - lambda Attn2) V with both maps from the split projections."""
    x = tape.astensor(x)
    q1, q2, k1, k2, v = _split_projections(x, params)
    combined = tape.sub(attention_map(q1, k1), tape.mul(attention_map(q2, k2), params.lam))
    return tape.matmul(combined, v)


def centered_neighborhood_weights(q2, k2, index: NeighborIndex) -> Tensor:
    """Masked softmax over each token's neighborhood with mean-centered keys.

    Returns the dense (.., P, P) map; entries off the neighborhood support
    are exactly zero. Invariant: one shared shift of every key cancels in
    the centering.
    """
    q2, k2 = tape.astensor(q2), tape.astensor(k2)
    idx = index.idx
    mu = tape.tmean(tape.take_rows(k2, idx), axis=-2)
    k2c = tape.sub(k2, mu)
    gathered = tape.take_rows(k2c, idx)  # (..., P, kappa, d)
    q2e = tape.reshape(q2, q2.shape[:-1] + (1, q2.shape[-1]))
    scale = float(1.0 / np.sqrt(q2.shape[-1]))
    logits = tape.mul(tape.tsum(tape.mul(gathered, q2e), axis=-1), scale)
    weights = tape.softmax(logits, axis=-1)
    return tape.scatter_rows(weights, idx, k2.shape[-2])


def centered_background_attention(x, params: SfaParams, index: NeighborIndex) -> Tensor:
    """The background map Attn2~ of the salient-flow mechanism."""
    x = tape.astensor(x)
    _, q2, _, k2, _ = _split_projections(x, params)
    return centered_neighborhood_weights(q2, k2, index)


def sf_attention(x, params: SfaParams, index: NeighborIndex) -> Tensor:
    """(Attn1 - lambda Attn2~) V; rows of the combined map sum to 1 - lambda."""
    x = tape.astensor(x)
    q1, q2, k1, k2, v = _split_projections(x, params)
    attn1 = attention_map(q1, k1)
    attn2 = centered_neighborhood_weights(q2, k2, index)
    return tape.matmul(tape.sub(attn1, tape.mul(attn2, params.lam)), v)


def factorized_sfa(tokens, spatial: SfaParams, temporal: SfaParams,
                   index: NeighborIndex) -> Tensor:
    """Salient attention within each frame, then across frames per location.

    tokens: (..., n_f, P, d_model). The temporal pass runs plain differential
    attention over the few frames (no neighborhood masking); with no
    positional encoding inside, it is equivariant to frame permutations.
    """
    x = tape.astensor(tokens)
    if x.ndim < 3:
        raise ValueError("factorized_sfa expects (..., frames, tokens, d)")
    y = sf_attention(x, spatial, index)
    axes = list(range(y.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    yt = tape.transpose(y, axes)  # (..., P, n_f, d)
    zt = diff_attention(yt, temporal)
    return tape.transpose(zt, axes)
