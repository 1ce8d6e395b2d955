"""Block keep/drop masks and noise-suppressed scaled dot-product attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocking import BlockingMode, BlockPlan, expand_grid
from .numerics import (
    DimensionError,
    DomainError,
    Parameter,
    Tensor,
    add,
    matmul,
    reshape,
    softmax_lastdim,
    transpose,
)

DROP_BIAS = -1e9


@dataclass
class BlockMask:
    grid: np.ndarray  # bool, (batch, P, Q)
    threshold: float
    plan: BlockPlan


@dataclass
class AttentionMask:
    """Per-sample keep flags over key positions."""

    keep: np.ndarray  # bool, (batch, T)

    @property
    def bias(self) -> np.ndarray:
        """Additive bias of shape (batch, 1, T): 0 where kept, -1e9 where dropped."""
        return np.where(self.keep, 0.0, DROP_BIAS)[:, None, :]

    @classmethod
    def all_kept(cls, batch: int, length: int) -> "AttentionMask":
        return cls(np.ones((batch, length), dtype=bool))

    @classmethod
    def from_lengths(cls, lengths, length: int) -> "AttentionMask":
        lengths = np.asarray(lengths, dtype=np.int64)
        return cls(np.arange(length)[None, :] < lengths[:, None])


def build_block_mask(strengths, theta: float, plan: BlockPlan) -> BlockMask:
    """Keep a block iff its strength is at least ``theta``."""
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {theta}")
    sigma = strengths.data if isinstance(strengths, Tensor) else np.asarray(strengths, dtype=np.float64)
    if sigma.shape[-2:] != plan.grid_shape:
        raise DimensionError(f"strength grid {sigma.shape} does not match plan grid {plan.grid_shape}")
    return BlockMask(sigma >= theta, float(theta), plan)


def to_key_mask(block_mask: BlockMask, length: int | None = None) -> AttentionMask:
    """Reduce a block mask to per-position keep flags along the temporal axis.

    2D plans keep a position when at least half of the feature blocks covering
    its row are kept. A sample with every position dropped keeps everything.
    ``length`` crops away zero-padded positions.
    """
    plan = block_mask.plan
    grid = block_mask.grid
    if plan.mode is BlockingMode.TWO_D:
        row_keep = 2 * grid.sum(axis=-1) >= plan.grid_cols  # (B, P)
    else:
        row_keep = grid[..., 0]
    rows = plan.block_shape[0]
    keep = np.repeat(row_keep, rows, axis=-1)
    keep = keep[:, : length or plan.source_shape[0]].copy()
    dead = ~keep.any(axis=-1)
    keep[dead] = True
    return AttentionMask(keep)


def element_mask(block_mask: BlockMask) -> np.ndarray:
    """Block mask expanded back to element resolution, (batch, m, n)."""
    return expand_grid(block_mask.grid, block_mask.plan)


@dataclass
class AttentionParams:
    query: Parameter
    key: Parameter
    value: Parameter
    heads: int = 1

    def __post_init__(self):
        dq, dk = self.query.shape[1], self.key.shape[1]
        if dq != dk or dq % self.heads:
            raise DimensionError(
                f"query/key projection dims {dq}, {dk} incompatible with {self.heads} heads"
            )
        if self.value.shape[1] % self.heads:
            raise DimensionError(f"value dim {self.value.shape[1]} not divisible by {self.heads} heads")

    def parameters(self) -> list[Parameter]:
        return [self.query, self.key, self.value]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def attention_weights(query_feats: Tensor, key_feats: Tensor, key_mask: AttentionMask | None, params: AttentionParams) -> Tensor:
    """Post-mask attention weights, shape (batch, heads, Tq, Tk)."""
    if query_feats.ndim != 3 or key_feats.ndim != 3 or query_feats.shape[0] != key_feats.shape[0]:
        raise DimensionError(f"attention expects matching (batch, T, d) inputs, got {query_feats.shape} and {key_feats.shape}")
    if query_feats.shape[-1] != params.query.shape[0] or key_feats.shape[-1] != params.key.shape[0]:
        raise DimensionError(
            f"feature dims {query_feats.shape[-1]}, {key_feats.shape[-1]} vs projections "
            f"{params.query.shape}, {params.key.shape}"
        )
    h = params.heads
    q = _split_heads(matmul(query_feats, params.query), h)
    k = _split_heads(matmul(key_feats, params.key), h)
    dh = q.shape[-1]
    logits = matmul(q, transpose(k, (0, 1, 3, 2)))
    logits = logits * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        if key_mask.keep.shape != (key_feats.shape[0], key_feats.shape[1]):
            raise DimensionError(f"key mask {key_mask.keep.shape} vs keys {key_feats.shape[:2]}")
        logits = add(logits, Tensor(key_mask.bias[:, None, :, :]))
    return softmax_lastdim(logits)


def cross_attention(
    query_feats: Tensor,
    key_feats: Tensor,
    key_mask: AttentionMask | None,
    params: AttentionParams,
    residual: bool = True,
) -> Tensor:
    """softmax(QK^T / sqrt(d) + bias) V, plus the query as residual."""
    w = attention_weights(query_feats, key_feats, key_mask, params)
    if key_feats.shape[-1] != params.value.shape[0]:
        raise DimensionError(f"key dim {key_feats.shape[-1]} vs value projection {params.value.shape}")
    v = _split_heads(matmul(key_feats, params.value), params.heads)
    out = matmul(w, v)  # (B, h, Tq, dh)
    b, _, tq, _ = out.shape
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, tq, params.value.shape[1]))
    if residual:
        if out.shape != query_feats.shape:
            raise DimensionError(f"residual needs output {out.shape} == query {query_feats.shape}")
        out = add(query_feats, out)
    return out


def self_attention(
    x: Tensor, mask: AttentionMask | None, params: AttentionParams, residual: bool = True
) -> Tensor:
    return cross_attention(x, x, mask, params, residual)
