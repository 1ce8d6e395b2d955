"""Noise dynamic editing: per-block denoising strength against the text anchor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocking import BlockPlan, BlockSet, partition, reassemble
from .numerics import (
    DimensionError,
    Parameter,
    Tensor,
    cosine_similarity,
    masked_mean,
    matmul,
    mean_pool,
    mul,
    relu,
    reshape,
)


@dataclass
class DenoiseHead:
    """Learned maps taking pooled block vectors and pooled text into a shared space."""

    proj_block: Parameter
    proj_text: Parameter

    def __post_init__(self):
        if self.proj_block.shape[1] != self.proj_text.shape[1]:
            raise DimensionError(
                f"head projections disagree on shared dim: {self.proj_block.shape} vs {self.proj_text.shape}"
            )

    @property
    def shared_dim(self) -> int:
        return self.proj_text.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.proj_block, self.proj_text]


@dataclass
class EditedBundle:
    denoised: Tensor
    strengths: Tensor  # (batch, P, Q)
    plan: BlockPlan

    @property
    def sigma(self) -> np.ndarray:
        return self.strengths.data


def text_anchor(text: Tensor, head: DenoiseHead, text_keep: np.ndarray | None = None) -> Tensor:
    """Pool text over its valid tokens and project into the shared space, (batch, d_s)."""
    text = text if isinstance(text, Tensor) else Tensor(text)
    pooled = mean_pool(text, 1) if text_keep is None else masked_mean(text, text_keep, axis=1)
    if pooled.shape[-1] != head.proj_text.shape[0]:
        raise DimensionError(f"text dim {pooled.shape[-1]} vs projection {head.proj_text.shape}")
    return matmul(pooled, head.proj_text)


def _rectify(cos: Tensor, rectify: bool) -> Tensor:
    return relu(cos) if rectify else cos


def block_strengths(
    blocks: BlockSet, anchor: Tensor, head: DenoiseHead, rectify: bool = True
) -> Tensor:
    """Strength for every block in the set, shape (batch, P, Q)."""
    s = blocks.stacked
    if s.shape[0] != anchor.shape[0]:
        raise DimensionError(f"batch mismatch: blocks {s.shape[0]} vs text {anchor.shape[0]}")
    pooled = mean_pool(s, 3)  # (B, P, Q, cols)
    if pooled.shape[-1] != head.proj_block.shape[0]:
        raise DimensionError(f"block vector dim {pooled.shape[-1]} vs projection {head.proj_block.shape}")
    projected = matmul(pooled, head.proj_block)
    b, d = anchor.shape
    return _rectify(cosine_similarity(projected, reshape(anchor, (b, 1, 1, d))), rectify)


def denoise_strength(
    block: Tensor,
    text: Tensor,
    head: DenoiseHead,
    text_keep: np.ndarray | None = None,
    rectify: bool = True,
) -> Tensor:
    """Strength of a single (batch, rows, cols) block, one scalar per sample."""
    block = block if isinstance(block, Tensor) else Tensor(block)
    if block.ndim != 3:
        raise DimensionError(f"block must be (batch, rows, cols), got {block.shape}")
    anchor = text_anchor(text, head, text_keep)
    if block.shape[0] != anchor.shape[0]:
        raise DimensionError(f"batch mismatch: block {block.shape[0]} vs text {anchor.shape[0]}")
    projected = matmul(mean_pool(block, 1), head.proj_block)
    return _rectify(cosine_similarity(projected, anchor), rectify)


def _scale_blocks(blocks: BlockSet, sigma: Tensor) -> Tensor:
    b, p, q = sigma.shape
    scaled = mul(blocks.stacked, reshape(sigma, (b, p, q, 1, 1)))
    return reassemble(BlockSet(blocks.plan, scaled, blocks.original_shape))


def edit_modality(
    x: Tensor,
    text: Tensor,
    head: DenoiseHead,
    plan: BlockPlan,
    text_keep: np.ndarray | None = None,
    rectify: bool = True,
) -> EditedBundle:
    """Scale every block of ``x`` by its own strength and reassemble."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    blocks = partition(x, plan)
    sigma = block_strengths(blocks, text_anchor(text, head, text_keep), head, rectify)
    return EditedBundle(_scale_blocks(blocks, sigma), sigma, plan)


def uniform_edit(
    x: Tensor,
    text: Tensor,
    head: DenoiseHead,
    plan: BlockPlan,
    text_keep: np.ndarray | None = None,
    rectify: bool = True,
) -> EditedBundle:
    """One strength per sample from the whole modality, applied to every block.

    The modality vector is the mean of all pooled block vectors, which in 1D
    mode is the mean over all positions.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    blocks = partition(x, plan)
    anchor = text_anchor(text, head, text_keep)
    b, p, q = x.shape[0], plan.grid_rows, plan.grid_cols
    pooled = mean_pool(blocks.stacked, 3)  # (B, P, Q, cols)
    whole = mean_pool(reshape(pooled, (b, p * q, pooled.shape[-1])), 1)
    if whole.shape[-1] != head.proj_block.shape[0]:
        raise DimensionError(f"block vector dim {whole.shape[-1]} vs projection {head.proj_block.shape}")
    single = _rectify(cosine_similarity(matmul(whole, head.proj_block), anchor), rectify)
    sigma = mul(reshape(single, (b, 1, 1)), Tensor(np.ones((1, p, q))))
    return EditedBundle(_scale_blocks(blocks, sigma), sigma, plan)


def molan_forward(
    text: Tensor,
    visual: Tensor,
    audio: Tensor,
    heads: dict[str, DenoiseHead],
    plans: dict[str, BlockPlan],
    text_keep: np.ndarray | None = None,
    uniform: bool = False,
    rectify: bool = True,
) -> tuple[EditedBundle, EditedBundle]:
    """Edit visual and audio features against the (unedited) text anchor."""
    batches = {text.shape[0], visual.shape[0], audio.shape[0]}
    if len(batches) != 1:
        raise DimensionError(
            f"batch sizes differ: text {text.shape[0]}, visual {visual.shape[0]}, audio {audio.shape[0]}"
        )
    edit = uniform_edit if uniform else edit_modality
    v = edit(visual, text, heads["visual"], plans["visual"], text_keep, rectify)
    a = edit(audio, text, heads["audio"], plans["audio"], text_keep, rectify)
    return v, a
