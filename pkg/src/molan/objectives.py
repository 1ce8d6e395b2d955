"""Training objectives and embedding diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    DimensionError,
    DomainError,
    Tensor,
    absolute,
    add,
    cosine_similarity,
    log_softmax_lastdim,
    mean_pool,
    pick,
    reshape,
    scale,
    sum_,
)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")


@dataclass
class LossReport:
    task: Tensor
    contrast_v: Tensor
    contrast_a: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "task": self.task.item(),
            "contrast_v": self.contrast_v.item(),
            "contrast_a": self.contrast_a.item(),
            "total": self.total.item(),
        }


def _scalar(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(float(x))


def contrastive_loss(denoised: Tensor, original: Tensor, cfg: ContrastiveConfig | float = ContrastiveConfig()) -> Tensor:
    """InfoNCE between each sample's denoised and original features.

    Embeddings are the features mean-pooled over positions; negatives are the
    other samples' original embeddings in the batch.
    """
    tau = cfg.temperature if isinstance(cfg, ContrastiveConfig) else float(cfg)
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    denoised = denoised if isinstance(denoised, Tensor) else Tensor(denoised)
    original = original if isinstance(original, Tensor) else Tensor(original)
    if denoised.shape != original.shape:
        raise DimensionError(f"shape mismatch {denoised.shape} vs {original.shape}")
    n = denoised.shape[0]
    if n < 1:
        raise DomainError("contrastive loss needs at least one sample")
    d = mean_pool(denoised, 1) if denoised.ndim == 3 else denoised
    o = mean_pool(original, 1) if original.ndim == 3 else original
    dim = d.shape[-1]
    sims = cosine_similarity(reshape(d, (n, 1, dim)), reshape(o, (1, n, dim)))  # (N, N)
    logp = log_softmax_lastdim(scale(sims, 1.0 / tau))
    return scale(sum_(pick(logp, np.arange(n))), -1.0 / n)


def task_loss(pred: Tensor, target, mode: str = "regression") -> Tensor:
    """Mean absolute error (regression) or mean cross-entropy over class logits."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if mode == "regression":
        t = target.astype(np.float64).reshape(pred.shape) if target.size == pred.size else None
        if t is None:
            raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
        n = pred.size
        return scale(sum_(absolute(add(pred, Tensor(-t)))), 1.0 / n)
    if mode == "classification":
        if pred.ndim != 2 or target.shape != (pred.shape[0],):
            raise DimensionError(f"logits {pred.shape} vs targets {target.shape}")
        if not np.all(np.equal(np.mod(target, 1), 0)):
            raise DomainError("class targets must be integers")
        idx = target.astype(np.int64)
        c = pred.shape[1]
        bad = (idx < 0) | (idx >= c)
        if bad.any():
            raise DomainError(f"invalid class index {int(idx[bad][0])} for {c} classes")
        return scale(sum_(pick(log_softmax_lastdim(pred), idx)), -1.0 / pred.shape[0])
    raise DomainError(f"unknown task mode {mode!r}")


def total_loss(task, c_v, c_a) -> LossReport:
    """Unweighted sum of the task and both contrastive terms."""
    task, c_v, c_a = _scalar(task), _scalar(c_v), _scalar(c_a)
    return LossReport(task, c_v, c_a, add(add(task, c_v), c_a))


def zero_loss() -> Tensor:
    return Tensor(0.0)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), 0.0)


def alignment_uniformity(denoised, original) -> tuple[float, float]:
    """Hypersphere alignment of positive pairs and uniformity of the originals.

    Inputs are (N, D) embeddings (or (N, T, D) features, mean-pooled over T).
    alignment = mean_i ||d_i - o_i||^2 ; uniformity = log mean_{i != j} exp(-2 ||o_i - o_j||^2).
    """
    d = np.asarray(denoised.data if isinstance(denoised, Tensor) else denoised, dtype=np.float64)
    o = np.asarray(original.data if isinstance(original, Tensor) else original, dtype=np.float64)
    if d.ndim == 3:
        d, o = d.mean(axis=1), o.mean(axis=1)
    if d.shape != o.shape:
        raise DimensionError(f"shape mismatch {d.shape} vs {o.shape}")
    n = d.shape[0]
    if n < 2:
        raise DomainError("uniformity needs at least two samples")
    d, o = _unit_rows(d), _unit_rows(o)
    alignment = float(np.mean(np.sum((d - o) ** 2, axis=-1)))
    sq = np.sum((o[:, None, :] - o[None, :, :]) ** 2, axis=-1)
    off = ~np.eye(n, dtype=bool)
    uniformity = math.log(float(np.mean(np.exp(-2.0 * sq[off]))))
    return alignment, uniformity


def uniformity(embeddings) -> float:
    """Uniformity of a single embedding set (log mean Gaussian kernel over distinct pairs)."""
    e = np.asarray(embeddings, dtype=np.float64)
    return alignment_uniformity(e, e)[1]


__all__ = [
    "ContrastiveConfig",
    "LossReport",
    "contrastive_loss",
    "task_loss",
    "total_loss",
    "zero_loss",
    "alignment_uniformity",
    "uniformity",
]
