"""Modality-aware blocking: block-size selection, partition and reassembly."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .numerics import DimensionError, DomainError, Tensor, matmul, reshape, transpose


class StructureError(ValueError):
    """A block grid is incomplete or has misshapen members."""


class BlockingMode(str, Enum):
    TWO_D = "two_dimensional"
    ONE_D = "one_dimensional"


@dataclass(frozen=True)
class BlockPlan:
    """Block geometry for one modality.

    In 2D mode blocks are ``block_rows x block_cols`` tiles of the
    ``(positions, features)`` plane. In 1D mode the temporal axis is cut into
    segments of ``block_cols`` positions and every block spans all features;
    ``block_rows`` is then ``None`` and ``grid_cols`` is 1.
    """

    mode: BlockingMode
    block_rows: int | None
    block_cols: int
    grid_rows: int
    grid_cols: int
    source_shape: tuple[int, int]

    def __post_init__(self):
        m, n = self.source_shape
        if self.mode is BlockingMode.TWO_D:
            k, j = self.block_rows, self.block_cols
            if k is None or m % k or n % j or self.grid_rows != m // k or self.grid_cols != n // j:
                raise StructureError(f"inconsistent 2D plan {self}")
        else:
            j = self.block_cols
            if self.block_rows is not None or m % j or self.grid_rows != m // j or self.grid_cols != 1:
                raise StructureError(f"inconsistent 1D plan {self}")

    @property
    def block_shape(self) -> tuple[int, int]:
        """(rows, cols) of a single block."""
        if self.mode is BlockingMode.TWO_D:
            return self.block_rows, self.block_cols
        return self.block_cols, self.source_shape[1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grid_rows, self.grid_cols

    @property
    def num_blocks(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def pooled_dim(self) -> int:
        """Length of a block vector after pooling over its positions."""
        return self.block_shape[1]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "block_rows": self.block_rows,
            "block_cols": self.block_cols,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "source_shape": list(self.source_shape),
        }


def factor_set(m: int) -> list[int]:
    """All divisors of ``m`` in ascending order."""
    if m < 1:
        raise DomainError(f"factor_set needs m >= 1, got {m}")
    small, large = [], []
    for d in range(1, math.isqrt(m) + 1):
        if m % d == 0:
            small.append(d)
            if d != m // d:
                large.append(m // d)
    return small + large[::-1]


@lru_cache(maxsize=4096)
def _closest_factor(m: int) -> int:
    root = math.sqrt(m)
    # strict < keeps the earlier (smaller) factor on ties
    best, best_obj = None, math.inf
    for d in factor_set(m):
        obj = (d / root - 1.0) ** 2
        if obj < best_obj:
            best, best_obj = d, obj
    return best


def block_objective(k: int | None, j: int, m: int, n: int | None) -> float:
    """Balance objective for a candidate block size (lower is better)."""
    if k is None:
        return (j / math.sqrt(m) - 1.0) ** 2
    return (k / math.sqrt(m) - 1.0) ** 2 + (j / math.sqrt(n) - 1.0) ** 2


@lru_cache(maxsize=None)
def highly_composite_at_least(m: int) -> int:
    """Smallest highly composite number that is >= ``m``."""
    if m < 1:
        raise DomainError(f"need m >= 1, got {m}")
    record, k = 0, 1
    while True:
        count = len(factor_set(k))
        if count > record:
            record = count
            if k >= m:
                return k
        k += 1


def optimal_block_params(
    m: int,
    n: int | None = None,
    mode: BlockingMode | str = BlockingMode.TWO_D,
    pad: bool = False,
) -> BlockPlan:
    """Choose block sizes whose factors sit closest to the square root of each axis.

    With ``pad=True`` each blocked axis is first rounded up to the nearest
    highly composite length, so the plan's ``source_shape`` may exceed the
    feature shape; :func:`partition` zero-pads accordingly.
    """
    mode = BlockingMode(mode)
    if m < 1:
        raise DomainError(f"positions must be >= 1, got {m}")
    if mode is BlockingMode.TWO_D:
        if n is None or n < 1:
            raise DomainError("two-dimensional blocking needs a feature size n >= 1")
        if pad:
            m, n = highly_composite_at_least(m), highly_composite_at_least(n)
        # the objective separates across axes, so the joint argmin is per-axis
        k, j = _closest_factor(m), _closest_factor(n)
        return BlockPlan(mode, k, j, m // k, n // j, (m, n))
    if n is None:
        raise DomainError("one-dimensional blocking needs the feature size n for block shape")
    if pad:
        m = highly_composite_at_least(m)
    j = _closest_factor(m)
    return BlockPlan(mode, None, j, m // j, 1, (m, n))


def plan_with_sizes(shape: tuple[int, int], mode: BlockingMode | str, sizes) -> BlockPlan:
    """Build a plan with explicit block sizes (``(k, j)`` in 2D, ``j`` in 1D)."""
    mode = BlockingMode(mode)
    m, n = shape
    if mode is BlockingMode.TWO_D:
        k, j = sizes
        if m % k or n % j:
            raise DomainError(f"block size {(k, j)} does not divide {shape}")
        return BlockPlan(mode, int(k), int(j), m // k, n // j, (m, n))
    j = int(sizes[0] if isinstance(sizes, (tuple, list)) else sizes)
    if m % j:
        raise DomainError(f"block length {j} does not divide {m}")
    return BlockPlan(mode, None, j, m // j, 1, (m, n))


@dataclass
class BlockSet:
    """A full grid of blocks, stored stacked as ``(batch, P, Q, rows, cols)``.

    ``original_shape`` is the feature shape before any zero padding.
    """

    plan: BlockPlan
    stacked: Tensor
    original_shape: tuple[int, int] | None = None

    def block(self, p: int, q: int) -> Tensor:
        """Block at grid row ``p`` and column ``q`` (0-based), shape (batch, rows, cols)."""
        return Tensor(self.stacked.data[:, p, q])

    @property
    def grid(self) -> list[list[Tensor]]:
        return [
            [self.block(p, q) for q in range(self.plan.grid_cols)]
            for p in range(self.plan.grid_rows)
        ]

    @classmethod
    def from_grid(cls, plan: BlockPlan, blocks, original_shape=None) -> "BlockSet":
        rows, cols = plan.block_shape
        if len(blocks) != plan.grid_rows or any(len(r) != plan.grid_cols for r in blocks):
            raise StructureError(f"expected a {plan.grid_rows}x{plan.grid_cols} grid of blocks")
        arrays = []
        batch = None
        for p, row in enumerate(blocks):
            for q, b in enumerate(row):
                if b is None:
                    raise StructureError(f"block ({p}, {q}) is missing")
                a = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
                if a.ndim != 3 or a.shape[1:] != (rows, cols) or (batch is not None and a.shape[0] != batch):
                    raise StructureError(f"block ({p}, {q}) has shape {a.shape}, expected (batch, {rows}, {cols})")
                batch = a.shape[0]
                arrays.append(a)
        stacked = np.stack(arrays, axis=1).reshape(batch, plan.grid_rows, plan.grid_cols, rows, cols)
        return cls(plan, Tensor(stacked), original_shape)


def _pad_to(x: Tensor, shape: tuple[int, int]) -> Tensor:
    m, n = x.shape[1:]
    if (m, n) == shape:
        return x
    # padding uses a constant selection matrix so gradients still flow
    rows = np.eye(shape[0], m)
    cols = np.eye(n, shape[1])
    return matmul(matmul(Tensor(rows), x), Tensor(cols))


def partition(x: Tensor, plan: BlockPlan) -> BlockSet:
    """Cut ``x`` of shape (batch, m, n) into the plan's block grid (pure copy)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"partition expects (batch, positions, features), got {x.shape}")
    shape = tuple(x.shape[1:])
    original = None
    if shape != plan.source_shape:
        if shape[0] > plan.source_shape[0] or shape[1] > plan.source_shape[1] or (
            plan.mode is BlockingMode.ONE_D and shape[1] != plan.source_shape[1]
        ):
            raise DimensionError(f"plan for {plan.source_shape} does not fit features {shape}")
        original = shape
        x = _pad_to(x, plan.source_shape)
    b = x.shape[0]
    rows, cols = plan.block_shape
    five = reshape(x, (b, plan.grid_rows, rows, plan.grid_cols, cols))
    return BlockSet(plan, transpose(five, (0, 1, 3, 2, 4)), original)


def reassemble(blocks: BlockSet) -> Tensor:
    """Inverse of :func:`partition`; crops away any padding."""
    plan = blocks.plan
    rows, cols = plan.block_shape
    s = blocks.stacked
    if s.ndim != 5 or s.shape[1:] != (plan.grid_rows, plan.grid_cols, rows, cols):
        raise StructureError(f"block stack shape {s.shape} does not match plan {plan.grid_shape}x{plan.block_shape}")
    b = s.shape[0]
    out = reshape(transpose(s, (0, 1, 3, 2, 4)), (b,) + plan.source_shape)
    if blocks.original_shape is not None and blocks.original_shape != plan.source_shape:
        m, n = blocks.original_shape
        out = matmul(matmul(Tensor(np.eye(m, plan.source_shape[0])), out), Tensor(np.eye(plan.source_shape[1], n)))
    return out


def expand_grid(grid: np.ndarray, plan: BlockPlan) -> np.ndarray:
    """Broadcast a (..., P, Q) per-block grid to a (..., m, n) element map."""
    grid = np.asarray(grid)
    rows, cols = plan.block_shape
    return np.repeat(np.repeat(grid, rows, axis=-2), cols, axis=-1)


def block_average(elements: np.ndarray, plan: BlockPlan) -> np.ndarray:
    """Average a (..., m, n) element map over each block, giving (..., P, Q)."""
    e = np.asarray(elements, dtype=np.float64)
    rows, cols = plan.block_shape
    lead = e.shape[:-2]
    e = e.reshape(lead + (plan.grid_rows, rows, plan.grid_cols, cols))
    return e.mean(axis=(-3, -1))
