"""Containers for primal vectors and block dual vectors.

A primal variable is a single dense array; a dual variable ``y = (y_1, ..., y_n)``
is a :class:`BlockVector`.  All metrics used by the solvers are per-block
scalars, so a weighted norm is just ``sum_i w_i * ||v_i||^2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "StructureError",
    "Shape",
    "BlockVector",
    "BlockWeights",
    "as_blocks",
    "axpy",
    "inner",
    "weighted_norm_sq",
]


class StructureError(ValueError):
    """Raised when block counts or block shapes do not match."""


@dataclass(frozen=True)
class Shape:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in np.atleast_1d(self.dims))
        if not dims or any(d < 1 for d in dims):
            raise StructureError(f"invalid extents {self.dims!r}")
        object.__setattr__(self, "dims", dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @classmethod
    def of(cls, shape) -> "Shape":
        return shape if isinstance(shape, Shape) else cls(tuple(np.atleast_1d(shape)))


class BlockVector(Sequence):
    """Ordered tuple of real float64 arrays.

    Behaves as a read-only sequence of its blocks, so ``bv[i]`` is ``y_i``.
    """

    __slots__ = ("blocks",)

    def __init__(self, blocks: Iterable):
        blocks = tuple(np.asarray(b, dtype=float) for b in blocks)
        if not blocks:
            raise StructureError("a block vector needs at least one block")
        for i, b in enumerate(blocks):
            if not np.all(np.isfinite(b)):
                raise ValueError(f"block {i} has non-finite entries")
        self.blocks = blocks

    def __getitem__(self, i):
        return self.blocks[i]

    def __len__(self):
        return len(self.blocks)

    @property
    def block_shapes(self) -> list[Shape]:
        return [Shape(b.shape if b.ndim else (1,)) for b in self.blocks]

    def copy(self) -> "BlockVector":
        return BlockVector(b.copy() for b in self.blocks)

    def __add__(self, other):
        return axpy(1.0, other, self)

    def __sub__(self, other):
        return axpy(-1.0, other, self)

    def __mul__(self, a):
        return BlockVector(a * b for b in self.blocks)

    __rmul__ = __mul__

    def __repr__(self):
        shapes = ", ".join(str(b.shape) for b in self.blocks)
        return f"BlockVector([{shapes}])"

    @classmethod
    def zeros_like(cls, other) -> "BlockVector":
        return cls(np.zeros_like(b, dtype=float) for b in as_blocks(other))


@dataclass(frozen=True)
class BlockWeights:
    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(v) for v in np.atleast_1d(self.weights))
        if any(not v > 0 for v in w):
            raise ValueError(f"weights must be positive, got {w}")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)

    def __add__(self, other: "BlockWeights") -> "BlockWeights":
        return BlockWeights(tuple(a + b for a, b in zip(self.weights, other.weights, strict=True)))

    @classmethod
    def unit(cls, n: int) -> "BlockWeights":
        return cls((1.0,) * n)


def as_blocks(v) -> tuple[np.ndarray, ...]:
    """Return the blocks of ``v``; a bare array counts as a single block."""
    if isinstance(v, BlockVector):
        return v.blocks
    if isinstance(v, np.ndarray):
        return (v,)
    return tuple(np.asarray(b, dtype=float) for b in v)


def _check_structure(u, v):
    if len(u) != len(v):
        raise StructureError(f"block count mismatch: {len(u)} vs {len(v)}")
    for i, (a, b) in enumerate(zip(u, v)):
        if np.shape(a) != np.shape(b):
            raise StructureError(f"block {i}: shape {np.shape(a)} vs {np.shape(b)}")


def axpy(a: float, x, y) -> BlockVector:
    """Blockwise ``a * x + y``."""
    xb, yb = as_blocks(x), as_blocks(y)
    _check_structure(xb, yb)
    return BlockVector(a * xi + yi for xi, yi in zip(xb, yb))


def inner(u, v) -> float:
    """Product-space inner product ``sum_i <u_i, v_i>``."""
    ub, vb = as_blocks(u), as_blocks(v)
    _check_structure(ub, vb)
    return float(sum(np.vdot(a, b) for a, b in zip(ub, vb)))


def weighted_norm_sq(v, w) -> float:
    """``sum_i w_i ||v_i||^2`` for per-block scalar weights ``w_i > 0``."""
    vb = as_blocks(v)
    weights = w.weights if isinstance(w, BlockWeights) else tuple(np.atleast_1d(w).astype(float))
    if len(weights) != len(vb):
        raise StructureError(f"{len(weights)} weights for {len(vb)} blocks")
    if any(not wi > 0 for wi in weights):
        raise ValueError("weights must be positive")
    return float(sum(wi * np.vdot(b, b) for wi, b in zip(weights, vb)))
