"""Linear operators with exact adjoints, and operator-norm estimation.

Every operator counts its forward and adjoint evaluations in ``op.calls``; the
solvers' cost model is checked against these counters.
"""
from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .blockspace import Shape, StructureError

__all__ = [
    "LinearOp",
    "MatrixOp",
    "GradientOp",
    "forward_difference",
    "forward_difference_adjoint",
    "ConvolutionOp",
    "ScaledOp",
    "BlockOperator",
    "ToyRadon",
    "NormEstimateWarning",
    "grad2d",
    "conv2d",
    "toy_radon",
    "sparse_matrix_op",
    "op_norm",
    "uncounted",
    "safe_norm",
    "save_triplets",
    "load_triplets",
]


class NormEstimateWarning(RuntimeWarning):
    """Power iteration stopped at ``max_iter`` before reaching ``tol``."""


class LinearOp:
    """Base class: subclasses implement ``_apply`` and ``_adjoint``."""

    def __init__(self, in_shape, out_shape):
        self.in_shape = Shape.of(in_shape)
        self.out_shape = Shape.of(out_shape)
        self.calls = {"apply": 0, "adjoint": 0}

    def apply(self, x: np.ndarray) -> np.ndarray:
        self.calls["apply"] += 1
        return self._apply(np.reshape(x, self.in_shape.dims))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        self.calls["adjoint"] += 1
        return self._adjoint(np.reshape(y, self.out_shape.dims))

    __call__ = apply

    def reset_counters(self):
        self.calls = {"apply": 0, "adjoint": 0}

    @property
    def evaluations(self) -> int:
        return self.calls["apply"] + self.calls["adjoint"]

    def normal(self, x):
        return self.adjoint(self.apply(x))

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.in_shape.dims} -> {self.out_shape.dims})"


class MatrixOp(LinearOp):
    """Sparse (or dense) matrix acting on flattened arrays."""

    def __init__(self, matrix, in_shape=None, out_shape=None):
        mat = sp.csr_matrix(matrix, dtype=float)
        in_shape = in_shape if in_shape is not None else (mat.shape[1],)
        out_shape = out_shape if out_shape is not None else (mat.shape[0],)
        super().__init__(in_shape, out_shape)
        if mat.shape != (self.out_shape.size, self.in_shape.size):
            raise StructureError(
                f"matrix {mat.shape} does not map {self.in_shape.dims} -> {self.out_shape.dims}")
        self.matrix = mat
        self._matrix_t = mat.T.tocsr()

    def _apply(self, x):
        return (self.matrix @ x.ravel()).reshape(self.out_shape.dims)

    def _adjoint(self, y):
        return (self._matrix_t @ y.ravel()).reshape(self.in_shape.dims)


def forward_difference(x: np.ndarray, axis: int) -> np.ndarray:
    """Forward difference of a 2-D array along ``axis``; zero on the far boundary."""
    out = np.zeros_like(x, dtype=float)
    if axis == 1:
        out[:, :-1] = x[:, 1:] - x[:, :-1]
    else:
        out[:-1, :] = x[1:, :] - x[:-1, :]
    return out


def forward_difference_adjoint(y: np.ndarray, axis: int) -> np.ndarray:
    """Exact transpose of :func:`forward_difference` (a negative divergence)."""
    y = np.array(y, dtype=float)
    if axis == 1:
        y[:, -1] = 0.0
        out = -y
        out[:, 1:] += y[:, :-1]
    else:
        y[-1, :] = 0.0
        out = -y
        out[1:, :] += y[:-1, :]
    return out


class GradientOp(LinearOp):
    """Forward difference along one image axis; the last row/column is zero."""

    def __init__(self, shape, axis: int):
        shape = Shape.of(shape)
        if shape.ndim != 2:
            raise StructureError(f"gradient needs a 2-D shape, got {shape.dims}")
        super().__init__(shape, shape)
        self.axis = axis

    def _apply(self, x):
        return forward_difference(x, self.axis)

    def _adjoint(self, y):
        return forward_difference_adjoint(y, self.axis)


class ConvolutionOp(LinearOp):
    """Zero-padded 2-D correlation with a small kernel, centred at ``k.shape // 2``."""

    def __init__(self, kernel, shape):
        shape = Shape.of(shape)
        kernel = np.atleast_2d(np.asarray(kernel, dtype=float))
        if shape.ndim != 2:
            raise StructureError(f"convolution needs a 2-D shape, got {shape.dims}")
        if kernel.shape[0] > shape.dims[0] or kernel.shape[1] > shape.dims[1]:
            raise StructureError(f"kernel {kernel.shape} larger than image {shape.dims}")
        super().__init__(shape, shape)
        self.kernel = kernel
        kh, kw = kernel.shape
        ch, cw = kh // 2, kw // 2
        self._pad = ((ch, kh - 1 - ch), (cw, kw - 1 - cw))
        self._taps = [(a, b, kernel[a, b]) for a in range(kh) for b in range(kw) if kernel[a, b] != 0]

    def _apply(self, x):
        h, w = self.in_shape.dims
        xp = np.pad(x, self._pad)
        out = np.zeros((h, w))
        for a, b, k in self._taps:
            out += k * xp[a:a + h, b:b + w]
        return out

    def _adjoint(self, y):
        h, w = self.in_shape.dims
        kh, kw = self.kernel.shape
        yp = np.zeros((h + kh - 1, w + kw - 1))
        for a, b, k in self._taps:
            yp[a:a + h, b:b + w] += k * y
        (ch, _), (cw, _) = self._pad
        return yp[ch:ch + h, cw:cw + w]


class ScaledOp(LinearOp):
    """``c * op``; evaluations are counted on the wrapped operator too."""

    def __init__(self, op: LinearOp, c: float):
        super().__init__(op.in_shape, op.out_shape)
        self.op = op
        self.c = float(c)

    def _apply(self, x):
        return self.c * self.op.apply(x)

    def _adjoint(self, y):
        return self.c * self.op.adjoint(y)


class BlockOperator:
    """Stack of rows ``A_i`` with a common domain: ``(Ax)_i = A_i x``, ``A*y = sum_i A_i* y_i``."""

    def __init__(self, rows):
        rows = list(rows)
        if not rows:
            raise StructureError("block operator needs at least one row")
        dom = rows[0].in_shape
        for i, r in enumerate(rows):
            if r.in_shape != dom:
                raise StructureError(f"row {i} has domain {r.in_shape.dims}, expected {dom.dims}")
        self.rows = rows
        self.in_shape = dom

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i) -> LinearOp:
        return self.rows[i]

    def __iter__(self):
        return iter(self.rows)

    def apply(self, x) -> list[np.ndarray]:
        return [r.apply(x) for r in self.rows]

    __call__ = apply

    def adjoint(self, y) -> np.ndarray:
        out = np.zeros(self.in_shape.dims)
        for r, yi in zip(self.rows, y, strict=True):
            out += r.adjoint(yi)
        return out

    def normal(self, x):
        return self.adjoint(self.apply(x))

    def scaled(self, weights) -> "BlockOperator":
        return BlockOperator(ScaledOp(r, w) for r, w in zip(self.rows, weights, strict=True))

    @property
    def out_shapes(self) -> list[Shape]:
        return [r.out_shape for r in self.rows]

    @property
    def evaluations(self) -> int:
        return sum(r.evaluations for r in self.rows)

    def reset_counters(self):
        for r in self.rows:
            r.reset_counters()

    def zeros_dual(self) -> list[np.ndarray]:
        return [np.zeros(s.dims) for s in self.out_shapes]


def grad2d(shape, direction: str = "horizontal") -> GradientOp:
    axes = {"horizontal": 1, "vertical": 0}
    if direction not in axes:
        raise ValueError(f"direction must be 'horizontal' or 'vertical', got {direction!r}")
    return GradientOp(shape, axes[direction])


def conv2d(kernel, shape) -> ConvolutionOp:
    return ConvolutionOp(kernel, shape)


def sparse_matrix_op(entries, in_shape, out_shape) -> MatrixOp:
    """Operator from ``(row, col, value)`` triplets; duplicates are summed."""
    in_shape, out_shape = Shape.of(in_shape), Shape.of(out_shape)
    entries = list(entries)
    if entries:
        rows, cols, vals = (np.asarray(c) for c in zip(*entries))
        rows, cols = rows.astype(int), cols.astype(int)
        if rows.min() < 0 or rows.max() >= out_shape.size or cols.min() < 0 or cols.max() >= in_shape.size:
            raise StructureError("triplet index out of range")
    else:
        rows = cols = np.zeros(0, dtype=int)
        vals = np.zeros(0)
    mat = sp.coo_matrix((vals.astype(float), (rows, cols)), shape=(out_shape.size, in_shape.size))
    return MatrixOp(mat, in_shape, out_shape)


@dataclass
class ToyRadon:
    """Pixel-driven parallel-beam projector with unit ray weights.

    For every angle, each pixel centre is projected onto the detector axis and
    its full value is added to the bin it falls into.  The detector for angle
    ``phi`` spans the projected extent of the image square, so at ``phi = 0``
    with ``n_bins`` equal to the number of columns the sinogram row is exactly
    the column sums.  Rows are ordered angle-major.
    """

    shape: tuple[int, int]
    angles: np.ndarray
    n_bins: int
    matrix: sp.csr_matrix = field(repr=False)

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    def operator(self) -> MatrixOp:
        return MatrixOp(self.matrix, self.shape, (self.n_angles, self.n_bins))

    def angle_subsets(self, n: int) -> list[np.ndarray]:
        """Equidistant interleaved partition: subset ``i`` holds angles ``i, i+n, ...``."""
        if n < 1 or self.n_angles % n:
            raise ValueError(f"{n} subsets do not divide {self.n_angles} angles")
        return [np.arange(i, self.n_angles, n) for i in range(n)]

    def blocks(self, n: int) -> list[MatrixOp]:
        ops = []
        for subset in self.angle_subsets(n):
            rows = (subset[:, None] * self.n_bins + np.arange(self.n_bins)).ravel()
            ops.append(MatrixOp(self.matrix[rows], self.shape, (len(subset), self.n_bins)))
        return ops


def toy_radon(shape, n_angles: int, n_bins: int) -> ToyRadon:
    shape = Shape.of(shape)
    if shape.ndim != 2:
        raise StructureError(f"toy_radon needs a 2-D shape, got {shape.dims}")
    if n_angles < 1 or n_bins < 1:
        raise ValueError("n_angles and n_bins must be >= 1")
    h, w = shape.dims
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx = (jj - (w - 1) / 2).ravel()
    cy = ((h - 1) / 2 - ii).ravel()
    pix = np.arange(h * w)
    angles = np.pi * np.arange(n_angles) / n_angles
    rows, cols = [], []
    for a, phi in enumerate(angles):
        c, s = np.cos(phi), np.sin(phi)
        half = 0.5 * (w * abs(c) + h * abs(s))
        t = cx * c + cy * s
        b = np.floor((t + half) * n_bins / (2 * half)).astype(int)
        rows.append(a * n_bins + np.clip(b, 0, n_bins - 1))
        cols.append(pix)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    mat = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n_angles * n_bins, h * w)).tocsr()
    mat.sum_duplicates()
    return ToyRadon((h, w), angles, n_bins, mat)


def _normal(op, x):
    return op.normal(x)


def op_norm(op, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value of ``op`` by power iteration on ``op* op``.

    Works for a :class:`LinearOp` or a :class:`BlockOperator`.  Emits a
    :class:`NormEstimateWarning` and returns the last estimate if the relative
    change has not dropped below ``tol`` after ``max_iter`` steps.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.in_shape.dims)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        z = _normal(op, x)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0
        new = np.sqrt(nz)
        x = z / nz
        if abs(new - est) <= tol * new:
            return float(new)
        est = new
    warnings.warn(f"op_norm did not reach tol={tol} in {max_iter} iterations", NormEstimateWarning)
    return float(est)


def _leaf_ops(op):
    if isinstance(op, BlockOperator):
        for r in op.rows:
            yield from _leaf_ops(r)
    else:
        yield op
        if isinstance(op, ScaledOp):
            yield from _leaf_ops(op.op)


@contextmanager
def uncounted(op):
    """Evaluations of ``op`` inside the block leave its call counters unchanged."""
    ops = list(_leaf_ops(op))
    saved = [dict(o.calls) for o in ops]
    try:
        yield op
    finally:
        for o, c in zip(ops, saved):
            o.calls = c


def safe_norm(estimate: float, tol: float = 1e-8) -> float:
    """Over-relax a norm estimate so that step-size conditions survive estimation error."""
    return estimate * (1 + 10 * tol)


def save_triplets(op: MatrixOp, path) -> None:
    coo = op.matrix.tocoo()
    header = (f"in_shape={','.join(map(str, op.in_shape.dims))} "
              f"out_shape={','.join(map(str, op.out_shape.dims))}")
    data = np.column_stack([coo.row, coo.col, coo.data])
    np.savetxt(path, data, fmt=["%d", "%d", "%.17g"], header=header)


def load_triplets(path, in_shape=None, out_shape=None) -> MatrixOp:
    path = Path(path)
    first = path.read_text().splitlines()[0] if path.stat().st_size else ""
    if first.startswith("#") and (in_shape is None or out_shape is None):
        fields = dict(tok.split("=") for tok in first[1:].split())
        in_shape = in_shape or tuple(int(v) for v in fields["in_shape"].split(","))
        out_shape = out_shape or tuple(int(v) for v in fields["out_shape"].split(","))
    data = np.loadtxt(path, ndmin=2)
    entries = [(int(r), int(c), v) for r, c, v in data] if data.size else []
    return sparse_matrix_op(entries, in_shape, out_shape)
