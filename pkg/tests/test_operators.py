import warnings

import numpy as np
import pytest
import scipy.signal
from hypothesis import given
from hypothesis import strategies as st

from spdhg.blockspace import StructureError
from spdhg.operators import (BlockOperator, MatrixOp, NormEstimateWarning, conv2d, grad2d, load_triplets,
                             op_norm, safe_norm, save_triplets, sparse_matrix_op, toy_radon, uncounted)


def dense(op):
    """Matrix of ``op`` column by column on the flattened domain."""
    n = op.in_shape.size
    cols = [op.apply(np.eye(n)[j].reshape(op.in_shape.dims)).ravel() for j in range(n)]
    return np.column_stack(cols)


def adjoint_gap(op, rng, probes=100):
    worst = 0.0
    for _ in range(probes):
        x = rng.standard_normal(op.in_shape.dims)
        y = rng.standard_normal(op.out_shape.dims)
        lhs = np.vdot(op.apply(x), y)
        rhs = np.vdot(x, op.adjoint(y))
        worst = max(worst, abs(lhs - rhs) / (1 + np.linalg.norm(x) * np.linalg.norm(y)))
    return worst


def diff_matrix(m):
    d = np.zeros((m, m))
    for i in range(m - 1):
        d[i, i], d[i, i + 1] = -1.0, 1.0
    return d


SHIPPED = [
    lambda: grad2d((7, 5), "horizontal"),
    lambda: grad2d((7, 5), "vertical"),
    lambda: conv2d(np.arange(1.0, 10.0).reshape(3, 3), (8, 6)),
    lambda: conv2d(np.ones((2, 4)), (6, 7)),
    lambda: toy_radon((9, 9), 6, 9).operator(),
    lambda: sparse_matrix_op([(0, 1, 2.0), (2, 3, -1.5), (1, 0, 0.25)], (4,), (3,)),
]


@pytest.mark.parametrize("make", SHIPPED)
def test_adjoint_consistency(make, rng):
    assert adjoint_gap(make(), rng) <= 1e-10


def test_grad2d_examples():
    op = grad2d((4, 6), "horizontal")
    assert not np.any(op.apply(np.full((4, 6), 3.2)))
    out = grad2d((1, 2), "horizontal").apply(np.array([[2.0, 7.0]]))
    assert np.array_equal(out, [[5.0, 0.0]])
    with pytest.raises(StructureError):
        grad2d((5,), "horizontal")


def test_grad2d_matches_kronecker_oracle():
    h, w = 4, 5
    # row-major flattening: horizontal acts within rows, vertical across them
    horiz = np.kron(np.eye(h), diff_matrix(w))
    vert = np.kron(diff_matrix(h), np.eye(w))
    assert np.array_equal(dense(grad2d((h, w), "horizontal")), horiz)
    assert np.array_equal(dense(grad2d((h, w), "vertical")), vert)
    rng = np.random.default_rng(0)
    y = rng.standard_normal((h, w))
    assert np.allclose(grad2d((h, w), "vertical").adjoint(y).ravel(), vert.T @ y.ravel(), atol=1e-14)


@pytest.mark.parametrize("m", [4, 8, 16, 24])
def test_gradient_norm_against_laplacian_spectrum(m):
    # eigenvalues of D^T D (Neumann) are 2 - 2 cos(pi k / m); the 2-D stack adds two of them
    lam = 2 - 2 * np.cos(np.pi * (m - 1) / m)
    exact = np.sqrt(2 * lam)
    A = BlockOperator([grad2d((m, m), "horizontal"), grad2d((m, m), "vertical")])
    est = op_norm(A, tol=1e-12, max_iter=200_000)
    assert est == pytest.approx(exact, rel=1e-5)
    assert est <= np.sqrt(8)
    if m >= 16:
        assert est > 2.8


def test_conv2d_examples(rng):
    x = rng.standard_normal((6, 5))
    assert np.array_equal(conv2d([[1.0]], (6, 5)).apply(x), x)
    k = rng.random((3, 3))
    assert np.all(conv2d(k, (6, 5)).apply(np.abs(x)) >= 0)
    with pytest.raises(StructureError):
        conv2d(np.ones((7, 2)), (6, 5))


def test_conv2d_matches_scipy_correlation(rng):
    k = rng.standard_normal((3, 5))
    x = rng.standard_normal((8, 8))
    ref = scipy.signal.correlate2d(x, k, mode="same", boundary="fill")
    assert np.allclose(conv2d(k, (8, 8)).apply(x), ref, atol=1e-12)


def test_conv2d_adjoint_is_dense_transpose(rng):
    op = conv2d(rng.standard_normal((3, 3)), (8, 8))
    M = dense(op)
    y = rng.standard_normal((8, 8))
    assert np.allclose(op.adjoint(y).ravel(), M.T @ y.ravel(), atol=1e-12)


def test_toy_radon_column_sums(rng):
    x = rng.random((6, 7))
    op = toy_radon((6, 7), 1, 7).operator()
    assert np.allclose(op.apply(x)[0], x.sum(axis=0), atol=1e-12)
    assert not np.any(op.apply(np.zeros((6, 7))))


@pytest.mark.parametrize("size,angles", [(8, 4), (16, 20), (32, 20), (17, 7)])
def test_toy_radon_entries(size, angles):
    R = toy_radon((size, size), angles, size)
    mat = R.matrix
    assert mat.data.min() > 0
    assert np.all(np.diff(mat.indptr) >= 1), "some detector bin receives no pixel"
    # each pixel lands in exactly one bin per angle
    assert np.allclose(np.asarray(mat.sum(axis=0)).ravel(), angles)


def test_toy_radon_partition():
    R = toy_radon((32, 32), 20, 32)
    blocks = R.blocks(4)
    assert [b.out_shape.dims for b in blocks] == [(5, 32)] * 4
    subsets = R.angle_subsets(4)
    assert sorted(np.concatenate(subsets).tolist()) == list(range(20))
    x = np.random.default_rng(1).random((32, 32))
    full = R.operator().apply(x)
    for s, b in zip(subsets, blocks):
        assert np.allclose(b.apply(x), full[s])
    with pytest.raises(ValueError):
        R.blocks(3)


def test_op_norm_examples():
    assert op_norm(MatrixOp(np.eye(6)), tol=1e-10) == pytest.approx(1.0, abs=1e-8)
    assert op_norm(MatrixOp(np.diag([1.0, 3.0])), tol=1e-12) == pytest.approx(3.0, abs=1e-8)
    A = MatrixOp(np.random.default_rng(3).standard_normal((5, 4)))
    assert op_norm(A, seed=4) == op_norm(A, seed=4)


def test_op_norm_warns_when_not_converged():
    A = MatrixOp(np.diag([1.0, 0.999999, 0.5]))
    with pytest.warns(NormEstimateWarning):
        op_norm(A, tol=1e-15, max_iter=3)


@given(st.integers(0, 2**31 - 1))
def test_op_norm_is_near_maximal(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((4, 3))
    est = op_norm(MatrixOp(M), tol=1e-10)
    assert est == pytest.approx(np.linalg.norm(M, 2), rel=1e-6)
    x = rng.standard_normal(3)
    assert est >= np.linalg.norm(M @ x) / np.linalg.norm(x) - 1e-8


def test_safe_norm_overrelaxes():
    assert safe_norm(2.0, 1e-8) == pytest.approx(2.0 * (1 + 1e-7))


def test_sparse_matrix_op_examples():
    zero = sparse_matrix_op([], (3,), (2,))
    assert not np.any(zero.apply(np.ones(3)))
    op = sparse_matrix_op([(0, 0, 2.0)], (1,), (1,))
    assert op.apply(np.array([1.5]))[0] == 3.0
    with pytest.raises(StructureError):
        sparse_matrix_op([(2, 0, 1.0)], (1,), (2,))


def test_triplet_roundtrip(tmp_path, rng):
    op = toy_radon((6, 6), 3, 6).operator()
    path = tmp_path / "radon.txt"
    save_triplets(op, path)
    back = load_triplets(path)
    assert back.in_shape == op.in_shape and back.out_shape == op.out_shape
    x = rng.random((6, 6))
    assert np.array_equal(back.apply(x), op.apply(x))


def test_block_operator_consistency(rng):
    rows = [MatrixOp(rng.standard_normal((2, 5))) for _ in range(3)]
    A = BlockOperator(rows)
    x = rng.standard_normal(5)
    for i, ax in enumerate(A.apply(x)):
        assert np.array_equal(ax, rows[i].apply(x))
    y = [rng.standard_normal(2) for _ in range(3)]
    assert np.allclose(A.adjoint(y), sum(r.adjoint(b) for r, b in zip(rows, y)))
    with pytest.raises(StructureError):
        BlockOperator([MatrixOp(np.eye(2)), MatrixOp(np.eye(3))])


def test_counters_and_uncounted(rng):
    A = BlockOperator([MatrixOp(np.eye(3)), MatrixOp(np.eye(3))])
    A.apply(np.ones(3))
    assert A.evaluations == 2
    with uncounted(A):
        A.adjoint([np.ones(3), np.ones(3)])
        op_norm(A)
    assert A.evaluations == 2
    A.reset_counters()
    assert A.evaluations == 0
