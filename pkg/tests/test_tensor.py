"""Tests for the dense matrix helpers and the seeded RNG."""

import numpy as np
import pytest

from icis.errors import IcisError, ShapeMismatchError, ZeroNormError
from icis.tensor import (
    RngState,
    as_matrix,
    as_vector,
    check_finite,
    matmul,
    rand_normal,
    row_normalize,
    row_norms,
    transpose,
)


def test_as_matrix_coerces_lists():
    m = as_matrix([[1, 2], [3, 4]])
    assert m.dtype == np.float64
    assert m.flags["C_CONTIGUOUS"]
    assert m.shape == (2, 2)


def test_as_matrix_rejects_wrong_rank():
    with pytest.raises(ShapeMismatchError):
        as_matrix([1.0, 2.0, 3.0])
    with pytest.raises(ShapeMismatchError):
        as_matrix(np.zeros((2, 2, 2)))


def test_as_vector_rejects_matrix():
    with pytest.raises(ShapeMismatchError):
        as_vector([[1.0, 2.0]])


def test_check_finite_raises_on_nan_and_inf():
    check_finite(np.ones((2, 2)))
    with pytest.raises(IcisError):
        check_finite(np.array([[1.0, np.nan]]))
    with pytest.raises(IcisError):
        check_finite(np.array([[np.inf, 0.0]]))


def test_matmul_small_known_product():
    out = matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    assert out.tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                expected[i, j] += a[i, k] * b[k, j]
    assert np.allclose(matmul(a, b), expected, atol=1e-12)


def test_matmul_rejects_inner_dim_mismatch():
    with pytest.raises(ShapeMismatchError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_transpose_round_trip():
    m = np.arange(6, dtype=np.float64).reshape(2, 3)
    t = transpose(m)
    assert t.shape == (3, 2)
    assert t.flags["C_CONTIGUOUS"]
    assert np.array_equal(transpose(t), m)


def test_row_norms_values():
    m = np.array([[3.0, 4.0], [0.0, 2.0]])
    assert np.allclose(row_norms(m), [5.0, 2.0])


def test_row_normalize_unit_rows():
    m = np.array([[3.0, 4.0], [0.0, -2.0]])
    out = row_normalize(m)
    assert np.allclose(row_norms(out), [1.0, 1.0], atol=1e-12)
    assert np.allclose(out[0], [0.6, 0.8])


def test_row_normalize_zero_row_is_an_error():
    with pytest.raises(ZeroNormError):
        row_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_rng_equal_seeds_equal_draws():
    a = RngState(123).normal(4, 5)
    b = RngState(123).normal(4, 5)
    assert np.array_equal(a, b)


def test_rng_different_seeds_differ():
    a = RngState(1).normal(4, 5)
    b = RngState(2).normal(4, 5)
    assert not np.array_equal(a, b)


def test_rng_spawn_streams_are_independent_and_stable():
    root = RngState(9)
    a1 = root.spawn("alpha").normal(3, 3)
    b1 = root.spawn("beta").normal(3, 3)
    a2 = RngState(9).spawn("alpha").normal(3, 3)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b1)


def test_rand_normal_zero_std_gives_exact_zeros():
    out = rand_normal(RngState(0), 3, 4, 0.0)
    assert out.shape == (3, 4)
    assert np.all(out == 0.0)


def test_rand_normal_zero_std_still_advances_the_stream():
    # after a zero-std draw the next draw must match the draw that follows
    # the same-shaped nonzero-std call
    r1 = RngState(7)
    rand_normal(r1, 3, 4, 0.0)
    after_zero = rand_normal(r1, 2, 2, 1.0)

    r2 = RngState(7)
    rand_normal(r2, 3, 4, 1.0)
    after_nonzero = rand_normal(r2, 2, 2, 1.0)
    assert np.array_equal(after_zero, after_nonzero)


def test_rand_normal_scales_by_std():
    r1 = RngState(11)
    r2 = RngState(11)
    base = rand_normal(r1, 6, 6, 1.0)
    scaled = rand_normal(r2, 6, 6, 2.5)
    assert np.allclose(scaled, base * 2.5, atol=1e-12)


def test_rand_normal_large_sample_moments():
    out = rand_normal(RngState(42), 400, 250, 0.5)
    assert abs(out.mean()) < 0.01
    assert abs(out.std() - 0.5) < 0.01


def test_rand_normal_negative_std_is_an_error():
    with pytest.raises(IcisError):
        rand_normal(RngState(0), 2, 2, -1.0)


def test_permutation_and_choice_are_seeded():
    p1 = RngState(5).permutation(10)
    p2 = RngState(5).permutation(10)
    assert np.array_equal(p1, p2)
    assert sorted(p1.tolist()) == list(range(10))
    c = RngState(5).choice(20, size=8, replace=False)
    assert len(set(c.tolist())) == 8
