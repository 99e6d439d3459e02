import numpy as np
import pytest

from smoothrot import Rng, ShapeError, matmul, rel_inf_error
from smoothrot.numerics import as_tensor


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def naive_matmul(a, b):
    """Triple-loop reference with a float64 accumulator, rounded once."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out.astype(np.float32)


def test_identity_exact():
    a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    assert np.array_equal(matmul(np.eye(2, dtype=np.float32), a), a)
    assert np.array_equal(matmul(a, np.eye(2, dtype=np.float32)), a)


def test_orthogonal_basis_vectors():
    a = np.array([[1.0, 0.0]], dtype=np.float32)
    b = np.array([[0.0], [1.0]], dtype=np.float32)
    assert np.array_equal(matmul(a, b), np.array([[0.0]], dtype=np.float32))


def test_matches_naive_triple_loop():
    rng = Rng(7)
    a = rng.normal((8, 8))
    b = rng.normal((8, 8))
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_identity_associativity_random():
    rng = Rng(8)
    a = rng.normal((5, 9))
    assert np.array_equal(matmul(a, np.eye(9, dtype=np.float32)), a)


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(np.zeros((2, 3), dtype=np.float32), np.zeros((4, 2), dtype=np.float32))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_rejects_non_2d():
    with pytest.raises(ShapeError):
        matmul(np.zeros(3, dtype=np.float32), np.zeros((3, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# tensor validation
# ---------------------------------------------------------------------------


def test_as_tensor_shape_and_dtype():
    t = as_tensor([1, 2, 3, 4], shape=(2, 2))
    assert t.dtype == np.float32 and t.shape == (2, 2)


def test_as_tensor_length_mismatch():
    with pytest.raises(ShapeError):
        as_tensor([1, 2, 3], shape=(2, 2))


def test_as_tensor_rejects_nan():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])


# ---------------------------------------------------------------------------
# Rng
# ---------------------------------------------------------------------------


def test_same_seed_same_stream():
    # two independently constructed generators, identical draws
    a = Rng(42)
    b = Rng(42)
    assert np.array_equal(a.normal((16,)), b.normal((16,)))
    assert np.array_equal(a.integers(0, 100, (8,)), b.integers(0, 100, (8,)))
    assert np.array_equal(a.signs(32), b.signs(32))


def test_different_seed_different_stream():
    assert not np.array_equal(Rng(1).normal((16,)), Rng(2).normal((16,)))


def test_derive_is_deterministic_and_independent():
    a = Rng(42).derive("calib")
    b = Rng(42).derive("calib")
    c = Rng(42).derive("eval")
    x = a.normal((8,))
    assert np.array_equal(x, b.normal((8,)))
    assert not np.array_equal(x, c.normal((8,)))


def test_signs_are_plus_minus_one():
    s = Rng(3).signs(64)
    assert set(np.unique(s)) <= {-1.0, 1.0}


# ---------------------------------------------------------------------------
# rel_inf_error
# ---------------------------------------------------------------------------


def test_rel_inf_error_basics():
    ref = np.array([2.0, -4.0], dtype=np.float32)
    val = np.array([2.0, -4.4], dtype=np.float32)
    assert rel_inf_error(val, ref) == pytest.approx(0.1)
    assert rel_inf_error(ref, ref) == 0.0
