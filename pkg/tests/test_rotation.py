import numpy as np
import pytest

from smoothrot import (
    OrthogonalTransform,
    Rng,
    apply_equivalent_transform,
    hadamard_matrix,
    matmul,
    random_hadamard,
    save_archive,
    walsh_hadamard,
)
from smoothrot.rotation import load_transform

POW2 = [2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]


# ---------------------------------------------------------------------------
# fast Walsh-Hadamard transform
# ---------------------------------------------------------------------------


def test_first_hadamard_column():
    out = walsh_hadamard(np.array([1.0, 0.0], dtype=np.float32))
    assert np.allclose(out, [1 / np.sqrt(2), 1 / np.sqrt(2)])


def test_spike_spreads_uniformly():
    x = np.zeros(16, dtype=np.float32)
    x[5] = 1600.0
    out = walsh_hadamard(x)
    assert np.allclose(np.abs(out), 400.0, rtol=1e-6)  # 1600 / sqrt(16)


def test_matches_dense_matmul():
    rng = Rng(3)
    x = rng.normal((5, 64))
    dense = matmul(x, hadamard_matrix(64))
    assert np.max(np.abs(walsh_hadamard(x) - dense)) <= 1e-6 * np.max(np.abs(dense))


def test_non_power_of_two_errors():
    with pytest.raises(ValueError) as err:
        walsh_hadamard(np.zeros(12, dtype=np.float32))
    assert "explicit" in str(err.value)


def test_involution():
    x = Rng(0).normal((3, 32))
    assert np.allclose(walsh_hadamard(walsh_hadamard(x)), x, atol=1e-6)


def test_norm_preservation():
    x = Rng(1).normal((4, 128))
    out = walsh_hadamard(x)
    assert np.allclose(
        np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1), rtol=1e-5
    )


# ---------------------------------------------------------------------------
# transform kinds
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("n", POW2)
def test_orthogonality_exact_hadamard(n):
    q = hadamard_matrix(n).astype(np.float64)
    assert np.max(np.abs(q.T @ q - np.eye(n))) <= 1e-6


@pytest.mark.parametrize("n", POW2)
def test_orthogonality_random_hadamard(n):
    t = random_hadamard(n, Rng(n))
    q = t.matrix.astype(np.float64)
    assert np.max(np.abs(q.T @ q - np.eye(n))) <= 1e-6


def test_random_hadamard_deterministic_in_seed():
    a = random_hadamard(64, Rng(11))
    b = random_hadamard(64, Rng(11))
    assert np.array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, random_hadamard(64, Rng(12)).matrix)


def test_random_hadamard_sign_free_case():
    # all-positive signs reduce to the plain normalized Hadamard
    class OnesRng(Rng):
        def signs(self, n):
            return np.ones(n, dtype=np.float32)

    t = OrthogonalTransform.random_hadamard(2, OnesRng(0))
    assert np.allclose(t.matrix, hadamard_matrix(2))


def test_fast_apply_matches_matrix_and_inverts():
    rng = Rng(5)
    t = random_hadamard(32, rng)
    x = rng.normal((6, 32))
    assert np.allclose(t.apply(x), matmul(x, t.matrix), atol=1e-6)
    assert np.allclose(t.apply_inverse(t.apply(x)), x, atol=1e-5)


def test_explicit_requires_orthogonal():
    with pytest.raises(ValueError):
        OrthogonalTransform.explicit(np.array([[1.0, 0.0], [1.0, 1.0]], dtype=np.float32))
    t = OrthogonalTransform.explicit(np.eye(3, dtype=np.float32))
    assert t.kind == "explicit" and t.n == 3


def test_explicit_loaded_from_archive(tmp_path):
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((24, 24)))
    path = tmp_path / "q.tarc"
    save_archive({"Q": q.astype(np.float32)}, path)
    t = load_transform(path)
    assert t.kind == "explicit" and t.n == 24
    g = t.matrix.astype(np.float64)
    assert np.max(np.abs(g.T @ g - np.eye(24))) <= 1e-6


# ---------------------------------------------------------------------------
# equivalent linear transformation
# ---------------------------------------------------------------------------


def test_identity_transform_is_noop():
    x = Rng(0).normal((3, 4))
    w = Rng(1).normal((4, 2))
    x_hat, w_hat = apply_equivalent_transform(x, w, np.eye(4, dtype=np.float32))
    assert np.allclose(x_hat, x) and np.allclose(w_hat, w)


def test_diagonal_scaling_hand_case():
    x = np.array([[4.0, 3.0]], dtype=np.float32)
    w = np.array([[1.0], [1.0]], dtype=np.float32)
    x_hat, w_hat = apply_equivalent_transform(x, w, np.array([2.0, 1.0], dtype=np.float32))
    assert np.array_equal(x_hat, [[2.0, 3.0]])
    assert np.array_equal(w_hat, [[2.0], [1.0]])
    assert matmul(x_hat, w_hat)[0, 0] == pytest.approx(7.0)


def test_hadamard_preserves_output():
    rng = Rng(9)
    x = rng.normal((8, 16))
    w = rng.normal((16, 4))
    t = random_hadamard(16, rng)
    x_hat, w_hat = apply_equivalent_transform(x, w, t)
    y = matmul(x, w)
    y_hat = matmul(x_hat, w_hat)
    assert np.max(np.abs(y_hat - y)) <= 1e-5 * np.max(np.abs(y))


def test_explicit_general_matrix_preserves_output():
    rng = np.random.default_rng(4)
    a = (np.eye(8) + 0.2 * rng.standard_normal((8, 8))).astype(np.float32)
    x = Rng(2).normal((5, 8))
    w = Rng(3).normal((8, 3))
    x_hat, w_hat = apply_equivalent_transform(x, w, a)
    assert np.allclose(matmul(x_hat, w_hat), matmul(x, w), atol=1e-4)


def test_singular_matrix_rejected():
    x = Rng(0).normal((2, 3))
    w = Rng(1).normal((3, 2))
    singular = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ValueError) as err:
        apply_equivalent_transform(x, w, singular)
    assert "conditioned" in str(err.value) or "singular" in str(err.value)


def test_nonpositive_scaling_rejected():
    x = Rng(0).normal((2, 3))
    w = Rng(1).normal((3, 2))
    with pytest.raises(ValueError):
        apply_equivalent_transform(x, w, np.array([1.0, -1.0, 2.0], dtype=np.float32))
