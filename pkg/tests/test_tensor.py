import numpy as np
import pytest

from ntfhmm.tensor import cp_reconstruct, khatri_rao, mttkrp, unfold


def _loop_reconstruct(A, B, C):
    I, J, K = A.shape[0], B.shape[0], C.shape[0]
    X = np.zeros((I, J, K))
    for i in range(I):
        for j in range(J):
            for k in range(K):
                X[i, j, k] = sum(A[i, r] * B[j, r] * C[k, r] for r in range(A.shape[1]))
    return X


@pytest.fixture
def factors():
    rng = np.random.default_rng(0)
    return rng.random((3, 2)), rng.random((4, 2)), rng.random((5, 2))


def test_reconstruct_matches_loops(factors):
    A, B, C = factors
    np.testing.assert_allclose(cp_reconstruct(A, B, C), _loop_reconstruct(A, B, C), atol=1e-14)


def test_khatri_rao_rows():
    L = np.array([[1.0, 2.0], [3.0, 4.0]])
    R = np.array([[5.0, 6.0], [7.0, 8.0], [9.0, 10.0]])
    kr = khatri_rao(L, R)
    assert kr.shape == (6, 2)
    for i in range(2):
        for j in range(3):
            np.testing.assert_array_equal(kr[i * 3 + j], L[i] * R[j])


def test_khatri_rao_column_mismatch():
    with pytest.raises(ValueError):
        khatri_rao(np.ones((2, 2)), np.ones((2, 3)))


def test_unfoldings_of_cp_tensor(factors):
    A, B, C = factors
    X = cp_reconstruct(A, B, C)
    np.testing.assert_allclose(unfold(X, 0), A @ khatri_rao(C, B).T, atol=1e-14)
    np.testing.assert_allclose(unfold(X, 1), B @ khatri_rao(C, A).T, atol=1e-14)
    np.testing.assert_allclose(unfold(X, 2), C @ khatri_rao(B, A).T, atol=1e-14)


def test_unfold_element_positions():
    X = np.arange(24.0).reshape(2, 3, 4)
    U = unfold(X, 0)
    # column index j + J * k for mode 0
    assert U[1, 2 + 3 * 3] == X[1, 2, 3]
    U = unfold(X, 2)
    assert U[3, 1 + 2 * 2] == X[1, 2, 3]


def test_mttkrp_matches_unfold(factors):
    A, B, C = factors
    rng = np.random.default_rng(1)
    X = rng.random((3, 4, 5))
    np.testing.assert_allclose(mttkrp(X, A, B, C, 0), unfold(X, 0) @ khatri_rao(C, B))
    np.testing.assert_allclose(mttkrp(X, A, B, C, 1), unfold(X, 1) @ khatri_rao(C, A))
    np.testing.assert_allclose(mttkrp(X, A, B, C, 2), unfold(X, 2) @ khatri_rao(B, A))
    with pytest.raises(ValueError):
        mttkrp(X, A, B, C, 3)
