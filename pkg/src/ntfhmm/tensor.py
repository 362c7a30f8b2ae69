"""Small dense tensor helpers: unfoldings, Khatri-Rao products, CP reconstruction.

Unfoldings follow the column ordering where the CP tensor ``[[A, B, C]]``
satisfies ``unfold(X, 0) == A @ khatri_rao(C, B).T``.
"""
import numpy as np


def unfold(tensor, mode):
    """Mode-`mode` matricization of a third-order tensor.

    Parameters
    ----------
    tensor : ndarray, shape (I, J, K)
    mode : int
        0, 1 or 2.

    Returns
    -------
    ndarray of shape ``(tensor.shape[mode], -1)``. The remaining indices are
    laid out with the lower-numbered mode varying fastest.
    """
    return np.reshape(np.moveaxis(tensor, mode, 0), (tensor.shape[mode], -1), order="F")


def khatri_rao(left, right):
    """Column-wise Kronecker product.

    Row ``i * right.shape[0] + j`` of the result is ``left[i] * right[j]``.
    """
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape[1] != right.shape[1]:
        raise ValueError("khatri_rao operands need the same number of columns")
    n_cols = left.shape[1]
    return np.einsum("ir,jr->ijr", left, right).reshape(-1, n_cols)


def cp_reconstruct(A, B, C):
    """Full tensor ``X[i, j, k] = sum_r A[i, r] B[j, r] C[k, r]``."""
    return np.einsum("ir,jr,kr->ijk", A, B, C)


def mttkrp(tensor, A, B, C, mode):
    """Matricized tensor times Khatri-Rao product for the given mode.

    Equivalent to ``unfold(tensor, 0) @ khatri_rao(C, B)`` for mode 0,
    ``unfold(tensor, 1) @ khatri_rao(C, A)`` for mode 1 and
    ``unfold(tensor, 2) @ khatri_rao(B, A)`` for mode 2. Leading batch axes
    on all arguments are supported.
    """
    if mode == 0:
        return np.einsum("...ijk,...jr,...kr->...ir", tensor, B, C)
    if mode == 1:
        return np.einsum("...ijk,...ir,...kr->...jr", tensor, A, C)
    if mode == 2:
        return np.einsum("...ijk,...ir,...jr->...kr", tensor, A, B)
    raise ValueError(f"mode must be 0, 1 or 2, got {mode}")
