"""Empirical joint statistics of consecutive observation symbols."""
from dataclasses import dataclass

import numpy as np


class EmptyStatisticsError(ValueError):
    """Raised when no sequence is long enough to contribute a triple."""


@dataclass(frozen=True)
class JointStats:
    """Joint probabilities of consecutive triples and pairs of symbols.

    Attributes
    ----------
    tensor : ndarray, shape (K, K, K)
        ``tensor[i, j, k] = P(Y[t-1] = i, Y[t] = j, Y[t+1] = k)``.
    matrix : ndarray, shape (K, K)
        ``matrix[i, j] = P(Y[t] = i, Y[t+1] = j)``.
    triple_count, pair_count : int
        Number of triples and pairs that were counted.
    """

    tensor: np.ndarray
    matrix: np.ndarray
    triple_count: int = 0
    pair_count: int = 0

    def __post_init__(self):
        tensor = np.asarray(self.tensor, dtype=float)
        matrix = np.asarray(self.matrix, dtype=float)
        k = matrix.shape[0]
        if tensor.shape != (k, k, k) or matrix.shape != (k, k):
            raise ValueError(
                f"inconsistent shapes: tensor {tensor.shape}, matrix {matrix.shape}"
            )
        if (tensor < 0).any() or (matrix < 0).any():
            raise ValueError("joint statistics must be non-negative")
        object.__setattr__(self, "tensor", tensor)
        object.__setattr__(self, "matrix", matrix)

    @property
    def n_observations(self):
        return self.matrix.shape[0]

    @property
    def norm_sq(self):
        """``||tensor||_F^2 + ||matrix||_F^2``."""
        return float(np.sum(self.tensor**2) + np.sum(self.matrix**2))

    def to_dict(self):
        return {
            "k": self.n_observations,
            "tensor": self.tensor.ravel().tolist(),
            "matrix": self.matrix.tolist(),
            "triple_count": int(self.triple_count),
            "pair_count": int(self.pair_count),
        }

    @classmethod
    def from_dict(cls, data):
        k = int(data["k"])
        tensor = np.asarray(data["tensor"], dtype=float).reshape(k, k, k)
        return cls(
            tensor=tensor,
            matrix=np.asarray(data["matrix"], dtype=float),
            triple_count=int(data.get("triple_count", 0)),
            pair_count=int(data.get("pair_count", 0)),
        )


def count_sequence(seq, n_symbols):
    """Raw triple and pair counts of one sequence (no normalization)."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim != 1:
        raise ValueError("observation sequences must be one-dimensional")
    if seq.size and (seq.min() < 0 or seq.max() >= n_symbols):
        raise ValueError(f"observation ids must lie in [0, {n_symbols})")
    k = n_symbols
    triples = np.zeros(k**3, dtype=np.int64)
    pairs = np.zeros(k**2, dtype=np.int64)
    if seq.size >= 2:
        pairs += np.bincount(seq[:-1] * k + seq[1:], minlength=k**2)
    if seq.size >= 3:
        flat = (seq[:-2] * k + seq[1:-1]) * k + seq[2:]
        triples += np.bincount(flat, minlength=k**3)
    return triples.reshape(k, k, k), pairs.reshape(k, k)


def accumulate(sequences, n_symbols):
    """Build normalized :class:`JointStats` from observation sequences.

    Triples and pairs are counted inside each sequence only; nothing is
    counted across the boundary between two sequences.
    """
    k = int(n_symbols)
    if k < 1:
        raise ValueError("n_symbols must be positive")
    if isinstance(sequences, np.ndarray) and sequences.ndim == 1:
        sequences = [sequences]
    triples = np.zeros((k, k, k), dtype=np.int64)
    pairs = np.zeros((k, k), dtype=np.int64)
    for seq in sequences:
        t, p = count_sequence(seq, k)
        triples += t
        pairs += p
    n_triples = int(triples.sum())
    n_pairs = int(pairs.sum())
    if n_triples == 0:
        raise EmptyStatisticsError("no sequence of length >= 3 to count")
    return JointStats(
        tensor=triples / n_triples,
        matrix=pairs / n_pairs,
        triple_count=n_triples,
        pair_count=n_pairs,
    )
