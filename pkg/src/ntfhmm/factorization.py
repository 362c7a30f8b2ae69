"""Joint non-negative factorization of the triple tensor and pair matrix.

The tensor is approximated by a CP model ``[[A, B, C]]`` and the matrix by
``B @ D @ B.T``, both sharing the emission factor ``B``. Factors are fitted
with multiplicative updates; the core loop works on a stack of independent
problems at once so that restarts and ensemble members can share one pass
of numpy calls.
"""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cooccurrence import JointStats
from .hmm import Hmm
from .tensor import cp_reconstruct

logger = logging.getLogger(__name__)

EPS = 1e-16
DEFAULT_MAX_ITERS = 5000
DEFAULT_TOL = 1e-8
WINDOW = 10


class DivergenceError(RuntimeError):
    """Multiplicative updates produced a non-finite factor."""

    def __init__(self, iteration):
        super().__init__(f"non-finite factor entries at iteration {iteration}")
        self.iteration = iteration


@dataclass
class FactorSet:
    """Factors of the joint decomposition.

    ``A`` (K x L) carries the state weights times P(previous symbol | state),
    ``B`` (K x L) the emission probabilities, ``C`` (K x L) P(next symbol |
    state) and ``D`` (L x L) the joint probability of consecutive hidden
    states.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    objective: float = float("nan")
    iterations: int = 0
    seed: object = None
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        for name in "ABCD":
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        k, rank = self.B.shape
        if self.A.shape != (k, rank) or self.C.shape != (k, rank):
            raise ValueError("A, B and C must share one shape")
        if self.D.shape != (rank, rank):
            raise ValueError(f"D must be {rank} x {rank}")

    @property
    def rank(self):
        return self.B.shape[1]

    def tensor(self):
        return cp_reconstruct(self.A, self.B, self.C)

    def matrix(self):
        return self.B @ self.D @ self.B.T

    def permute(self, order):
        """Return a copy with hidden states reordered by ``order``."""
        order = np.asarray(order)
        return FactorSet(
            A=self.A[:, order],
            B=self.B[:, order],
            C=self.C[:, order],
            D=self.D[np.ix_(order, order)],
            objective=self.objective,
            iterations=self.iterations,
            seed=self.seed,
        )

    def to_dict(self):
        return {
            "rank": self.rank,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            A=data["A"],
            B=data["B"],
            C=data["C"],
            D=data["D"],
            objective=float(data.get("objective", float("nan"))),
            iterations=int(data.get("iterations", 0)),
            seed=data.get("seed"),
        )


def objective(stats, factors):
    """Half squared Frobenius residual of the tensor plus that of the matrix."""
    r_t = stats.tensor - factors.tensor()
    r_m = stats.matrix - factors.matrix()
    return 0.5 * float(np.sum(r_t**2)) + 0.5 * float(np.sum(r_m**2))


def _batch_objective(T, M, A, B, C, D):
    rec = np.einsum("sir,sjr,skr->sijk", A, B, C)
    bdb = B @ D @ np.swapaxes(B, 1, 2)
    return 0.5 * np.sum((T - rec) ** 2, axis=(1, 2, 3)) + 0.5 * np.sum(
        (M - bdb) ** 2, axis=(1, 2)
    )


def _kr(X, Y):
    # batched Khatri-Rao product, row index i * K + j
    s, k, r = X.shape
    return (X[:, :, None, :] * Y[:, None, :, :]).reshape(s, k * Y.shape[1], r)


def _gram(X):
    return np.swapaxes(X, 1, 2) @ X


class _Problem:
    """Unfoldings and norms of a stack of (tensor, matrix) targets."""

    def __init__(self, T, M):
        s, k = T.shape[:2]
        self.T0 = T.reshape(s, k, k * k)
        self.T1 = np.ascontiguousarray(T.transpose(0, 2, 1, 3)).reshape(s, k, k * k)
        self.T2 = np.ascontiguousarray(T.transpose(0, 3, 1, 2)).reshape(s, k, k * k)
        self.M = M
        self.Mt = np.swapaxes(M, 1, 2)
        self.t_norm = np.sum(T**2, axis=(1, 2, 3))

    def subset(self, idx):
        out = _Problem.__new__(_Problem)
        for name in ("T0", "T1", "T2", "M", "Mt", "t_norm"):
            setattr(out, name, getattr(self, name)[idx])
        return out


def _tensor_term(p, X, mttkrp_x, GA, GB, GC):
    """Half tensor residual from a factor and its (X-independent) MTTKRP."""
    inner = np.sum(X * mttkrp_x, axis=(1, 2))
    rec = np.sum(GA * GB * GC, axis=(1, 2))
    return 0.5 * (p.t_norm - 2.0 * inner + rec)


def _matrix_term(p, B, D):
    r = p.M - B @ D @ np.swapaxes(B, 1, 2)
    return 0.5 * np.sum(r * r, axis=(1, 2))


def _sweep(p, A, B, C, D):
    """One pass of the four multiplicative updates.

    Returns the new factors and the objective after the pass. The B update
    is not guaranteed to descend because the matrix term is quartic in B;
    when it raises the objective the step is pulled back towards the current
    B until it no longer does.
    """
    GB, GC = _gram(B), _gram(C)
    m0 = p.T0 @ _kr(B, C)
    A = A * m0 / (A @ (GC * GB) + EPS)
    GA = _gram(A)
    J_a = _tensor_term(p, A, m0, GA, GB, GC) + _matrix_term(p, B, D)

    m1 = p.T1 @ _kr(A, C)
    Dt = np.swapaxes(D, 1, 2)
    BD, BDt = B @ D, B @ Dt
    num = m1 + p.M @ BDt + p.Mt @ BD
    den = B @ (GA * GC) + BDt @ (GB @ D) + BD @ (GB @ Dt) + EPS
    B_new = B * num / den
    GB_new = _gram(B_new)
    J_b = _tensor_term(p, B_new, m1, GA, GB_new, GC) + _matrix_term(p, B_new, D)
    bad = J_b > J_a
    step = 1.0
    while bad.any() and step > 1e-6:
        step *= 0.5
        trial = B + step * (B_new - B)
        G_trial = _gram(trial)
        J_trial = _tensor_term(p, trial, m1, GA, G_trial, GC) + _matrix_term(p, trial, D)
        take = bad[:, None, None]
        B_new = np.where(take, trial, B_new)
        GB_new = np.where(take, G_trial, GB_new)
        J_b = np.where(bad, J_trial, J_b)
        bad = bad & (J_trial > J_a)
    if bad.any():
        keep = bad[:, None, None]
        B_new = np.where(keep, B, B_new)
        GB_new = np.where(keep, GB, GB_new)
    B, GB = B_new, GB_new

    m2 = p.T2 @ _kr(A, B)
    C = C * m2 / (C @ (GB * GA) + EPS)
    GC = _gram(C)

    Bt = np.swapaxes(B, 1, 2)
    D = D * (Bt @ p.M @ B) / (GB @ D @ GB + EPS)
    J = _tensor_term(p, C, m2, GA, GB, GC) + _matrix_term(p, B, D)
    return A, B, C, D, J


def random_init(n_symbols, rank, rng, size=None):
    """Factors with i.i.d. U(0.1, 1) entries, optionally stacked ``size`` deep."""
    shape = () if size is None else (size,)
    k, r = n_symbols, rank
    A = rng.uniform(0.1, 1.0, shape + (k, r))
    B = rng.uniform(0.1, 1.0, shape + (k, r))
    C = rng.uniform(0.1, 1.0, shape + (k, r))
    D = rng.uniform(0.1, 1.0, shape + (r, r))
    return A, B, C, D


def fit_batch(T, M, A, B, C, D, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL,
              record_history=False):
    """Run multiplicative updates on a stack of independent problems.

    Parameters
    ----------
    T : ndarray, shape (S, K, K, K)
    M : ndarray, shape (S, K, K)
    A, B, C : ndarray, shape (S, K, L)
    D : ndarray, shape (S, L, L)
        Strictly positive initial factors.
    max_iters : int
    tol : float
        A problem stops once its objective fell by less than ``tol`` (relative)
        over the last ``WINDOW`` iterations.

    Returns
    -------
    A, B, C, D, objectives, iterations, history
        Raw (not post-processed) factors, final objective and iteration count
        per problem. ``history`` is a list of objective arrays, one per
        iteration, when ``record_history`` is set.
    """
    A, B, C, D = (np.array(x, dtype=float) for x in (A, B, C, D))
    T = np.asarray(T, dtype=float)
    M = np.asarray(M, dtype=float)
    n = A.shape[0]
    problem = _Problem(T, M)
    J = _batch_objective(T, M, A, B, C, D)
    window = [J]
    history = [J.copy()] if record_history else None
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    for it in range(1, max_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == n:
            a, b, c, d, j = _sweep(problem, A, B, C, D)
        else:
            a, b, c, d, j = _sweep(problem.subset(idx), A[idx], B[idx], C[idx], D[idx])
        if not np.isfinite(j).all():
            raise DivergenceError(it)
        if idx.size == n:
            A, B, C, D = a, b, c, d
        else:
            A[idx], B[idx], C[idx], D[idx] = a, b, c, d
        J = J.copy()
        J[idx] = j
        iters[idx] = it
        if record_history:
            history.append(J.copy())
        window.append(J)
        if len(window) > WINDOW + 1:
            window.pop(0)
            old = window[0]
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = (old - J) / old
            active &= ~((rel < tol) | (J <= 0.0))
        if not active.any():
            break
    return A, B, C, D, J, iters, history


def normalize_factors(A, B, C, D):
    """Scale factors onto the probability simplex.

    A absorbs the column sums of B and C and is then normalized to total
    mass one; D absorbs the column sums of B on both sides and is normalized
    likewise; B and C become column-stochastic. The tensor and matrix
    reconstructions change only by the global normalizing constants.
    """
    b_sum = B.sum(axis=-2, keepdims=True)
    c_sum = C.sum(axis=-2, keepdims=True)
    b_safe = np.where(b_sum > 0, b_sum, 1.0)
    c_safe = np.where(c_sum > 0, c_sum, 1.0)
    A = A * b_safe * c_safe
    A = A / A.sum(axis=(-2, -1), keepdims=True)
    D = np.swapaxes(b_safe, -1, -2) * D * b_safe
    D = D / D.sum(axis=(-2, -1), keepdims=True)
    B = B / b_safe
    C = C / c_safe
    return A, B, C, D


def multiplicative_updates(stats, rank, init=None, seed=None,
                           max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL,
                           record_history=False):
    """Fit one joint decomposition of ``stats`` at the given rank.

    ``init`` may be a :class:`FactorSet` with strictly positive entries; if it
    is omitted, factors are drawn from U(0.1, 1) with ``seed``. The returned
    factors are post-processed onto the probability simplex and carry the
    objective of that normalized solution.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    k = stats.n_observations
    if init is None:
        rng = np.random.default_rng(seed)
        A, B, C, D = random_init(k, rank, rng)
    else:
        if init.rank != rank or init.B.shape[0] != k:
            raise ValueError("initial factors do not match rank / alphabet size")
        A, B, C, D = init.A, init.B, init.C, init.D
        if min(x.min() for x in (A, B, C, D)) <= 0:
            raise ValueError("initial factors must be strictly positive")
    A, B, C, D, _, iters, hist = fit_batch(
        stats.tensor[None], stats.matrix[None], A[None], B[None], C[None], D[None],
        max_iters=max_iters, tol=tol, record_history=record_history,
    )
    A, B, C, D = normalize_factors(A[0], B[0], C[0], D[0])
    out = FactorSet(A=A, B=B, C=C, D=D, iterations=int(iters[0]), seed=seed)
    out.objective = objective(stats, out)
    if record_history:
        out.history = [float(h[0]) for h in hist]
    return out


def best_of_restarts(stats, rank, restarts, seed=0, max_iters=DEFAULT_MAX_ITERS,
                     tol=DEFAULT_TOL):
    """Fit ``restarts`` random initializations together; return the best."""
    seeds = [np.random.SeedSequence([seed, rank, r]) for r in range(restarts)]
    inits = [random_init(stats.n_observations, rank, np.random.default_rng(s))
             for s in seeds]
    A, B, C, D = (np.stack(x) for x in zip(*inits))
    T = np.broadcast_to(stats.tensor, (restarts,) + stats.tensor.shape)
    M = np.broadcast_to(stats.matrix, (restarts,) + stats.matrix.shape)
    A, B, C, D, _, iters, _ = fit_batch(T, M, A, B, C, D, max_iters=max_iters, tol=tol)
    A, B, C, D = normalize_factors(A, B, C, D)
    J = _batch_objective(T, M, A, B, C, D)
    best = int(np.argmin(J))
    return FactorSet(A=A[best], B=B[best], C=C[best], D=D[best],
                     objective=float(J[best]), iterations=int(iters[best]),
                     seed=[seed, rank, best])


def factors_to_hmm(factors, dt):
    """HMM read off post-processed factors.

    Emission is ``B.T``, transitions are the row-normalized ``D`` and the
    initial distribution is the state occupancy given by the column sums
    of ``A``.
    """
    D = factors.D
    rows = D.sum(axis=1, keepdims=True)
    zero = rows[:, 0] <= 0
    if zero.any():
        warnings.warn(
            f"hidden states {np.flatnonzero(zero).tolist()} have no outgoing mass; "
            "using uniform transition rows",
            RuntimeWarning,
            stacklevel=2,
        )
    rank = D.shape[0]
    T = np.where(zero[:, None], 1.0 / rank, D / np.where(rows > 0, rows, 1.0))
    pi = factors.A.sum(axis=0)
    pi = pi / pi.sum()
    E = factors.B.T
    E = E / E.sum(axis=1, keepdims=True)
    return Hmm(pi=pi, T=T, E=E, dt=dt)
