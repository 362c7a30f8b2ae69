"""Discrete hidden Markov models and reference-model construction.

Includes the CTMC rate matrix derived from a process model, the
transition matrix over a fixed observation gap, sampling, Viterbi decoding
and the scaled forward log-likelihood.
"""
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import process_model as pm

STOCHASTIC_TOL = 1e-9


class DecodingError(ValueError):
    """An observation cannot be emitted by any state at some step."""

    def __init__(self, step):
        super().__init__(f"observation at step {step} has zero probability under every state")
        self.step = step


class StructureError(ValueError):
    """Transitions between super-activities cannot be derived from the model."""


def _check_stochastic(name, x, axis=-1):
    if (x < 0).any():
        raise ValueError(f"{name} has negative entries")
    dev = np.abs(x.sum(axis=axis) - 1.0).max()
    if dev > STOCHASTIC_TOL:
        raise ValueError(f"{name} is not stochastic (max deviation {dev:.3g})")


@dataclass(frozen=True)
class Hmm:
    """Initial distribution ``pi``, transitions ``T`` over gap ``dt``, emissions ``E``."""

    pi: np.ndarray
    T: np.ndarray
    E: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        pi = np.array(self.pi, dtype=float)
        T = np.array(self.T, dtype=float)
        E = np.array(self.E, dtype=float)
        n = pi.shape[0]
        if T.shape != (n, n) or E.ndim != 2 or E.shape[0] != n:
            raise ValueError(f"shape mismatch: pi {pi.shape}, T {T.shape}, E {E.shape}")
        _check_stochastic("pi", pi)
        _check_stochastic("T", T)
        _check_stochastic("E", E)
        for name, x in (("pi", pi), ("T", T), ("E", E)):
            x.setflags(write=False)
            object.__setattr__(self, name, x)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_states(self):
        return self.T.shape[0]

    @property
    def n_observations(self):
        return self.E.shape[1]

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_observations": self.n_observations,
            "dt": self.dt,
            "pi": self.pi.tolist(),
            "T": self.T.tolist(),
            "E": self.E.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(pi=data["pi"], T=data["T"], E=data["E"], dt=data.get("dt", 1.0))


def stationary_distribution(T, tol=1e-14, max_iter=100_000):
    """Left fixed point of a row-stochastic matrix by power iteration."""
    T = np.asarray(T, dtype=float)
    p = np.full(T.shape[0], 1.0 / T.shape[0])
    for _ in range(max_iter):
        q = p @ T
        if np.abs(q - p).sum() < tol:
            return q / q.sum()
        p = q
    return p / p.sum()


# ---------------------------------------------------------------------------
# reference model from a process model


def build_rate_matrix(model, states, durations=None):
    """CTMC generator over super-activity states.

    Explores the reachable configurations (running set, completed set) from
    the root activities. Completing activity ``a`` in a running set moves to
    the remaining members plus any children that became ready, at rate
    ``1 / mean_duration(a)``. Periodic models restart at the roots once
    everything is done. Self transitions are dropped.

    Parameters
    ----------
    model : ProcessModel
    states : list of SuperActivity
    durations : sequence of float, optional
        Mean duration per activity index; defaults to each activity's
        ``d_avg``.
    """
    n_act = len(model.activities)
    if durations is None:
        durations = [a.d_avg for a in model.activities]
    durations = np.asarray(durations, dtype=float)
    if durations.shape != (n_act,) or (durations <= 0).any() or not np.isfinite(durations).all():
        raise ValueError("mean durations must be positive and finite")
    index = {s.members: s.id for s in states}
    n = len(states)
    Q = np.zeros((n, n))
    parents = model.parent_indices()
    roots = frozenset(i for i in range(n_act) if not parents[i])
    seen_rows = {}
    start = (roots, frozenset())
    stack = [start]
    visited = {start}
    while stack:
        running, done = stack.pop()
        if running not in index:
            raise StructureError(f"reachable activity set {sorted(running)} is not a known state")
        i = index[running]
        row = {}
        for a in sorted(running):
            now_done = done | {a}
            rest = running - {a}
            ready = frozenset(
                c for c in range(n_act)
                if c not in now_done and c not in rest and parents[c]
                and parents[c] <= now_done
            )
            nxt_running = rest | ready
            nxt_done = now_done
            if not nxt_running:
                if not model.periodic:
                    continue
                nxt_running, nxt_done = roots, frozenset()
            if nxt_running not in index:
                raise StructureError(
                    f"completing activity {a} from {sorted(running)} reaches unknown "
                    f"set {sorted(nxt_running)}"
                )
            j = index[nxt_running]
            if j != i:
                row[j] = row.get(j, 0.0) + 1.0 / durations[a]
            nxt = (nxt_running, nxt_done)
            if nxt not in visited:
                visited.add(nxt)
                stack.append(nxt)
        if i in seen_rows and seen_rows[i] != row:
            raise StructureError(
                f"state {sorted(running)} has history-dependent transitions"
            )
        seen_rows[i] = row
    for i, row in seen_rows.items():
        for j, rate in row.items():
            Q[i, j] = rate
        Q[i, i] = -sum(row.values())
    return Q


def transition_matrix(Q, dt):
    """``expm(Q * dt)`` with a stochasticity check and clipping to [0, 1]."""
    Q = np.asarray(Q, dtype=float)
    if not np.isfinite(Q).all():
        raise ValueError("rate matrix has non-finite entries")
    if dt < 0:
        raise ValueError("dt must be non-negative")
    P = expm(Q * dt)
    dev = np.abs(P.sum(axis=1) - 1.0).max()
    if dev > STOCHASTIC_TOL or P.min() < -1e-12:
        raise ArithmeticError(f"matrix exponential is not stochastic (row deviation {dev:.3g})")
    return np.clip(P, 0.0, 1.0)


def estimate_emission(state_seqs, obs_seqs, n_states, n_observations):
    """Fraction of time each observation type is seen while in each state."""
    counts = np.zeros((n_states, n_observations))
    for s, o in zip(state_seqs, obs_seqs):
        np.add.at(counts, (np.asarray(s), np.asarray(o)), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    return np.where(rows > 0, counts / np.where(rows > 0, rows, 1.0), 1.0 / n_observations)


def estimate_reference_hmm(model, states, timelines, interval, emission=None,
                           state_seqs=None, obs_seqs=None):
    """Reference HMM from an ensemble of simulated runs.

    ``pi`` is the fraction of runs that start in each state, the transition
    matrix comes from the rate matrix built on the sample mean activity
    durations, and the emission matrix is either supplied or estimated from
    paired state / observation sequences.
    """
    n = len(states)
    index = {s.members: s.id for s in states}
    starts = np.zeros(n)
    for tl in timelines:
        starts[index[tl.active_at(0.0)]] += 1
    pi = starts / starts.sum()
    seen = np.zeros(n, dtype=bool)
    for tl in timelines:
        for members in tl.active_sets():
            seen[index[members]] = True
    if not seen.all():
        warnings.warn(f"states {np.flatnonzero(~seen).tolist()} never observed",
                      RuntimeWarning, stacklevel=2)
    beta = pm.mean_durations(timelines)
    Q = build_rate_matrix(model, states, beta)
    T = transition_matrix(Q, interval)
    if emission is None:
        if state_seqs is None or obs_seqs is None:
            raise ValueError("need an emission matrix or paired state/observation sequences")
        k = int(max(np.max(o) for o in obs_seqs)) + 1
        emission = estimate_emission(state_seqs, obs_seqs, n, k)
    emission = np.asarray(emission, dtype=float)
    if emission.shape[0] != n:
        raise ValueError(f"emission has {emission.shape[0]} rows for {n} states")
    return Hmm(pi=pi, T=T, E=emission, dt=interval)


# ---------------------------------------------------------------------------
# sampling and inference


def _draw(cdf_rows, u):
    # inverse-CDF lookup; min() guards against rows summing to 1 - ulp
    return np.minimum((u[:, None] > cdf_rows).sum(axis=1), cdf_rows.shape[1] - 1)


def emit(states, E, rng):
    """Draw one observation per entry of ``states`` from the rows of ``E``."""
    states = np.asarray(states, dtype=np.int64)
    cdf = np.cumsum(np.asarray(E, dtype=float), axis=1)
    return _draw(cdf[states], rng.random(states.size))


def sample_observations(hmm, length, seed=None):
    """Sample a hidden path and its observations.

    Returns
    -------
    states, observations : ndarray of int
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    cdf_t = np.cumsum(hmm.T, axis=1)
    u = rng.random(length)
    states = np.empty(length, dtype=np.int64)
    s = int(np.searchsorted(np.cumsum(hmm.pi), u[0], side="right"))
    states[0] = min(s, hmm.n_states - 1)
    last = hmm.n_states - 1
    for t in range(1, length):
        s = int(np.searchsorted(cdf_t[states[t - 1]], u[t], side="right"))
        states[t] = s if s <= last else last
    return states, emit(states, hmm.E, rng)


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def viterbi_batch(hmm, observations):
    """Viterbi paths for each row of a 2-D array of equal-length sequences."""
    obs = np.atleast_2d(np.asarray(observations, dtype=np.int64))
    if obs.size == 0:
        raise ValueError("need non-empty observation sequences")
    if obs.min() < 0 or obs.max() >= hmm.n_observations:
        raise ValueError("observation id out of range")
    n_seq, n = obs.shape
    n_states = hmm.n_states
    log_t = _log(hmm.T)
    log_e = _log(hmm.E).T
    back = np.empty((n, n_seq, n_states), dtype=np.int64)
    delta = _log(hmm.pi)[None, :] + log_e[obs[:, 0]]
    for t in range(n):
        if t > 0:
            scores = delta[:, :, None] + log_t[None, :, :]
            # argmax returns the first maximum, i.e. the lowest state id
            back[t] = np.argmax(scores, axis=1)
            delta = np.take_along_axis(scores, back[t][:, None, :], axis=1)[:, 0, :]
            delta = delta + log_e[obs[:, t]]
        if np.isneginf(delta).all(axis=1).any():
            raise DecodingError(t)
    paths = np.empty((n_seq, n), dtype=np.int64)
    paths[:, -1] = np.argmax(delta, axis=1)
    rows = np.arange(n_seq)
    for t in range(n - 1, 0, -1):
        paths[:, t - 1] = back[t, rows, paths[:, t]]
    return paths


def viterbi(hmm, observations):
    """Most probable hidden path (log space, ties go to the lower state)."""
    obs = np.asarray(observations, dtype=np.int64)
    if obs.ndim != 1 or obs.size == 0:
        raise ValueError("need a non-empty 1-D observation sequence")
    return viterbi_batch(hmm, obs[None, :])[0]


def path_log_probability(hmm, states, observations):
    """Joint log-probability of a hidden path and its observations."""
    s = np.asarray(states)
    o = np.asarray(observations)
    lp = _log(hmm.pi[s[0]]) + _log(hmm.E[s[0], o[0]])
    for t in range(1, s.size):
        lp += _log(hmm.T[s[t - 1], s[t]]) + _log(hmm.E[s[t], o[t]])
    return float(lp)


def log_likelihood_batch(hmm, observations):
    """Forward log-likelihood for each row of a 2-D array of sequences.

    Sequences that cannot be produced by the model score ``-inf``.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=np.int64))
    if obs.min() < 0 or obs.max() >= hmm.n_observations:
        raise ValueError("observation id out of range")
    E_t = hmm.E.T
    alpha = hmm.pi[None, :] * E_t[obs[:, 0]]
    total = np.zeros(obs.shape[0])
    for t in range(obs.shape[1]):
        if t > 0:
            alpha = (alpha @ hmm.T) * E_t[obs[:, t]]
        c = alpha.sum(axis=1)
        dead = c <= 0
        total += _log(c)
        alpha = alpha / np.where(dead, 1.0, c)[:, None]
    return total


def log_likelihood(hmm, observations):
    """``log P(observations | hmm)`` via the scaled forward recursion."""
    obs = np.asarray(observations, dtype=np.int64)
    if obs.ndim != 1 or obs.size == 0:
        raise ValueError("need a non-empty 1-D observation sequence")
    return float(log_likelihood_batch(hmm, obs[None, :])[0])
