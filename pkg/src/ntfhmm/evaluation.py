"""Agreement between a reference HMM and learned candidates.

Two scores per candidate rank: normalized mutual information between the
reference hidden path and the candidate's Viterbi path, and the per-step
log-likelihood gap to the candidate one rank smaller.
"""
import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .hmm import log_likelihood_batch, sample_observations, viterbi_batch


class EvaluationError(ValueError):
    pass


@dataclass
class EvalResult:
    rank: int
    nmi: float
    distance: float = None
    trials: int = 0
    sequence_length: int = 0
    trials_excluded: int = 0


def _entropy(p):
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def nmi(ref_states, pred_states):
    """Mutual information of two label sequences over the sum of their entropies.

    The joint distribution is the empirical frequency of (ref, pred) label
    pairs over time steps, so the value lies in [0, 0.5]. Two constant
    sequences carry no information and score 0.
    """
    ref = np.asarray(ref_states)
    pred = np.asarray(pred_states)
    if ref.shape != pred.shape or ref.ndim != 1:
        raise ValueError("sequences must be 1-D and of equal length")
    if ref.size == 0:
        raise ValueError("sequences must be non-empty")
    _, r = np.unique(ref, return_inverse=True)
    _, q = np.unique(pred, return_inverse=True)
    joint = np.zeros((r.max() + 1, q.max() + 1))
    np.add.at(joint, (r, q), 1.0)
    joint /= ref.size
    pr = joint.sum(axis=1)
    pq = joint.sum(axis=0)
    h = _entropy(pr) + _entropy(pq)
    if h == 0.0:
        warnings.warn("both sequences are constant; nmi defined as 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    nz = joint > 0
    terms = joint[nz] * np.log(joint[nz] / np.outer(pr, pq)[nz])
    # sorted so that swapping the arguments sums identical terms in identical order
    mi = float(np.sum(np.sort(terms)))
    return max(mi, 0.0) / h


def _reference_draws(reference, trials, length, seed):
    seeds = np.random.SeedSequence(seed).spawn(trials)
    draws = [sample_observations(reference, length, seed=s) for s in seeds]
    states = np.stack([d[0] for d in draws])
    obs = np.stack([d[1] for d in draws])
    return states, obs


def _distance_from_obs(best_k, best_k_minus_1, obs):
    if best_k is best_k_minus_1:
        return 0.0, 0
    length = obs.shape[1]
    ll_k = log_likelihood_batch(best_k, obs)
    ll_prev = log_likelihood_batch(best_k_minus_1, obs)
    ok = np.isfinite(ll_k) & np.isfinite(ll_prev)
    if not ok.any():
        raise EvaluationError("every sampled sequence is impossible under a candidate")
    return float(np.mean((ll_k[ok] - ll_prev[ok]) / length)), int((~ok).sum())


def distance(best_k, best_k_minus_1, reference, trials=100, length=10_000, seed=0):
    """Mean per-step log-likelihood gain of ``best_k`` over ``best_k_minus_1``.

    Both models score the same ``trials`` sequences drawn from
    ``reference``. Sequences impossible under either model are dropped.

    Returns
    -------
    float
    """
    for cand in (best_k, best_k_minus_1):
        if cand.n_observations != reference.n_observations:
            raise ValueError("candidate and reference alphabets differ")
    _, obs = _reference_draws(reference, trials, length, seed)
    return _distance_from_obs(best_k, best_k_minus_1, obs)[0]


def evaluate_pipeline(reference, candidates, trials=100, length=10_000, seed=0):
    """NMI and adjacent-rank distance for every candidate rank.

    Parameters
    ----------
    reference : Hmm
    candidates : dict mapping rank -> Hmm

    Returns
    -------
    list of EvalResult, ordered by rank
    """
    if not candidates:
        raise ValueError("no candidates to evaluate")
    states, obs = _reference_draws(reference, trials, length, seed)
    flat_states = states.ravel()
    out = []
    for rank in sorted(candidates):
        cand = candidates[rank]
        if cand.n_observations != reference.n_observations:
            raise ValueError(f"rank {rank}: alphabet differs from the reference")
        pred = viterbi_batch(cand, obs).ravel()
        res = EvalResult(rank=rank, nmi=nmi(flat_states, pred), trials=trials,
                         sequence_length=length)
        if rank - 1 in candidates:
            res.distance, res.trials_excluded = _distance_from_obs(
                cand, candidates[rank - 1], obs)
        out.append(res)
    return out


def write_table(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "nmi", "distance", "trials_excluded"])
        for r in results:
            w.writerow([r.rank, repr(r.nmi), "" if r.distance is None else repr(r.distance),
                        r.trials_excluded])


def read_table(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = row["distance"]
            rows.append(EvalResult(
                rank=int(row["rank"]), nmi=float(row["nmi"]),
                distance=None if d == "" else float(d),
                trials_excluded=int(row.get("trials_excluded") or 0),
            ))
    return rows
