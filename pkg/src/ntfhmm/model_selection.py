"""Choosing the number of hidden states from the stability of perturbed fits.

For each candidate rank an ensemble of perturbed copies of the joint
statistics is decomposed, the lowest-objective solutions are kept, their
emission columns are clustered with exactly one column per member in every
cluster, and the clustering is scored with cosine silhouettes.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import silhouette_samples

from .cooccurrence import JointStats
from .factorization import (DEFAULT_MAX_ITERS, DEFAULT_TOL, FactorSet,
                            _batch_objective, fit_batch, normalize_factors,
                            random_init)

logger = logging.getLogger(__name__)

SILHOUETTE_THRESHOLD = 0.8
MIN_SILHOUETTE_THRESHOLD = 0.6
OBJECTIVE_GAIN = 0.05


class ClusteringError(ValueError):
    pass


@dataclass
class SelectionConfig:
    epsilon: float = 0.03
    ensemble_size: int = 50
    candidate_ranks: list = field(default_factory=lambda: [2, 3, 4, 5, 6])
    restarts: int = 10
    keep_fraction: float = 0.10
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL
    silhouette_threshold: float = SILHOUETTE_THRESHOLD
    min_silhouette_threshold: float = MIN_SILHOUETTE_THRESHOLD
    objective_gain: float = OBJECTIVE_GAIN

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be >= 2")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not self.candidate_ranks:
            raise ValueError("candidate_ranks must be non-empty")
        self.candidate_ranks = sorted(int(r) for r in self.candidate_ranks)

    @property
    def n_keep(self):
        return max(2, int(np.ceil(self.keep_fraction * self.ensemble_size)))


@dataclass
class RankScore:
    rank: int
    silhouette_mean: float
    silhouette_min: float
    rel_objective: float
    centroid: FactorSet = None
    members: list = None


@dataclass
class SelectionReport:
    scores: list
    selected_rank: int = None
    centroid_factors: FactorSet = None
    diagnostics: str = ""
    seed: int = 0

    def score(self, rank):
        return next(s for s in self.scores if s.rank == rank)

    def to_dict(self):
        return {
            "ranks": [
                {
                    "rank": s.rank,
                    "silhouette_mean": s.silhouette_mean,
                    "silhouette_min": s.silhouette_min,
                    "rel_objective": s.rel_objective,
                    "centroid": s.centroid.to_dict() if s.centroid is not None else None,
                }
                for s in self.scores
            ],
            "selected_rank": self.selected_rank,
            "centroid_factors": (self.centroid_factors.to_dict()
                                 if self.centroid_factors is not None else None),
            "diagnostics": self.diagnostics,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        scores = [
            RankScore(
                rank=int(r["rank"]),
                silhouette_mean=float(r["silhouette_mean"]),
                silhouette_min=float(r["silhouette_min"]),
                rel_objective=float(r["rel_objective"]),
                centroid=FactorSet.from_dict(r["centroid"]) if r.get("centroid") else None,
            )
            for r in data["ranks"]
        ]
        cf = data.get("centroid_factors")
        return cls(
            scores=scores,
            selected_rank=data.get("selected_rank"),
            centroid_factors=FactorSet.from_dict(cf) if cf else None,
            diagnostics=data.get("diagnostics", ""),
            seed=data.get("seed", 0),
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "silhouette_mean", "silhouette_min", "rel_objective"])
            for s in self.scores:
                w.writerow([s.rank, repr(s.silhouette_mean), repr(s.silhouette_min),
                            repr(s.rel_objective)])


def perturb(stats, epsilon, seed=None):
    """Multiply every entry by an independent U(1 - eps, 1 + eps) draw and renormalize."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    t = stats.tensor * rng.uniform(1 - epsilon, 1 + epsilon, stats.tensor.shape)
    m = stats.matrix * rng.uniform(1 - epsilon, 1 + epsilon, stats.matrix.shape)
    return JointStats(tensor=t / t.sum(), matrix=m / m.sum(),
                      triple_count=stats.triple_count, pair_count=stats.pair_count)


def _unit_columns(B):
    norms = np.linalg.norm(B, axis=0, keepdims=True)
    return B / np.where(norms > 0, norms, 1.0)


def align_columns(members, max_rounds=100):
    """Match every member's columns to common clusters.

    Centroids start as the first member's columns; each member is then
    assigned by an optimal one-to-one matching on cosine similarity, the
    centroids are recomputed, and this repeats until no assignment changes.

    Returns
    -------
    perms : ndarray, shape (n_members, L)
        ``perms[m, c]`` is the column of member ``m`` placed in cluster ``c``.
    """
    cols = [_unit_columns(np.asarray(B, dtype=float)) for B in members]
    rank = cols[0].shape[1]
    centroids = cols[0].copy()
    perms = np.tile(np.arange(rank), (len(cols), 1))
    for _ in range(max_rounds):
        new = np.empty_like(perms)
        for m, X in enumerate(cols):
            sim = centroids.T @ X
            row, col = linear_sum_assignment(-sim)
            new[m, row] = col
        stacked = np.stack([X[:, p] for X, p in zip(cols, new)])
        centroids = _unit_columns(stacked.mean(axis=0))
        if np.array_equal(new, perms):
            break
        perms = new
    return perms


def cluster_factors(members):
    """Cluster the emission columns of equal-rank factor sets.

    Parameters
    ----------
    members : list of FactorSet or of (K, L) arrays

    Returns
    -------
    perms : ndarray, shape (n_members, L)
        Column permutation aligning each member to the clusters.
    silhouettes : ndarray, shape (n_members, L)
        Cosine silhouette of every clustered column, in cluster order.
    """
    Bs = [m.B if isinstance(m, FactorSet) else np.asarray(m, dtype=float) for m in members]
    if len(Bs) < 2:
        raise ClusteringError("need at least two members to cluster")
    rank = Bs[0].shape[1]
    if any(B.shape != Bs[0].shape for B in Bs):
        raise ClusteringError("members must share one shape")
    perms = align_columns(Bs)
    if rank == 1:
        return perms, np.ones((len(Bs), 1))
    X = np.concatenate([B[:, p].T for B, p in zip(Bs, perms)])
    labels = np.tile(np.arange(rank), len(Bs))
    sil = silhouette_samples(X, labels, metric="cosine")
    return perms, np.clip(sil, -1.0, 1.0).reshape(len(Bs), rank)


def centroid_factors(members, perms, stats=None):
    """Element-wise median of aligned factors, renormalized onto the simplex."""
    A = np.median(np.stack([m.A[:, p] for m, p in zip(members, perms)]), axis=0)
    B = np.median(np.stack([m.B[:, p] for m, p in zip(members, perms)]), axis=0)
    C = np.median(np.stack([m.C[:, p] for m, p in zip(members, perms)]), axis=0)
    D = np.median(np.stack([m.D[np.ix_(p, p)] for m, p in zip(members, perms)]), axis=0)
    A, B, C, D = normalize_factors(A, B, C, D)
    out = FactorSet(A=A, B=B, C=C, D=D)
    if stats is not None:
        from .factorization import objective
        out.objective = objective(stats, out)
    return out


def _member_seed(seed, member):
    return np.random.SeedSequence([seed, member])


def decompose_ensemble(perturbed, rank, config, seed=0):
    """Best-of-restarts decomposition of each perturbed copy at ``rank``.

    Every (member, restart) cell is seeded from ``(seed, rank, member,
    restart)`` and all cells are optimized together.
    """
    n_members = len(perturbed)
    r = config.restarts
    k = perturbed[0].n_observations
    inits = [
        random_init(k, rank, np.random.default_rng(np.random.SeedSequence([seed, rank, m, j])))
        for m in range(n_members) for j in range(r)
    ]
    A, B, C, D = (np.stack(x) for x in zip(*inits))
    T = np.repeat(np.stack([p.tensor for p in perturbed]), r, axis=0)
    M = np.repeat(np.stack([p.matrix for p in perturbed]), r, axis=0)
    A, B, C, D, _, iters, _ = fit_batch(T, M, A, B, C, D,
                                        max_iters=config.max_iters, tol=config.tol)
    A, B, C, D = normalize_factors(A, B, C, D)
    J = _batch_objective(T, M, A, B, C, D).reshape(n_members, r)
    best = J.argmin(axis=1)
    out = []
    for m in range(n_members):
        i = m * r + best[m]
        out.append(FactorSet(A=A[i], B=B[i], C=C[i], D=D[i], objective=float(J[m, best[m]]),
                             iterations=int(iters[i]), seed=[seed, rank, m, int(best[m])]))
    return out


def score_rank(stats, perturbed, rank, config, seed=0):
    members = decompose_ensemble(perturbed, rank, config, seed=seed)
    rel = np.array([f.objective / (0.5 * p.norm_sq) for f, p in zip(members, perturbed)])
    keep = np.argsort(rel, kind="stable")[: config.n_keep]
    kept = [members[i] for i in keep]
    perms, sil = cluster_factors(kept)
    per_cluster = sil.mean(axis=0)
    centroid = centroid_factors(kept, perms, stats)
    logger.info("rank %d: silhouette %.3f (min %.3f), rel objective %.3g",
                rank, sil.mean(), per_cluster.min(), rel[keep].mean())
    return RankScore(
        rank=rank,
        silhouette_mean=float(sil.mean()),
        silhouette_min=float(per_cluster.min()),
        rel_objective=float(rel[keep].mean()),
        centroid=centroid,
        members=kept,
    )


def choose_rank(scores, threshold=SILHOUETTE_THRESHOLD,
                min_threshold=MIN_SILHOUETTE_THRESHOLD, gain=OBJECTIVE_GAIN):
    """Largest stable rank beyond which more states no longer pay off.

    A rank qualifies when its mean silhouette reaches ``threshold``, its
    worst cluster reaches ``min_threshold``, and the next evaluated rank
    lowers the mean relative objective by less than ``gain`` (absolute, on
    the normalized scale). Returns ``None`` if no rank qualifies.
    """
    by_rank = {s.rank: s for s in scores}
    chosen = None
    for s in sorted(scores, key=lambda s: s.rank):
        if s.silhouette_mean < threshold or s.silhouette_min < min_threshold:
            continue
        nxt = by_rank.get(s.rank + 1)
        if nxt is not None and s.rel_objective - nxt.rel_objective >= gain:
            continue
        chosen = s.rank
    return chosen


def select_rank(stats, config=None, seed=0, workers=1):
    """Score every candidate rank and pick the number of hidden states."""
    config = config or SelectionConfig()
    perturbed = [perturb(stats, config.epsilon, _member_seed(seed, m))
                 for m in range(config.ensemble_size)]
    ranks = config.candidate_ranks
    if workers > 1 and len(ranks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(score_rank, stats, perturbed, r, config, seed) for r in ranks]
            scores = [f.result() for f in futures]
    else:
        scores = [score_rank(stats, perturbed, r, config, seed) for r in ranks]
    chosen = choose_rank(scores, config.silhouette_threshold,
                         config.min_silhouette_threshold, config.objective_gain)
    report = SelectionReport(scores=scores, selected_rank=chosen, seed=seed)
    if chosen is None:
        report.diagnostics = (
            f"no candidate rank reached mean silhouette {config.silhouette_threshold} "
            f"with every cluster above {config.min_silhouette_threshold}: "
            + ", ".join(f"{s.rank}:{s.silhouette_mean:.3f}/{s.silhouette_min:.3f}"
                        for s in scores)
        )
    else:
        report.centroid_factors = report.score(chosen).centroid
    return report
