"""Activity DAGs with stochastic durations and their simulated runs."""
import json
from dataclasses import dataclass, field

import numpy as np


class ModelValidationError(ValueError):
    """The process model is malformed (bad durations, unknown ids, cycles)."""


@dataclass(frozen=True)
class Activity:
    id: int
    name: str
    d_min: float
    d_max: float
    d_avg: float
    resources: frozenset = frozenset()

    def __post_init__(self):
        if self.d_avg <= 0:
            raise ModelValidationError(f"activity {self.id}: d_avg must be positive")
        if not (0 <= self.d_min <= self.d_avg <= self.d_max):
            raise ModelValidationError(
                f"activity {self.id}: need 0 <= d_min <= d_avg <= d_max"
            )
        object.__setattr__(self, "resources", frozenset(self.resources))


@dataclass(frozen=True)
class SuperActivity:
    """A set of activities running at the same time; one hidden state."""

    id: int
    members: frozenset
    resource_union: frozenset = frozenset()


@dataclass
class ProcessModel:
    """DAG of activities.

    ``edges`` hold (parent id, child id) pairs using the activities' own ids.
    ``emission`` optionally carries an SME emission matrix whose rows follow
    the canonical state order of :func:`enumerate_states`.
    """

    activities: list
    edges: set = field(default_factory=set)
    periodic: bool = False
    duration_mode: str = "beta"
    resource_constrained: bool = False
    emission: list = None

    def __post_init__(self):
        self.edges = {tuple(e) for e in self.edges}
        ids = [a.id for a in self.activities]
        if len(set(ids)) != len(ids):
            raise ModelValidationError("duplicate activity ids")
        if not self.activities:
            raise ModelValidationError("model has no activities")
        if self.duration_mode not in ("beta", "exponential"):
            raise ModelValidationError(f"unknown duration_mode {self.duration_mode!r}")
        known = set(ids)
        for p, c in self.edges:
            if p not in known or c not in known:
                raise ModelValidationError(f"edge ({p}, {c}) references an unknown activity")
        self._order = self._topological_order()

    @property
    def n(self):
        return len(self.activities)

    def position(self, activity_id):
        return next(i for i, a in enumerate(self.activities) if a.id == activity_id)

    def parent_indices(self):
        """Parents of each activity, as sets of list positions."""
        pos = {a.id: i for i, a in enumerate(self.activities)}
        parents = [set() for _ in self.activities]
        for p, c in self.edges:
            parents[pos[c]].add(pos[p])
        return [frozenset(p) for p in parents]

    def _topological_order(self):
        parents = self.parent_indices()
        remaining = set(range(self.n))
        order = []
        while remaining:
            ready = sorted(i for i in remaining if not (parents[i] & remaining))
            if not ready:
                raise ModelValidationError("edges contain a cycle")
            order.extend(ready)
            remaining.difference_update(ready)
        return order

    def to_dict(self):
        out = {
            "activities": [
                {"id": a.id, "name": a.name, "d_min": a.d_min, "d_max": a.d_max,
                 "d_avg": a.d_avg, "resources": sorted(a.resources)}
                for a in self.activities
            ],
            "edges": sorted([list(e) for e in self.edges]),
            "periodic": self.periodic,
            "duration_mode": self.duration_mode,
        }
        if self.resource_constrained:
            out["resource_constrained"] = True
        if self.emission is not None:
            out["emission"] = [list(map(float, r)) for r in self.emission]
        return out

    @classmethod
    def from_dict(cls, data):
        try:
            acts = [
                Activity(
                    id=int(a["id"]), name=str(a.get("name", a["id"])),
                    d_min=float(a.get("d_min", 0.0)),
                    d_max=float(a.get("d_max", a["d_avg"])),
                    d_avg=float(a["d_avg"]),
                    resources=frozenset(a.get("resources", ())),
                )
                for a in data["activities"]
            ]
        except (KeyError, TypeError) as exc:
            raise ModelValidationError(f"bad activity record: {exc}") from exc
        return cls(
            activities=acts,
            edges={tuple(e) for e in data.get("edges", [])},
            periodic=bool(data.get("periodic", False)),
            duration_mode=data.get("duration_mode", "beta"),
            resource_constrained=bool(data.get("resource_constrained", False)),
            emission=data.get("emission"),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunTimeline:
    """Start and end time (hours, relative to the run start) of each activity."""

    run_id: int
    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.end = np.asarray(self.end, dtype=float)

    @property
    def makespan(self):
        return float(self.end.max())

    def active_at(self, t):
        """Positions of activities running at ``t`` (intervals are half-open)."""
        return frozenset(np.flatnonzero((self.start <= t) & (t < self.end)).tolist())

    def active_sets(self):
        """Every distinct running set seen at a start/end boundary."""
        bounds = np.unique(np.concatenate([self.start, self.end]))
        sets = []
        for t in bounds:
            s = self.active_at(t)
            if s and s not in sets:
                sets.append(s)
        return sets

    def to_dict(self):
        return {"run": self.run_id, "start": self.start.tolist(), "end": self.end.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(run_id=int(data["run"]), start=data["start"], end=data["end"])


def beta_shapes(a):
    """Shape parameters (2, 2 (max - avg) / (avg - min)) for activity ``a``."""
    return 2.0, 2.0 * (a.d_max - a.d_avg) / (a.d_avg - a.d_min)


def draw_durations(model, runs, rng):
    """Duration matrix of shape (runs, n_activities)."""
    out = np.empty((runs, model.n))
    for i, a in enumerate(model.activities):
        if model.duration_mode == "exponential":
            out[:, i] = rng.exponential(a.d_avg, size=runs)
        elif a.d_max == a.d_min or a.d_avg == a.d_min:
            out[:, i] = a.d_min if a.d_avg == a.d_min else a.d_avg
        elif a.d_avg == a.d_max:
            out[:, i] = a.d_max
        else:
            p, q = beta_shapes(a)
            out[:, i] = a.d_min + (a.d_max - a.d_min) * rng.beta(p, q, size=runs)
    # an activity must occupy a positive interval
    return np.maximum(out, np.finfo(float).tiny)


def _schedule_unconstrained(model, dur):
    parents = model.parent_indices()
    start = np.zeros_like(dur)
    end = np.zeros_like(dur)
    for i in model._order:
        if parents[i]:
            start[:, i] = end[:, sorted(parents[i])].max(axis=1)
        end[:, i] = start[:, i] + dur[:, i]
    return start, end


def _schedule_constrained(model, dur_row):
    """List scheduling where activities sharing a resource never overlap."""
    parents = model.parent_indices()
    n = model.n
    start = np.zeros(n)
    end = np.zeros(n)
    free = {}
    pending = set(range(n))
    while pending:
        ready = [i for i in pending if not (parents[i] & pending)]
        ready_at = {i: max((end[p] for p in parents[i]), default=0.0) for i in ready}
        i = min(ready, key=lambda j: (ready_at[j], j))
        res = model.activities[i].resources
        s = max([ready_at[i]] + [free.get(r, 0.0) for r in res])
        start[i] = s
        end[i] = s + dur_row[i]
        for r in res:
            free[r] = end[i]
        pending.remove(i)
    return start, end


def simulate_ensemble(model, runs, seed=0):
    """Simulate ``runs`` independent executions of ``model``.

    Children start as soon as all their parents have finished, so siblings
    overlap. Durations for all runs come from one generator in run-major
    order, so results depend only on ``(model, runs, seed)``.
    """
    if not isinstance(runs, (int, np.integer)) or runs < 1:
        raise ValueError("runs must be a positive integer")
    rng = np.random.default_rng(seed)
    dur = draw_durations(model, int(runs), rng)
    if model.resource_constrained:
        rows = [_schedule_constrained(model, d) for d in dur]
        start = np.array([r[0] for r in rows])
        end = np.array([r[1] for r in rows])
    else:
        start, end = _schedule_unconstrained(model, dur)
    return [RunTimeline(run_id=r, start=start[r], end=end[r]) for r in range(runs)]


def mean_durations(timelines):
    """Sample mean of each activity's duration over the ensemble."""
    dur = np.array([tl.end - tl.start for tl in timelines])
    return dur.mean(axis=0)


def _state_key(members):
    return (min(members), -len(members), tuple(sorted(members)))


def enumerate_states(model, timelines):
    """Distinct running sets observed over the ensemble, as super-activities.

    States are ordered by their lowest member position, larger sets first,
    then lexicographically.
    """
    if not timelines:
        raise ValueError("need at least one timeline")
    found = set()
    for tl in timelines:
        found.update(tl.active_sets())
    ordered = sorted(found, key=_state_key)
    return [
        SuperActivity(
            id=i,
            members=m,
            resource_union=frozenset().union(*(model.activities[j].resources for j in m)),
        )
        for i, m in enumerate(ordered)
    ]


def _sample_codes(start, end, times):
    """Bitmask of running activities at each time (rows of start/end per time)."""
    active = (start <= times[:, None]) & (times[:, None] < end)
    weights = (1 << np.arange(start.shape[-1], dtype=np.int64))
    return active.astype(np.int64) @ weights


def _codes_to_states(codes, states):
    lookup = {sum(1 << m for m in s.members): s.id for s in states}
    uniq, inv = np.unique(codes, return_inverse=True)
    try:
        mapped = np.array([lookup[int(c)] for c in uniq], dtype=np.int64)
    except KeyError as exc:
        members = [i for i in range(64) if int(exc.args[0]) >> i & 1]
        raise ValueError(f"running set {members} is not among the states") from None
    return mapped[inv]


def sample_state_sequences(model, timelines, interval, states):
    """Hidden-state sequences sampled every ``interval`` hours.

    A periodic model is treated as one continuous stream in which each
    timeline is the next cycle, giving a single sequence. Otherwise each
    timeline yields its own sequence, ending at its makespan.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    if isinstance(timelines, RunTimeline):
        timelines = [timelines]
    if model.periodic:
        spans = np.array([tl.makespan for tl in timelines])
        offsets = np.concatenate([[0.0], np.cumsum(spans)])
        n_samples = int(np.ceil(offsets[-1] / interval))
        times = np.arange(n_samples) * interval
        times = times[times < offsets[-1]]
        cycle = np.searchsorted(offsets, times, side="right") - 1
        starts = np.array([tl.start for tl in timelines])
        ends = np.array([tl.end for tl in timelines])
        local = times - offsets[cycle]
        active = (starts[cycle] <= local[:, None]) & (local[:, None] < ends[cycle])
        codes = active.astype(np.int64) @ (1 << np.arange(model.n, dtype=np.int64))
        return [_codes_to_states(codes, states)]
    out = []
    for tl in timelines:
        times = np.arange(int(np.ceil(tl.makespan / interval)) + 1) * interval
        times = times[times < tl.makespan]
        codes = _sample_codes(tl.start[None, :], tl.end[None, :], times)
        # the run is over at the first instant with nothing running
        gaps = np.flatnonzero(codes == 0)
        if gaps.size:
            codes = codes[: gaps[0]]
        out.append(_codes_to_states(codes, states))
    return out


def sample_state_sequence(model, timelines, interval, states):
    """Single state sequence: the periodic stream, or one non-periodic run."""
    seqs = sample_state_sequences(model, timelines, interval, states)
    if len(seqs) != 1:
        raise ValueError("non-periodic ensembles give one sequence per run; "
                         "use sample_state_sequences")
    return seqs[0]
