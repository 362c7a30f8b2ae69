"""Event-log ingestion and time-gap removal for case timelines.

Logs are CSV files of start/complete events. Cases that follow a required
activity order are kept, and their activities are laid end to end with the
waiting time between and within activities removed.
"""
import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .process_model import RunTimeline

logger = logging.getLogger(__name__)

DEFAULT_COLUMNS = {
    "case": "case_id",
    "activity": "activity",
    "type": "event_type",
    "time": "timestamp",
    "resource": "resource",
}


class LogSchemaError(ValueError):
    """A required column is missing from the log header."""


class LogRowError(ValueError):
    """A row could not be parsed."""

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class EventRecord:
    case_id: str
    activity: str
    event_type: str
    timestamp: float
    resource: str = ""


@dataclass
class CaseTimeline:
    """Part intervals of every activity in one case, in hours."""

    case_id: str
    parts: dict = field(default_factory=dict)

    def duration(self, activity):
        return float(sum(e - s for s, e in self.parts[activity]))

    def first_start(self, activity):
        return self.parts[activity][0][0]

    def to_run_timeline(self, activities, run_id=0):
        """Single-part timeline as a :class:`RunTimeline` over ``activities``."""
        start = [self.parts[a][0][0] for a in activities]
        end = [self.parts[a][-1][1] for a in activities]
        return RunTimeline(run_id=run_id, start=start, end=end)


@dataclass
class ParsedLog:
    records: list
    problems: dict = field(default_factory=dict)

    @property
    def flagged_cases(self):
        return set(self.problems)


def parse_timestamp(text):
    """Hours since the Unix epoch from ISO-8601 text or a plain number of hours."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp() / 3600.0


def _normalize_type(text):
    t = text.strip().lower()
    if t in ("start", "started", "begin"):
        return "start"
    if t in ("complete", "completed", "end", "finish"):
        return "complete"
    raise ValueError(f"unknown event type {text!r}")


def parse_log(source, columns=None):
    """Read a CSV event log.

    Parameters
    ----------
    source : path or text stream
    columns : dict, optional
        Maps ``case``, ``activity``, ``type``, ``time`` and optionally
        ``resource`` to header names.

    Returns
    -------
    ParsedLog
        Records sorted by (case, timestamp) and, per case, a list of
        problems found while pairing start and complete events.
    """
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="") as fh:
            return parse_log(io.StringIO(fh.read()), cols)
    reader = csv.DictReader(source)
    header = reader.fieldnames or []
    missing = [cols[k] for k in ("case", "activity", "type", "time") if cols[k] not in header]
    if missing:
        raise LogSchemaError(f"missing columns: {', '.join(missing)}")
    has_resource = cols.get("resource") in header
    records = []
    for line, row in enumerate(reader, start=2):
        try:
            ts = parse_timestamp(row[cols["time"]])
            etype = _normalize_type(row[cols["type"]])
        except (ValueError, TypeError, AttributeError) as exc:
            raise LogRowError(line, str(exc)) from None
        if ts < 0:
            raise LogRowError(line, "negative timestamp")
        records.append(EventRecord(
            case_id=row[cols["case"]],
            activity=row[cols["activity"]],
            event_type=etype,
            timestamp=ts,
            resource=row[cols["resource"]] if has_resource else "",
        ))
    # starts sort before completes at equal times
    records.sort(key=lambda r: (r.case_id, r.timestamp, r.event_type != "start"))
    return ParsedLog(records=records, problems=_pairing_problems(records))


def _pairing_problems(records):
    problems = defaultdict(list)
    open_starts = defaultdict(int)
    for r in records:
        key = (r.case_id, r.activity)
        if r.event_type == "start":
            open_starts[key] += 1
        elif open_starts[key] == 0:
            problems[r.case_id].append(f"{r.activity}: complete at {r.timestamp} without start")
        else:
            open_starts[key] -= 1
    for (case, act), n in open_starts.items():
        if n:
            problems[case].append(f"{act}: {n} start(s) never completed")
    return dict(problems)


def _merge(intervals):
    merged = []
    for s, e in sorted(intervals):
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


def build_timelines(parsed, include_flagged=False):
    """Pair start/complete events into part intervals for every case.

    Cases with pairing problems are skipped unless ``include_flagged``.
    Overlapping parts of the same activity are merged.
    """
    by_case = defaultdict(list)
    for r in parsed.records:
        by_case[r.case_id].append(r)
    out = []
    for case, recs in by_case.items():
        if case in parsed.problems and not include_flagged:
            continue
        pending = defaultdict(list)
        parts = defaultdict(list)
        for r in recs:
            if r.event_type == "start":
                pending[r.activity].append(r.timestamp)
            elif pending[r.activity]:
                parts[r.activity].append((pending[r.activity].pop(0), r.timestamp))
        out.append(CaseTimeline(case_id=case,
                                parts={a: _merge(p) for a, p in parts.items()}))
    return out


def conforms(case, order, parallel_tail=()):
    """Does the case run the activities of ``order`` exactly in that order?

    Activities in ``parallel_tail`` must close the order; their parts may
    interleave with each other but with nothing else.
    """
    tail = set(parallel_tail)
    head = [a for a in order if a not in tail]
    if set(order[len(head):]) != tail:
        raise ValueError("parallel tail must be the final activities of the order")
    if set(case.parts) != set(order):
        return False
    labels = [a for _, a in sorted((s, a) for a, ps in case.parts.items() for s, _ in ps)]
    runs = [a for i, a in enumerate(labels) if i == 0 or labels[i - 1] != a]
    if runs[: len(head)] != head:
        return False
    return all(a in tail for a in runs[len(head):])


def filter_conforming_cases(cases, order, parallel_tail=()):
    """Keep the cases whose activity sequence matches ``order``."""
    if not order:
        raise ValueError("order must be non-empty")
    kept = [c for c in cases if conforms(c, list(order), parallel_tail)]
    logger.info("%d of %d cases conform", len(kept), len(cases))
    return kept


def collapse_gaps(case, order, parallel_tail=()):
    """Lay activities end to end with waiting time removed.

    Each activity lasts the summed length of its parts. Sequential
    activities follow one another without gaps; the parallel tail starts
    together when the last sequential activity ends.
    """
    tail = set(parallel_tail)
    t = 0.0
    parts = {}
    for a in order:
        if a in tail:
            continue
        d = case.duration(a)
        parts[a] = [(t, t + d)]
        t += d
    for a in order:
        if a in tail:
            parts[a] = [(t, t + case.duration(a))]
    return CaseTimeline(case_id=case.case_id, parts=parts)


def ingest(source, order, parallel_tail=(), columns=None):
    """Parse a log and return collapsed :class:`RunTimeline` objects, one per conforming case."""
    parsed = parse_log(source, columns)
    if parsed.problems:
        logger.warning("%d case(s) excluded for unmatched events", len(parsed.problems))
    cases = filter_conforming_cases(build_timelines(parsed), order, parallel_tail)
    return [collapse_gaps(c, order, parallel_tail).to_run_timeline(order, run_id=i)
            for i, c in enumerate(cases)]


def durations(cases, activities):
    """Matrix of summed part durations, one row per case."""
    return np.array([[c.duration(a) for a in activities] for c in cases])
