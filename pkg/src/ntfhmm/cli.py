"""Command-line pipeline: simulate -> observe -> stats -> select -> evaluate -> report.

Every subcommand reads and writes fixed file names inside ``--out`` so the
steps chain without extra arguments. Exit codes: 0 success, 1 validation
error, 2 numerical divergence.
"""
import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import cooccurrence, evaluation, event_log, hmm, model_selection
from . import process_model as pm
from .factorization import DivergenceError, FactorSet, best_of_restarts, factors_to_hmm

logger = logging.getLogger("ntfhmm")

FILES = {
    "timelines": "timelines.jsonl",
    "observations": "observations.json",
    "stats": "stats.json",
    "reference": "reference_hmm.json",
    "factors": "factors.json",
    "selection": "selection.json",
    "selection_csv": "selection.csv",
    "selected_hmm": "hmm_selected.json",
    "evaluation": "evaluation.json",
    "evaluation_csv": "evaluation.csv",
    "report": "report.csv",
    "summary": "summary.txt",
}

DEFAULTS = {
    "seed": 0,
    "runs": 10_000,
    "interval": 20.0,
    "ranks": "2..6",
    "ensemble": 50,
    "epsilon": 0.03,
    "restarts": 10,
    "keep_fraction": 0.10,
    "max_iters": 5000,
    "trials": 100,
    "length": 10_000,
    "workers": 1,
    "out": ".",
}


class ConsistencyError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_ranks(text):
    """``"2..6"`` -> [2, 3, 4, 5, 6]; ``"3,5"`` -> [3, 5]; ``"4"`` -> [4]."""
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if lo < 1 or hi < lo:
            raise ValueError(f"bad rank range {text!r}")
        return list(range(lo, hi + 1))
    ranks = sorted({int(t) for t in text.split(",") if t.strip()})
    if not ranks or ranks[0] < 1:
        raise ValueError(f"bad rank list {text!r}")
    return ranks


def _config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _meta(args, command):
    # worker count never changes results, so it stays out of the hash
    skip = ("func", "config", "interval_given", "verbose", "workers")
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}
    cfg["command"] = command
    return {"tool_version": __version__, "seed": args.seed, "config_hash": _config_hash(cfg),
            "config": cfg}


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}")
    with open(path) as fh:
        return json.load(fh)


def _input(args, attr, key):
    given = getattr(args, attr, None)
    return Path(given) if given else Path(args.out) / FILES[key]


def write_timelines(path, timelines, meta):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for tl in timelines:
            fh.write(json.dumps(tl.to_dict()) + "\n")


def read_timelines(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}")
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "meta" in rec:
                continue
            out.append(pm.RunTimeline.from_dict(rec))
    return out


def _load_emission(args, model):
    if args.emission:
        data = _read_json(args.emission)
        return np.asarray(data["E"] if isinstance(data, dict) else data, dtype=float)
    if model.emission is None:
        raise ValueError("no emission matrix: pass --emission or add 'emission' to the model")
    return np.asarray(model.emission, dtype=float)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    model = pm.ProcessModel.load(args.model)
    tls = pm.simulate_ensemble(model, args.runs, seed=args.seed)
    write_timelines(Path(args.out) / FILES["timelines"], tls, _meta(args, "simulate"))
    logger.info("simulated %d runs", len(tls))


def cmd_observe(args):
    model = pm.ProcessModel.load(args.model)
    tls = read_timelines(_input(args, "timelines", "timelines"))
    states = pm.enumerate_states(model, tls)
    E = _load_emission(args, model)
    if E.shape[0] != len(states):
        raise ValueError(f"emission has {E.shape[0]} rows but the runs show {len(states)} states")
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 1]))
    state_seqs = pm.sample_state_sequences(model, tls, args.interval, states)
    obs_seqs = [hmm.emit(s, E, rng) for s in state_seqs]
    _write_json(Path(args.out) / FILES["observations"], {
        "meta": _meta(args, "observe"),
        "interval": args.interval,
        "n_observations": int(E.shape[1]),
        "states": [sorted(model.activities[i].id for i in s.members) for s in states],
        "state_sequences": [s.tolist() for s in state_seqs],
        "sequences": [o.tolist() for o in obs_seqs],
    })


def cmd_stats(args):
    data = _read_json(_input(args, "observations", "observations"))
    stats = cooccurrence.accumulate([np.asarray(s) for s in data["sequences"]],
                                    data["n_observations"])
    payload = stats.to_dict()
    payload["meta"] = _meta(args, "stats")
    payload["interval"] = data.get("interval")
    _write_json(Path(args.out) / FILES["stats"], payload)


def _load_stats(args):
    data = _read_json(_input(args, "stats", "stats"))
    return cooccurrence.JointStats.from_dict(data), data.get("interval")


def cmd_reference_hmm(args):
    model = pm.ProcessModel.load(args.model)
    if args.timelines:
        tls = read_timelines(args.timelines)
    else:
        tls = pm.simulate_ensemble(model, args.runs, seed=args.seed)
    states = pm.enumerate_states(model, tls)
    E = _load_emission(args, model)
    ref = hmm.estimate_reference_hmm(model, states, tls, args.interval, emission=E)
    payload = ref.to_dict()
    payload["meta"] = _meta(args, "reference-hmm")
    payload["states"] = [sorted(model.activities[i].id for i in s.members) for s in states]
    _write_json(Path(args.out) / FILES["reference"], payload)


def cmd_factorize(args):
    stats, _ = _load_stats(args)
    out = {}
    for rank in parse_ranks(args.ranks):
        f = best_of_restarts(stats, rank, args.restarts, seed=args.seed,
                             max_iters=args.max_iters)
        out[str(rank)] = f.to_dict()
        logger.info("rank %d: objective %.4g", rank, f.objective)
    _write_json(Path(args.out) / FILES["factors"], {"meta": _meta(args, "factorize"),
                                                     "factors": out})


def cmd_select(args):
    stats, interval = _load_stats(args)
    dt = args.interval if args.interval_given else (interval or args.interval)
    config = model_selection.SelectionConfig(
        epsilon=args.epsilon, ensemble_size=args.ensemble,
        candidate_ranks=parse_ranks(args.ranks), restarts=args.restarts,
        keep_fraction=args.keep_fraction, max_iters=args.max_iters,
    )
    report = model_selection.select_rank(stats, config, seed=args.seed, workers=args.workers)
    out = Path(args.out)
    payload = report.to_dict()
    payload["meta"] = _meta(args, "select")
    payload["interval"] = dt
    _write_json(out / FILES["selection"], payload)
    report.write_csv(out / FILES["selection_csv"])
    if report.selected_rank is not None:
        sel = factors_to_hmm(report.centroid_factors, dt).to_dict()
        sel["meta"] = payload["meta"]
        _write_json(out / FILES["selected_hmm"], sel)
        print(f"selected rank {report.selected_rank}")
    else:
        print(report.diagnostics)


def cmd_evaluate(args):
    ref_data = _read_json(_input(args, "hmm", "reference"))
    reference = hmm.Hmm.from_dict(ref_data)
    sel = _read_json(_input(args, "selection", "selection"))
    dt = sel.get("interval") or reference.dt
    candidates = {int(r["rank"]): factors_to_hmm(FactorSet.from_dict(r["centroid"]), dt)
                  for r in sel["ranks"] if r.get("centroid")}
    results = evaluation.evaluate_pipeline(reference, candidates, trials=args.trials,
                                           length=args.length, seed=args.seed)
    out = Path(args.out)
    _write_json(out / FILES["evaluation"], {
        "meta": _meta(args, "evaluate"),
        "results": [vars(r) for r in results],
    })
    evaluation.write_table(results, out / FILES["evaluation_csv"])


def cmd_ingest_log(args):
    order = [a.strip() for a in args.order.split(",") if a.strip()]
    tail = [a.strip() for a in (args.parallel or "").split(",") if a.strip()]
    columns = {"case": args.col_case, "activity": args.col_activity, "type": args.col_type,
               "time": args.col_time, "resource": args.col_resource}
    tls = event_log.ingest(args.log, order, tail, columns)
    meta = _meta(args, "ingest-log")
    meta["activities"] = order
    write_timelines(Path(args.out) / FILES["timelines"], tls, meta)
    print(f"{len(tls)} conforming cases")


def emit_report(directory):
    """Merge selection and evaluation tables of ``directory`` into one per-rank table."""
    directory = Path(directory)
    missing = [FILES[k] for k in ("selection", "evaluation")
               if not (directory / FILES[k]).exists()]
    if missing:
        raise FileNotFoundError(f"missing inputs in {directory}: {', '.join(missing)}")
    sel = _read_json(directory / FILES["selection"])
    ev = _read_json(directory / FILES["evaluation"])
    sel_rows = {int(r["rank"]): r for r in sel["ranks"]}
    ev_rows = {int(r["rank"]): r for r in ev["results"]}
    if set(ev_rows) - set(sel_rows):
        raise ConsistencyError(
            f"evaluation ranks {sorted(set(ev_rows) - set(sel_rows))} were never selected over"
        )
    rows = []
    for rank in sorted(sel_rows):
        s, e = sel_rows[rank], ev_rows.get(rank, {})
        rows.append({
            "rank": rank,
            "silhouette_mean": s["silhouette_mean"],
            "silhouette_min": s["silhouette_min"],
            "rel_objective": s["rel_objective"],
            "nmi": e.get("nmi"),
            "distance": e.get("distance"),
        })
    with open(directory / FILES["report"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else v for k, v in r.items()})
    chosen = sel.get("selected_rank")
    lines = [f"ntfhmm {__version__}"]
    if chosen is None:
        lines.append("no rank selected: " + sel.get("diagnostics", ""))
    else:
        lines.append(f"selected rank: {chosen}")
        if (directory / FILES["selected_hmm"]).exists():
            lines.append(f"selected HMM: {directory / FILES['selected_hmm']}")
    lines.append("")
    lines.append(f"{'rank':>4} {'sil_mean':>9} {'sil_min':>9} {'rel_obj':>10} {'nmi':>7} {'dist':>9}")
    for r in rows:
        fmt = lambda v, spec: format(v, spec) if v is not None else "-"
        lines.append(f"{r['rank']:>4} {r['silhouette_mean']:9.4f} {r['silhouette_min']:9.4f} "
                     f"{r['rel_objective']:10.3g} {fmt(r['nmi'], '7.4f'):>7} "
                     f"{fmt(r['distance'], '9.4f'):>9}")
    text = "\n".join(lines) + "\n"
    (directory / FILES["summary"]).write_text(text)
    return rows, text


def cmd_report(args):
    _, text = emit_report(args.dir or args.out)
    print(text, end="")


# ---------------------------------------------------------------------------
# argument handling


def build_parser():
    parser = _Parser(prog="ntfhmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, *flags):
        p = sub.add_parser(name)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--config", help="JSON file of flag defaults")
        p.add_argument("--workers", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        for f in flags:
            f(p)
        return p

    model = lambda p: p.add_argument("--model", required=True)
    runs = lambda p: p.add_argument("--runs", type=int)
    interval = lambda p: p.add_argument("--interval", type=float)
    emission = lambda p: p.add_argument("--emission")
    timelines = lambda p: p.add_argument("--timelines")
    ranks = lambda p: p.add_argument("--ranks")
    restarts = lambda p: p.add_argument("--restarts", type=int)
    stats = lambda p: p.add_argument("--stats")
    max_iters = lambda p: p.add_argument("--max-iters", type=int)

    def selection(p):
        p.add_argument("--ensemble", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--keep-fraction", type=float)

    def evaluate(p):
        p.add_argument("--hmm", help="reference HMM JSON")
        p.add_argument("--selection")
        p.add_argument("--trials", type=int)
        p.add_argument("--length", type=int)

    def ingest(p):
        p.add_argument("--log", required=True)
        p.add_argument("--order", required=True, help="comma-separated activity names")
        p.add_argument("--parallel", help="comma-separated trailing concurrent activities")
        p.add_argument("--col-case", default="case_id")
        p.add_argument("--col-activity", default="activity")
        p.add_argument("--col-type", default="event_type")
        p.add_argument("--col-time", default="timestamp")
        p.add_argument("--col-resource", default="resource")

    add("simulate", cmd_simulate, model, runs)
    add("observe", cmd_observe, model, timelines, interval, emission)
    add("stats", cmd_stats, lambda p: p.add_argument("--observations"))
    add("reference-hmm", cmd_reference_hmm, model, runs, interval, emission, timelines)
    add("factorize", cmd_factorize, stats, ranks, restarts, max_iters)
    add("select", cmd_select, stats, ranks, restarts, selection, interval, max_iters)
    add("evaluate", cmd_evaluate, evaluate)
    add("ingest-log", cmd_ingest_log, ingest)
    add("report", cmd_report, lambda p: p.add_argument("dir", nargs="?"))
    return parser


def resolve(args):
    """Fill unset flags from the config file, then the environment, then defaults."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = {k.replace("-", "_"): v for k, v in _read_json(args.config).items()}
    args.interval_given = getattr(args, "interval", None) is not None
    for key, default in DEFAULTS.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) is None:
            if key in file_cfg:
                setattr(args, key, file_cfg[key])
            elif key == "seed" and os.environ.get("NTFHMM_SEED"):
                args.seed = int(os.environ["NTFHMM_SEED"])
            elif key == "workers":
                args.workers = os.cpu_count() or 1
            else:
                setattr(args, key, default)
    return args


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(resolve(args))
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
