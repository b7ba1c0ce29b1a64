"""Command line entry point: ``gnomeswarm run | check | histogram``."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import tempfile
import time

import numpy as np

from . import checks as ck
from . import scenario_file as sf
from . import sim_sync as ss
from . import topology as tp
from .adversary import violations_csv
from .protocol import CONFUSED_CODE, UNAWARE_CODE, Mode
from .sim_async import DelayModel, mu_table, run_async

log = logging.getLogger("gnomeswarm")

EXIT_OK, EXIT_USAGE, EXIT_CONFUSED, EXIT_TIMEOUT = 0, 1, 2, 3
OUT_ENV = "GNOMESWARM_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # exit status 2 means "confused" here, so bad arguments exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def atomic_open(path: str):
    """Write to a temp file in the target directory, rename on success."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _write(path, text):
    with atomic_open(path) as fh:
        fh.write(text)


def out_dir(args) -> str:
    return args.out or os.environ.get(OUT_ENV) or "gnomeswarm-out"


# --- run --------------------------------------------------------------------

def _plan_from_args(args) -> sf.RunPlan:
    topo = None
    if args.topology_file:
        topo = tp.load(args.topology_file)
    elif args.kind:
        if args.n is None or args.d is None:
            raise UsageError("--kind needs --n and --d")
        topo = tp.generate(args.kind, args.n, args.d, args.seed, degree=args.degree)
    if args.scenario:
        plan = sf.load(args.scenario, topology=topo)
        if args.kind or args.topology_file:
            if "topology" in json.load(open(args.scenario)):
                plan.notes.append("scenario topology overrides generator flags")
    else:
        if topo is None:
            raise UsageError("need --kind, --topology-file or --scenario")
        g = sf.pick_proposer(topo, args.proposer, args.seed)
        sc = ss.Scenario(topo, [(g, 0, b"")], mode=Mode(args.mode), seed=args.seed,
                         max_turns=args.max_turns)
        plan = sf.RunPlan(sc)
    if args.engine:
        plan.engine = args.engine
    if args.mode and args.scenario and args.mode != "plain":
        plan.scenario.mode = Mode(args.mode)
    if args.tau_max is not None:
        if plan.engine != "async":
            raise UsageError("--tau-max only applies to --engine async")
        plan.tau_max = args.tau_max
    if args.delay:
        plan.delay = args.delay
    if args.duration is not None:
        plan.duration = args.duration
    return plan


def _summary_line(outcome, consensus_turn, confused_seen, messages, spread, unit="turn"):
    tail = f"messages {messages}; max spread {spread}"
    if outcome == "consensus":
        head = f"consensus at {unit} {consensus_turn}"
        if confused_seen:
            head = f"CONFUSED; retry round {head}"
    elif outcome == "confused":
        head = "CONFUSED"
    else:
        head = "TIMEOUT"
    return f"{head}; {tail}"


def _exit_for(outcome, confused_seen):
    if outcome == "confused" or confused_seen:
        return EXIT_CONFUSED
    return EXIT_OK if outcome == "consensus" else EXIT_TIMEOUT


def _metrics_doc(rows, n, d, outcome, ct, messages, spread, first="turn"):
    cols = ss.histogram_columns(d)
    cols[0] = first
    return {"n": n, "d": d, "outcome": outcome, "consensus_turn": ct, "total_messages": messages,
            "max_spread": spread, "columns": cols, "turns": rows}


def _hist_row(turn, alpha, d):
    b = int(alpha.min())
    return [turn] + [round(p, 6) for p in ss.histogram_row(alpha, d)] + [int((alpha == b).sum())]


def _write_metrics(args, base, rows, doc):
    if args.output == "json":
        _write(os.path.join(base, "summary.json"), json.dumps(doc, indent=1, sort_keys=True) + "\n")
    else:
        lines = [",".join(doc["columns"])]
        lines += [",".join([str(r[0])] + [f"{p:.6f}" for p in r[1:-1]] + [str(r[-1])]) for r in rows]
        _write(os.path.join(base, "histogram.csv"), "\n".join(lines) + "\n")


def _spread(alpha):
    if (alpha >= 0).all():
        return int(alpha.max() - alpha.min())
    return 0


def run_sync(args, plan: sf.RunPlan, base: str) -> int:
    sc = plan.scenario
    topo, d = sc.topology, sc.threshold
    rows, messages, spread = [], 0, 0
    trace_path = os.path.join(base, "trace.csv")
    trace_cm = atomic_open(trace_path) if not args.no_trace else contextlib.nullcontext()
    if sc.fault_free_single and sc.proposers[0][1] == 0:
        g = sc.proposers[0][0]
        ct = None
        with trace_cm as fh:
            if fh:
                ss.write_trace_header(fh, topo.n, d)
            # stream: one turn in memory at a time
            for tr in ss.iter_fast(topo, g, d, sc.turn_limit, sc.stop_at_consensus):
                if fh:
                    ss.write_trace_turn(fh, tr)
                rows.append(_hist_row(tr.turn, tr.alpha, d))
                messages += tr.messages_sent
                spread = max(spread, _spread(tr.alpha))
                ct = tr.consensus_turn
                log.info("turn %d: bottom %s x%d", tr.turn, tr.bottom.token(), tr.bottom_size)
        outcome, confused_seen, n = ("consensus" if ct is not None else "timeout"), False, topo.n
    else:
        res = ss.run(sc, engine="object" if not sc.fault_free_single else "auto")
        n = max(len(t.alpha) for t in res.traces)
        with trace_cm as fh:
            if fh:
                ss.write_trace_header(fh, n, d)
            for tr in res.traces:
                a = tr.alpha
                if len(a) < n:  # gnomes that join later are unaware before they arrive
                    a = np.concatenate([a, np.full(n - len(a), UNAWARE_CODE, a.dtype)])
                    tr = ss._trace_row(tr.turn, a, tr.messages_sent)
                if fh:
                    ss.write_trace_turn(fh, tr)
                rows.append(_hist_row(tr.turn, a, d))
        messages, spread, ct, outcome = res.total_messages, res.max_spread, res.consensus_turn, res.outcome
        confused_seen = any((t.alpha[list(res.honest)] == CONFUSED_CODE).any() for t in res.traces
                            if len(t.alpha) >= n)
        if res.violations or res.expulsions:
            _write(os.path.join(base, "violations.csv"), violations_csv(res.violations))
            lines = ["turn,detector,violator,reason"] + [",".join(map(str, e)) for e in res.expulsions]
            _write(os.path.join(base, "expulsions.csv"), "\n".join(lines) + "\n")
    doc = _metrics_doc(rows, n, d, outcome, ct, messages, spread)
    _write_metrics(args, base, rows, doc)
    print(_summary_line(outcome, ct, confused_seen, messages, spread))
    return _exit_for(outcome, confused_seen)


def run_async_cmd(args, plan: sf.RunPlan, base: str) -> int:
    sc = plan.scenario
    topo, d = sc.topology, sc.threshold
    if len(sc.proposers) != 1:
        raise UsageError("async engine runs exactly one proposer")
    if sc.mode != Mode.PLAIN or sc.churn is not None:
        raise UsageError("async engine supports plain mode without churn")
    tm = plan.tau_max
    duration = plan.duration if plan.duration is not None else (4 * d + 2) * tm
    joker = sc.jokers[0] if sc.jokers else None
    tr = run_async(topo, sc.proposers[0][0], DelayModel(plan.delay, tm, sc.seed), duration, joker, d=d)
    grid, A = tr.sample(step=tm)
    rows = [_hist_row(k, a, d) for k, a in enumerate(A)]
    t_all = tr.first_time_all(d)
    confused = bool((A[-1] == CONFUSED_CODE).any())
    outcome = "confused" if confused else "consensus" if t_all is not None else "timeout"
    spread = max((_spread(a) for a in A), default=0)
    if not args.no_trace:
        _write(os.path.join(base, "events.csv"), tr.to_csv())
    _write(os.path.join(base, "mu.csv"), mu_table(tr))
    doc = _metrics_doc(rows, topo.n, d, outcome, t_all, tr.messages, spread, first="tau_over_tau_max")
    doc["tau_max"] = tm
    _write_metrics(args, base, rows, doc)
    ct = None if t_all is None else f"{t_all:.6f}"
    print(_summary_line(outcome, ct, False, tr.messages, spread, unit="tau"))
    return _exit_for(outcome, False)


def cmd_run(args) -> int:
    plan = _plan_from_args(args)
    for note in plan.notes:
        log.warning(note)
    base = out_dir(args)
    if plan.engine == "async":
        return run_async_cmd(args, plan, base)
    return run_sync(args, plan, base)


# --- check ------------------------------------------------------------------

def cmd_check(args) -> int:
    names = args.properties or list(ck.CHECKS)
    bad = [p for p in names if p not in ck.CHECKS]
    if bad:
        raise UsageError(f"unknown properties: {', '.join(bad)} (known: {', '.join(ck.CHECKS)})")
    failed = 0
    for name in names:
        kw = {"seed": args.seed}
        if args.trials is not None:
            kw["trials"] = args.trials
        if args.n is not None:
            kw["n_max"] = args.n
        t0 = time.perf_counter()
        res = ck.CHECKS[name](**kw)
        dt = time.perf_counter() - t0
        status = "PASS" if res.passed else "FAIL"
        print(f"{name}: {status} ({res.trials} trials, {dt:.1f}s){' ' + res.detail if res.detail else ''}")
        if not res.passed:
            failed += 1
            dump = {"property": name, "detail": res.detail, "scenario": res.counterexample}
            path = os.path.join(out_dir(args), f"counterexample-{name}.json")
            _write(path, json.dumps(dump, indent=1, sort_keys=True) + "\n")
            print(f"  counterexample written to {path}")
    return EXIT_USAGE if failed else EXIT_OK


# --- histogram --------------------------------------------------------------

def cmd_histogram(args) -> int:
    with open(args.trace) as fh:
        text = ss.histogram_from_trace(fh)
    if args.out_file:
        _write(args.out_file, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gnomeswarm", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate one scenario and write trace + metrics")
    r.add_argument("--kind", choices=tp.GENERATOR_KINDS)
    r.add_argument("--n", type=int)
    r.add_argument("--d", type=int, help="diameter bound (also the awareness threshold)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--degree", type=int)
    r.add_argument("--topology-file")
    r.add_argument("--scenario", help="scenario JSON file")
    r.add_argument("--engine", choices=["sync", "async"])
    r.add_argument("--tau-max", type=float)
    r.add_argument("--delay", choices=["constant", "uniform", "per-edge-fixed"])
    r.add_argument("--duration", type=float, help="async horizon (default (4d+2) tau_max)")
    r.add_argument("--proposer", default="0", help="gnome id, 'random' or 'max-eccentricity'")
    r.add_argument("--mode", choices=[m.value for m in Mode], default="plain")
    r.add_argument("--max-turns", type=int)
    r.add_argument("--output", choices=["csv", "json"], default="csv")
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./gnomeswarm-out)")
    r.add_argument("--no-trace", action="store_true", help="skip the per-gnome trace file")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="run invariant sweeps")
    c.add_argument("properties", nargs="*", help=f"any of: {', '.join(ck.CHECKS)}")
    c.add_argument("--n", type=int, help="largest topology size")
    c.add_argument("--trials", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--engine", choices=["sync", "async"], help="accepted for symmetry; each property fixes its engine")
    c.add_argument("--out")
    c.set_defaults(func=cmd_check)

    h = sub.add_parser("histogram", help="per-turn awareness histogram from a trace file")
    h.add_argument("trace")
    h.add_argument("-o", "--out-file")
    h.set_defaults(func=cmd_histogram)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, sf.ScenarioFileError, tp.TopologyError, ValueError, OSError) as exc:
        print(f"gnomeswarm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
