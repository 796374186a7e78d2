"""Experiment runner: converge, route, churn, report, run.

Every sub-command writes a CSV whose first line is ``#schema=<name>/<version>``
followed by a header row. Any long flag may also be supplied through an
environment variable named ``QDEB_<FLAG>`` (upper case, dashes as
underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import random
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from . import analysis
from .simulator import (
    SCHEDULERS, ScenarioConfig, SimulationStalled, World, apply_churn,
    build_initial_world, legit,
)

log = logging.getLogger("qdebruijn")

ENV_PREFIX = "QDEB_"
SENTINEL = -1

CONVERGE_SCHEMA = "qdebruijn-converge/1"
CONVERGE_HEADER = ["n", "d", "c", "run", "seed", "phases_to_diameter",
                   "phases_to_legit", "final_max_degree"]
ROUTE_SCHEMA = "qdebruijn-route/1"
ROUTE_HEADER = ["n", "d", "c", "seed", "search", "source", "target", "present",
                "outcome", "hops"]
CHURN_SCHEMA = "qdebruijn-churn/1"
CHURN_HEADER = ["n0", "n_new", "d", "c", "seed", "node", "writes", "q_updates"]


class UsageError(ValueError):
    pass


class CsvParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


# --- shared helpers -------------------------------------------------------

def parse_range(text: str) -> List[int]:
    """``"1-64"`` or ``"4,8,16"`` or a mix, as a sorted list."""
    out = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            lo, hi = int(a), int(b)
            if lo > hi:
                raise UsageError(f"empty range {part!r}")
            out.update(range(lo, hi + 1))
        else:
            out.add(int(part))
    if not out or min(out) < 1:
        raise UsageError(f"bad n range {text!r}")
    return sorted(out)


def _write_csv(fh, schema: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    fh.write(f"#schema={schema}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)


def _open_out(path: Optional[str]):
    if path in (None, "-"):
        return _NoClose(sys.stdout)
    return open(path, "w", newline="")


class _NoClose:
    def __init__(self, fh):
        self.fh = fh

    def __enter__(self):
        return self.fh

    def __exit__(self, *exc):
        self.fh.flush()


def _check_common(args) -> None:
    if args.d < 2:
        raise UsageError("--d must be >= 2")
    if args.c < 3:
        raise UsageError("--c must be >= 3")
    if getattr(args, "max_phases", 1) < 0:
        raise UsageError("--max-phases must be >= 0")
    if getattr(args, "workers", 1) < 1:
        raise UsageError("--workers must be >= 1")


def converge_world(cfg: ScenarioConfig, max_phases: int) -> Tuple[World, Optional[int]]:
    """Build a world and run phases until legitimate; phases used or None."""
    w = build_initial_world(cfg)
    for used in range(max_phases + 1):
        if legit(w):
            return w, used
        if used < max_phases:
            _advance(w, cfg)
    return w, None


def _advance(w: World, cfg: ScenarioConfig) -> None:
    if cfg.scheduler == "async":
        w.run_async(cfg.async_steps or 8 * len(w.nodes))
        w.phase_count += 1
    else:
        w.run_phase()


# --- converge -------------------------------------------------------------

def converge_run(n: int, d: int, c: int, run: int, seed: int, scheduler: str,
                 max_phases: int) -> List[int]:
    cfg = ScenarioConfig(n=n, d=d, c=c, seed=seed, scheduler=scheduler)
    w = build_initial_world(cfg)
    to_diam = to_legit = None
    for used in range(max_phases + 1):
        snap = analysis.snapshot(w)
        if to_diam is None:
            diam = analysis.diameter(snap, limit=d)
            if diam is not None and diam <= d:
                to_diam = used
        if to_legit is None and analysis.is_legitimate(snap, True, max_diffs=1):
            to_legit = used
        if to_diam is not None and to_legit is not None:
            break
        if used < max_phases:
            try:
                _advance(w, cfg)
            except SimulationStalled as exc:
                log.warning("n=%d run=%d stalled: %s", n, run, exc)
                break
    max_deg = analysis.degree_stats(analysis.snapshot(w))["max"]
    return [n, d, c, run, seed,
            SENTINEL if to_diam is None else to_diam,
            SENTINEL if to_legit is None else to_legit,
            max_deg]


def run_seed(base: int, n: int, run: int) -> int:
    """Per-run seed: distinct for every (n, run) and stable across invocations."""
    return base * 1_000_003 + n * 1009 + run


def cmd_converge(args) -> int:
    _check_common(args)
    ns = parse_range(args.n_range) if args.n_range else [args.n]
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    jobs = [(n, args.d, args.c, run, run_seed(args.seed, n, run), args.scheduler,
             args.max_phases) for n in ns for run in range(args.runs)]
    rows = _map(converge_run, jobs, args.workers)
    with _open_out(args.out) as fh:
        _write_csv(fh, CONVERGE_SCHEMA, CONVERGE_HEADER, rows)
    return 0


def _map(fn, jobs, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# --- route ----------------------------------------------------------------

def cmd_route(args) -> int:
    _check_common(args)
    if args.pairs < 0:
        raise UsageError("--pairs must be >= 0")
    cfg = ScenarioConfig(n=args.n, d=args.d, c=args.c, seed=args.seed,
                         topology=args.start, scheduler=args.scheduler)
    w, used = converge_world(cfg, args.max_phases)
    if used is None:
        log.warning("world not legitimate after %d phases; routing anyway", args.max_phases)
    rng = random.Random(args.seed)
    ids = sorted(w.nodes)
    absent_base = max(ids) + 1
    rows = []
    for k in range(args.pairs):
        src, dst = rng.choice(ids), rng.choice(ids)
        rows.append(_route_row(w, args, k, src, dst, True))
    for k in range(args.absent):
        src = rng.choice(ids)
        rows.append(_route_row(w, args, args.pairs + k, src, absent_base + k, False))
    with _open_out(args.out) as fh:
        _write_csv(fh, ROUTE_SCHEMA, ROUTE_HEADER, rows)
    return 0


def _route_row(w: World, args, k: int, src: int, dst: int, present: bool) -> list:
    res = w.search(src, dst)
    return [args.n, args.d, args.c, args.seed, k, src, dst, int(present), res.outcome, res.hops]


# --- churn ----------------------------------------------------------------

def cmd_churn(args) -> int:
    _check_common(args)
    if args.growth != 2 ** args.d:
        raise UsageError(f"--growth must equal 2**d = {2 ** args.d}")
    rows = churn_rows(args.n, args.d, args.c, args.seed, args.max_phases, args.start)
    with _open_out(args.out) as fh:
        _write_csv(fh, CHURN_SCHEMA, CHURN_HEADER, rows)
    return 0


def churn_rows(n0: int, d: int, c: int, seed: int, max_phases: int,
               start: str = "random_weakly_connected") -> List[list]:
    cfg = ScenarioConfig(n=n0, d=d, c=c, seed=seed, topology=start)
    w, used = converge_world(cfg, max_phases)
    if used is None:
        raise SimulationStalled(f"initial n={n0} world did not converge")
    n_new = n0 * 2 ** d
    before = w.stats()
    apply_churn(w, joins=range(n0, n_new))
    for _ in range(max_phases):
        if legit(w):
            break
        w.run_phase()
    else:
        log.warning("grown world not legitimate after %d phases", max_phases)
    delta = analysis.churn_count(before, w.stats())
    return [[n0, n_new, d, c, seed, nid, wr, qu] for nid, (wr, qu) in sorted(delta.items())]


def churn_write_bound(c: int, d: int, n_new: int) -> int:
    return 3 * (c + 2) * 2 ** d * math.ceil(n_new ** (1 / d) - 1e-9)


# --- report ---------------------------------------------------------------

def read_csv(fh) -> Tuple[str, List[Dict[str, str]]]:
    """Parse a versioned CSV; raises CsvParseError with a 1-based line number."""
    lines = fh.read().splitlines()
    if not lines:
        raise CsvParseError(1, "empty file")
    first = lines[0]
    if not first.startswith("#schema="):
        raise CsvParseError(1, "missing '#schema=' line")
    schema = first[len("#schema="):].strip()
    expected = {CONVERGE_SCHEMA: CONVERGE_HEADER, ROUTE_SCHEMA: ROUTE_HEADER,
                CHURN_SCHEMA: CHURN_HEADER,
                analysis.METRICS_SCHEMA: analysis.METRICS_HEADER}.get(schema)
    if expected is None:
        raise CsvParseError(1, f"unknown schema {schema!r}")
    if len(lines) < 2:
        raise CsvParseError(2, "missing header row")
    header = next(csv.reader([lines[1]]))
    if header != list(expected):
        raise CsvParseError(2, f"header mismatch for {schema}")
    rows = []
    for lineno, values in enumerate(csv.reader(io.StringIO("\n".join(lines[2:]))), start=3):
        if len(values) != len(header):
            raise CsvParseError(lineno, f"expected {len(header)} fields, got {len(values)}")
        rows.append(dict(zip(header, values)))
    return schema, rows


def _ints(rows, key, first_line=3) -> List[int]:
    out = []
    for k, r in enumerate(rows):
        try:
            out.append(int(r[key]))
        except ValueError:
            raise CsvParseError(first_line + k, f"{key}={r[key]!r} is not an integer") from None
    return out


def evaluate(schema: str, rows: List[Dict[str, str]]) -> List[Tuple[str, bool, str]]:
    """Per-criterion (name, passed, detail) for a parsed CSV."""
    if schema == CONVERGE_SCHEMA:
        return _eval_converge(rows)
    if schema == ROUTE_SCHEMA:
        return _eval_route(rows)
    if schema == CHURN_SCHEMA:
        return _eval_churn(rows)
    return _eval_metrics(rows)


def _eval_converge(rows) -> List[Tuple[str, bool, str]]:
    diam = _ints(rows, "phases_to_diameter")
    leg = _ints(rows, "phases_to_legit")
    ns, ds = _ints(rows, "n"), _ints(rows, "d")
    out = [
        ("convergence: every run reaches diameter <= d",
         all(x != SENTINEL for x in diam), f"{sum(x == SENTINEL for x in diam)} runs unfinished"),
        ("convergence: every run becomes legitimate",
         all(x != SENTINEL for x in leg), f"{sum(x == SENTINEL for x in leg)} runs unfinished"),
    ]
    by_d: Dict[int, List[int]] = {}
    for n, d, x in zip(ns, ds, diam):
        if n >= 32 and x != SENTINEL:
            by_d.setdefault(d, []).append(x)
    if 2 in by_d and 3 in by_d:
        m2 = sum(by_d[2]) / len(by_d[2])
        m3 = sum(by_d[3]) / len(by_d[3])
        out.append(("evaluation shape: d=3 mean phases <= d=2 for n >= 32",
                    m3 <= m2, f"d=2 {m2:.2f}, d=3 {m3:.2f}"))
    return out


def _eval_route(rows) -> List[Tuple[str, bool, str]]:
    present = [r for r in rows if r["present"] == "1"]
    absent = [r for r in rows if r["present"] != "1"]
    hops = _ints(rows, "hops")
    if any(h < 0 for h in hops):
        raise CsvParseError(3 + next(k for k, h in enumerate(hops) if h < 0), "negative hop count")
    outcomes = {"success", "failure"}
    total = len(present) or 1
    ok = sum(r["outcome"] == "success" for r in present)
    within = sum(r["outcome"] == "success" and int(r["hops"]) <= int(r["d"]) for r in present)
    return [
        ("routing: all searches terminate",
         all(r["outcome"] in outcomes for r in rows), f"{len(rows)} searches"),
        ("routing: >= 99% of present-target searches succeed",
         ok / total >= 0.99, f"{ok}/{len(present)}"),
        ("routing: >= 95% of present-target searches within d hops",
         within / total >= 0.95, f"{within}/{len(present)}"),
        ("routing: absent targets report failure",
         all(r["outcome"] == "failure" for r in absent), f"{len(absent)} absent lookups"),
    ]


def _eval_churn(rows) -> List[Tuple[str, bool, str]]:
    if not rows:
        return [("churn work: rows present", False, "no rows")]
    writes, qu = _ints(rows, "writes"), _ints(rows, "q_updates")
    r0 = rows[0]
    bound = churn_write_bound(int(r0["c"]), int(r0["d"]), int(r0["n_new"]))
    mq = sum(qu) / len(qu)
    mw = sum(writes) / len(writes)
    return [
        ("churn work: mean q-updates per old node <= 1.5", mq <= 1.5, f"{mq:.3f}"),
        ("churn work: mean edge writes per old node within bound", mw <= bound,
         f"{mw:.1f} <= {bound}"),
    ]


def _eval_metrics(rows) -> List[Tuple[str, bool, str]]:
    legit_rows = [r for r in rows if r["legitimate"] == "1"]
    frac = [float(r["probe_within3"]) for r in legit_rows]
    return [("probe efficiency: >= 95% of probes within 3 hops in legitimate rows",
             all(f >= 0.95 for f in frac), f"{len(legit_rows)} legitimate rows")]


def cmd_report(args) -> int:
    try:
        with open(args.input, newline="") as fh:
            schema, rows = read_csv(fh)
        results = evaluate(schema, rows)
    except CsvParseError as exc:
        print(f"parse error: {args.input}: {exc}", file=sys.stderr)
        return 2
    failed = False
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")
        failed |= not passed
    return 1 if failed else 0


# --- run ------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = ScenarioConfig.load(args.scenario)
    name = os.path.splitext(os.path.basename(args.scenario))[0]
    w = build_initial_world(cfg)
    churn = sorted(cfg.churn, key=lambda ev: ev.get("phase", 0))
    records = [analysis.metrics_record(w, name)]
    for _ in range(cfg.max_phases):
        while churn and churn[0].get("phase", 0) <= w.phase_count:
            ev = churn.pop(0)
            apply_churn(w, joins=ev.get("join", ()), leaves=ev.get("leave", ()))
        _advance(w, cfg)
        records.append(analysis.metrics_record(w, name, with_diameter=len(w.nodes) <= 512))
        if records[-1].legitimate and not churn and not args.full:
            break
    with _open_out(args.out) as fh:
        analysis.write_metrics_csv(records, fh)
    return 0


# --- argument parsing -----------------------------------------------------

def _env(name: str, default, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    return default if raw is None else cast(raw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdebruijn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, n_default=16):
        sp.add_argument("--n", type=int, default=_env("n", n_default, int))
        sp.add_argument("--d", type=int, default=_env("d", 2, int))
        sp.add_argument("--c", type=int, default=_env("c", 3, int))
        sp.add_argument("--seed", type=int, default=_env("seed", 0, int))
        sp.add_argument("--max-phases", type=int, default=_env("max-phases", 5000, int))
        sp.add_argument("--scheduler", choices=SCHEDULERS, default=_env("scheduler", "phase"))
        sp.add_argument("--out", default=_env("out", "-"), help="output CSV path, '-' for stdout")

    sp = sub.add_parser("converge", help="phases until diameter <= d and until legitimate")
    common(sp)
    sp.add_argument("--n-range", default=_env("n-range", None), help="e.g. 1-64 or 4,8,16")
    sp.add_argument("--runs", type=int, default=_env("runs", 10, int))
    sp.add_argument("--workers", type=int, default=_env("workers", 1, int))
    sp.set_defaults(func=cmd_converge)

    sp = sub.add_parser("route", help="hop counts of random lookups on a converged world")
    common(sp, 256)
    sp.add_argument("--pairs", type=int, default=_env("pairs", 1000, int))
    sp.add_argument("--absent", type=int, default=_env("absent", 10, int),
                    help="lookups for ids not in the network")
    sp.add_argument("--start", choices=("random_weakly_connected", "sorted_list", "legitimate_gdb"),
                    default=_env("start", "legitimate_gdb"),
                    help="initial topology; the protocol then runs until legitimate")
    sp.set_defaults(func=cmd_route)

    sp = sub.add_parser("churn", help="work done by old nodes when the network grows")
    common(sp)
    sp.add_argument("--growth", type=int, default=_env("growth", None, int),
                    help="growth factor; must equal 2**d (default)")
    sp.add_argument("--start", choices=("random_weakly_connected", "sorted_list"),
                    default=_env("start", "random_weakly_connected"))
    sp.set_defaults(func=cmd_churn)

    sp = sub.add_parser("report", help="check a CSV against acceptance thresholds")
    sp.add_argument("input")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="run a JSON scenario and emit per-phase metrics")
    sp.add_argument("scenario")
    sp.add_argument("--out", default=_env("out", "-"))
    sp.add_argument("--full", action="store_true", help="keep going after legitimacy")
    sp.set_defaults(func=cmd_run)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "churn" and args.growth is None:
        args.growth = 2 ** args.d
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
