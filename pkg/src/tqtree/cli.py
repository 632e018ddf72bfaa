"""Command-line front end: datasets, index snapshots, queries and benchmarks.

Results are tab-separated with a ``# config:`` line recording the run
configuration, so every file can be regenerated from its own header.
Timing columns are the only nondeterministic fields.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K
from .baseline import PointIndex, baseline_topk
from .core import ServiceMode, ServiceParams
from .ingest import (SyntheticSpec, dump_dataset, generate_synthetic, load_dataset,
                     read_facility_routes, read_multipoint, read_two_point_trips, spec_dict)
from .kmaxrrst import top_k_facilities
from .maxkcov import (BaselineProvider, TreeProvider, exact_maxkcov, two_step_greedy)
from .tree import TQTree, Variant, bounds_for

METHODS = ("BL", "TQ(B)", "TQ(Z)")
SWEEPS = {"stops": "stops", "facilities": "facilities", "k": "k", "users": "users"}


@dataclass
class RunConfig:
    dataset: str | None = None
    snapshot: str | None = None
    methods: list = field(default_factory=lambda: list(METHODS))
    variant: str = Variant.TWO_POINT.value
    beta: int = 64
    psi: float = 200.0
    mode: str = ServiceMode.BINARY.value
    k: int = 8
    kprime: int | None = None
    facilities: int | None = None
    seed: int = 0
    repetitions: int = 1
    eager: bool = False
    threads: int = 1
    out: str | None = None
    # synthetic workload, used by gen and bench
    users: int = 100_000
    stops: int = 32
    n_facilities: int = 64
    points: list = field(default_factory=lambda: [2, 2])
    distribution: str = "clustered"
    sweep: str | None = None
    values: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @property
    def params(self) -> ServiceParams:
        return ServiceParams(self.psi, ServiceMode(self.mode))

    def synthetic(self, **over) -> SyntheticSpec:
        kw = dict(users=self.users, points=tuple(self.points), facilities=self.n_facilities,
                  stops=self.stops, distribution=self.distribution, seed=self.seed)
        kw.update(over)
        return SyntheticSpec(**kw)


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
        unknown = set(data) - {f.name for f in dataclasses.fields(RunConfig)}
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        cfg = RunConfig(**data)
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    if cfg.threads != 1:
        print("note: execution is sequential; --threads only accepts 1", file=sys.stderr)
        cfg.threads = 1
    return cfg


class Table:
    """Header-bearing TSV writer with the run configuration embedded."""

    def __init__(self, cfg: RunConfig, columns: Sequence[str]):
        self.cfg = cfg
        self.columns = list(columns)
        self.rows: list[list] = []

    def add(self, *row) -> None:
        self.rows.append(list(row))

    def render(self) -> str:
        lines = [f"# config: {self.cfg.to_json()}", "\t".join(self.columns)]
        lines += ["\t".join(_fmt(v) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"

    def emit(self) -> None:
        text = self.render()
        if self.cfg.out:
            Path(self.cfg.out).write_text(text)
        else:
            sys.stdout.write(text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _dataset(cfg: RunConfig):
    if not cfg.dataset:
        raise SystemExit("a --dataset is required")
    users, facs, _ = load_dataset(cfg.dataset)
    return users, facs


def _tree(cfg: RunConfig, users) -> TQTree:
    if cfg.snapshot and Path(cfg.snapshot).exists():
        return TQTree.load(cfg.snapshot)
    return TQTree.build(users, beta=cfg.beta, variant=cfg.variant,
                        bounds=bounds_for(users, cfg.psi), mode=cfg.mode)


def _sample(facs, n, rng):
    if n is None or n >= len(facs):
        return list(facs)
    pick = np.sort(rng.choice(len(facs), size=n, replace=False))
    return [facs[i] for i in pick]


# ----------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: RunConfig) -> int:
    spec = cfg.synthetic()
    users, facs = generate_synthetic(spec)
    if not cfg.out:
        raise SystemExit("gen needs --out")
    dump_dataset(users, facs, cfg.out, meta={"synthetic": spec_dict(spec)})
    print(f"wrote {len(users)} users and {len(facs)} facilities to {cfg.out}")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    cols = json.loads(args.columns) if args.columns else None
    if args.trips:
        users, rep = read_two_point_trips(args.trips, cols, delimiter=args.delimiter,
                                          project=not args.planar, expected=args.expected)
    elif args.checkins:
        users, rep = read_multipoint(args.checkins, cols, delimiter=args.delimiter,
                                     project=not args.planar, expected=args.expected)
    else:
        raise SystemExit("ingest needs --trips or --checkins")
    facs = read_facility_routes(args.routes, None if args.planar else rep.projection) if args.routes else []
    dump_dataset(users, facs, args.out, meta={"rows": rep.rows, "skipped": rep.skipped,
                                              "dropped_singletons": rep.dropped_singletons})
    print(f"rows={rep.rows} kept={rep.kept} skipped={rep.skipped} "
          f"dropped_singletons={rep.dropped_singletons} facilities={len(facs)}")
    return 0


def cmd_build(cfg: RunConfig) -> int:
    users, _ = _dataset(cfg)
    t0 = time.perf_counter()
    tree = TQTree.build(users, beta=cfg.beta, variant=cfg.variant,
                        bounds=bounds_for(users, cfg.psi), mode=cfg.mode)
    built = time.perf_counter() - t0
    bad = tree.check_invariants()
    if cfg.snapshot:
        tree.save(cfg.snapshot)
    print(f"build_seconds\t{built:.3f}")
    for key, v in tree.stats().items():
        print(f"{key}\t{v}")
    print(f"invariants\t{'ok' if not bad else 'FAILED'}")
    for msg in bad[:20]:
        print(f"violation\t{msg}", file=sys.stderr)
    return 0 if not bad else 1


def cmd_inspect(cfg: RunConfig) -> int:
    if not cfg.snapshot:
        raise SystemExit("inspect needs --snapshot")
    tree = TQTree.load(cfg.snapshot)
    bad = tree.check_invariants()
    depth_hist: dict[int, int] = {}
    for n in tree.nodes():
        depth_hist[n.depth] = depth_hist.get(n.depth, 0) + len(n)
    for key, v in tree.stats().items():
        print(f"{key}\t{v}")
    print("entries_by_depth\t" + ",".join(f"{d}:{c}" for d, c in sorted(depth_hist.items())))
    print(f"invariants\t{'ok' if not bad else 'FAILED'}")
    return 0 if not bad else 1


def _run_topk(method, facs, cfg, tree, idx):
    p = cfg.params
    t0 = time.perf_counter()
    if method == "BL":
        res = baseline_topk(facs, cfg.k, p, idx)
    else:
        res = top_k_facilities(facs, cfg.k, p, tree, use_z=(method == "TQ(Z)"), eager=cfg.eager)
    return res, time.perf_counter() - t0


def cmd_topk(cfg: RunConfig) -> int:
    users, facs = _dataset(cfg)
    tree = _tree(cfg, users)
    idx = PointIndex(tree.table, beta=cfg.beta, bounds=tree.bounds)
    rng = np.random.default_rng(cfg.seed)
    tab = Table(cfg, ["rep", "method", "rank", "facility", "score", "users_served", "seconds"])
    agree = True
    for rep in range(cfg.repetitions):
        sample = _sample(facs, cfg.facilities, rng)
        ref = None
        for m in cfg.methods:
            res, dt = _run_topk(m, sample, cfg, tree, idx)
            key = [(r.id, r.units) for r in res]
            agree &= ref is None or key == ref
            ref = key if ref is None else ref
            for i, r in enumerate(res, 1):
                tab.add(rep, m, i, r.id, r.score, r.users_served, round(dt, 6))
    tab.emit()
    if not agree:
        print("error: methods disagree on the top-k result", file=sys.stderr)
    return 0 if agree else 1


def cmd_maxkcov(cfg: RunConfig) -> int:
    users, facs = _dataset(cfg)
    tree = _tree(cfg, users)
    idx = PointIndex(tree.table, beta=cfg.beta, bounds=tree.bounds)
    providers = {"BL": BaselineProvider(idx), "TQ(B)": TreeProvider(tree, False),
                 "TQ(Z)": TreeProvider(tree, True)}
    rng = np.random.default_rng(cfg.seed)
    tab = Table(cfg, ["rep", "method", "chosen", "value", "gains", "exact_value", "ratio", "seconds"])
    agree = True
    for rep in range(cfg.repetitions):
        sample = _sample(facs, cfg.facilities, rng)
        p = cfg.params
        try:
            ex = exact_maxkcov(sample, cfg.k, p, provider=providers["TQ(Z)"])
        except ValueError:
            ex = None
        ref = None
        for m in cfg.methods:
            sol = two_step_greedy(sample, cfg.k, p, kprime=cfg.kprime, provider=providers[m])
            agree &= ref is None or (sol.chosen, sol.units) == ref
            ref = ref or (sol.chosen, sol.units)
            ratio = "" if ex is None else (sol.units / ex.units if ex.units else 1.0)
            tab.add(rep, "G-" + m, sol.chosen, sol.value, sol.gain_scores,
                    "" if ex is None else ex.value, ratio, round(sol.elapsed, 6))
        if ex is not None:
            tab.add(rep, "exact", ex.chosen, ex.value, "", ex.value, 1.0, round(ex.elapsed, 6))
    tab.emit()
    return 0 if agree else 1


def _timed(fn, reps):
    fn()  # warm caches and compiled kernels
    out = []
    res = None
    for _ in range(max(1, reps)):
        t0 = time.perf_counter()
        res = fn()
        out.append(time.perf_counter() - t0)
    return res, out


def bench_cell(cfg: RunConfig, users, facs, k: int) -> dict:
    """Latency of every method on one workload; checks that results agree."""
    p = cfg.params
    t0 = time.perf_counter()
    tree = TQTree.build(users, beta=cfg.beta, variant=cfg.variant,
                        bounds=bounds_for(users, cfg.psi), mode=cfg.mode)
    tree.flat()
    build = time.perf_counter() - t0
    idx = PointIndex(tree.table, beta=cfg.beta, bounds=tree.bounds)
    runs = {}
    for m in cfg.methods:
        if m == "BL":
            fn = lambda: baseline_topk(facs, k, p, idx)
        else:
            fn = (lambda z: lambda: top_k_facilities(facs, k, p, tree, use_z=z))(m == "TQ(Z)")
        res, times = _timed(fn, cfg.repetitions)
        runs[m] = ([(r.id, r.units) for r in res], times)
    keys = [v[0] for v in runs.values()]
    return {"build": build, "runs": runs, "agree": all(x == keys[0] for x in keys)}


def cmd_bench(cfg: RunConfig) -> int:
    sweep = cfg.sweep
    values = cfg.values or [None]
    if sweep is not None and sweep not in SWEEPS:
        raise SystemExit(f"--sweep must be one of {sorted(SWEEPS)}")
    tab = Table(cfg, ["param", "value", "method", "mean_s", "median_s", "speedup_vs_BL",
                      "build_s", "agree"])
    ok = True
    for v in values:
        over = {}
        k = cfg.k
        if sweep == "k":
            k = int(v)
        elif sweep is not None:
            over[{"stops": "stops", "facilities": "facilities", "users": "users"}[sweep]] = int(v)
        users, facs = generate_synthetic(cfg.synthetic(**over))
        cell = bench_cell(cfg, users, facs, k)
        ok &= cell["agree"]
        base = statistics.median(cell["runs"]["BL"][1]) if "BL" in cell["runs"] else math.nan
        for m, (_, times) in cell["runs"].items():
            med = statistics.median(times)
            tab.add(sweep or "-", v if v is not None else "-", m, statistics.fmean(times), med,
                    base / med if med > 0 else math.inf, round(cell["build"], 4), cell["agree"])
    tab.emit()
    return 0 if ok else 1


def cmd_genetic(cfg: RunConfig) -> int:
    print("genetic: unimplemented (no operator definitions are available for this optimizer)",
          file=sys.stderr)
    return 2


# ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--dataset")
    p.add_argument("--snapshot")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--beta", type=int)
    p.add_argument("--psi", type=float)
    p.add_argument("--mode", choices=[m.value for m in ServiceMode])
    p.add_argument("--k", type=int)
    p.add_argument("--kprime", type=int)
    p.add_argument("--facilities", type=int, help="facilities sampled per repetition")
    p.add_argument("--seed", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--eager", action="store_true", default=None)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.add_argument("--users", type=int)
    p.add_argument("--stops", type=int)
    p.add_argument("--n-facilities", dest="n_facilities", type=int)
    p.add_argument("--points", type=int, nargs=2)
    p.add_argument("--distribution", choices=["uniform", "clustered"])
    p.add_argument("--sweep", choices=sorted(SWEEPS))
    p.add_argument("--values", nargs="+", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tqtree", description=__doc__.splitlines()[0])
    ap.add_argument("--backend", action="store_true", help="print the kernel backend and exit")
    sub = ap.add_subparsers(dest="cmd")
    for name in ("gen", "build", "inspect", "topk", "maxkcov", "bench", "genetic"):
        _common(sub.add_parser(name))
    ing = sub.add_parser("ingest")
    ing.add_argument("--trips")
    ing.add_argument("--checkins")
    ing.add_argument("--routes")
    ing.add_argument("--columns", help="JSON column mapping")
    ing.add_argument("--delimiter", default=",")
    ing.add_argument("--planar", action="store_true", help="coordinates are already planar")
    ing.add_argument("--expected", type=int)
    ing.add_argument("--out", required=True)
    return ap


COMMANDS = {"gen": cmd_gen, "build": cmd_build, "inspect": cmd_inspect, "topk": cmd_topk,
            "maxkcov": cmd_maxkcov, "bench": cmd_bench, "genetic": cmd_genetic}


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.backend:
        print(K.backend())
        return 0
    if args.cmd is None:
        ap.print_help()
        return 2
    if args.cmd == "ingest":
        return cmd_ingest(args)
    return COMMANDS[args.cmd](load_config(args))


if __name__ == "__main__":
    sys.exit(main())
