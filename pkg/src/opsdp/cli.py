"""Command line entry point: ``opsdp run|verify|enumerate|fixtures|bench``.

The exit code is 0 iff every check performed by the command passed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from opsdp.csc import bfs_sign_regions, goldberg_bound
from opsdp.fixtures import GENERATORS, fixture, write_fixtures
from opsdp.harness import ExperimentConfig, load_config_file, merge_config, run_experiment
from opsdp.mdpfile import MdpFormatError


def _parse_set(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load_named(name: str):
    path = Path(name)
    if not path.exists() and name in GENERATORS:
        return fixture(name)
    from opsdp.mdpfile import load_mdp

    return load_mdp(path)


def cmd_run(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = _parse_set(args.set)
    for key in ("T", "n_traj", "eps_prime"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    cli = {
        "mdp": args.mdp,
        "profile": args.profile,
        "mode": args.mode,
        "seed": args.seed,
        "backend": args.backend,
        "output": args.out,
        "repeat": args.repeat,
        "workers": args.workers,
        "overrides": overrides,
    }
    config = merge_config(file_values, cli)
    result = run_experiment(config)
    ok = True
    for metrics, directory in zip(result.runs, result.directories):
        H = len(metrics.preconditioners)
        calls_ok = metrics.csc_calls <= H**2 * metrics.params["T"] ** 2
        ok &= calls_ok
        print(
            f"{metrics.mdp_name} seed={metrics.params['seed']} J_hat={metrics.J_hat:.6f} "
            f"J*={metrics.J_star:.6f} subopt={metrics.suboptimality:.6f} "
            f"episodes={metrics.episodes} csc_calls={metrics.csc_calls} -> {directory}"
        )
    if config.repeat > 1:
        agg = result.aggregate()
        print(f"mean suboptimality {agg['mean_suboptimality']:.6f} +- {agg['stderr_suboptimality']:.6f}")
    return 0 if ok else 1


def cmd_verify(args: argparse.Namespace) -> int:
    from opsdp.checks import verify_suite

    reports = []
    for name in args.mdp:
        report = verify_suite(_load_named(name), seed=args.seed, draws=args.draws, run_T=args.run_T)
        reports.append(report)
        for c in report.checks:
            shown = "" if c.value is None else f" value={c.value:.3e} bound={c.bound:.3e}"
            print(f"{report.mdp:>4} {c.status.upper():4} {c.name}{shown} {c.detail}".rstrip())
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    expected_fail = set(args.expect_fail)
    ok = all(r.ok != (r.mdp in expected_fail) for r in reports)
    return 0 if ok else 1


def read_normals(path: str) -> np.ndarray:
    """One normal per line, entries separated by commas or whitespace; '#' starts a comment."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if line:
            rows.append([float(v) for v in line.split()])
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: expected a non-empty table with equal row lengths")
    return np.array(rows)


def cmd_enumerate(args: argparse.Namespace) -> int:
    v = read_normals(args.normals)
    cells = bfs_sign_regions(v)
    n, k = v.shape
    report = {
        "n_vectors": n,
        "dim": k,
        "n_cells": len(cells),
        "bound": goldberg_bound(n, k),
        "lp_calls": cells.lp_calls,
        "cells": [
            {"signs": c.signs.tolist(), "rep": c.rep.tolist(), "margin": c.margin} for c in cells.cells
        ],
    }
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0 if len(cells) <= report["bound"] else 1


def cmd_fixtures(args: argparse.Namespace) -> int:
    if args.out:
        for path in write_fixtures(Path(args.out)):
            print(path)
    else:
        for name in GENERATORS:
            m = fixture(name)
            print(f"{name}: H={m.horizon} A={m.n_actions} d={m.feature_dim} layers={list(m.layer_sizes)}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    ok = True
    for name in args.mdp:
        config = ExperimentConfig(
            mdp=name,
            mode=args.mode,
            seed=args.seed,
            output=args.out,
            overrides={"T": args.T} if args.T else {},
        )
        start = time.perf_counter()
        result = run_experiment(config)
        elapsed = time.perf_counter() - start
        m = result.runs[0]
        H = len(m.preconditioners)
        passed = m.suboptimality <= args.tol * H and elapsed <= args.time_limit
        ok &= passed
        print(
            f"{'PASS' if passed else 'FAIL'} {name} subopt={m.suboptimality:.6f} "
            f"limit={args.tol * H:.3f} time={elapsed:.1f}s csc_calls={m.csc_calls}"
        )
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opsdp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the learner on an MDP and write logs")
    p.add_argument("--mdp", help="MDP file or fixture name")
    p.add_argument("--config", help="YAML/JSON experiment config")
    p.add_argument("--profile", choices=("desk", "theory"))
    p.add_argument("--mode", choices=("exact", "sampled"))
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=("cells", "tabular"))
    p.add_argument("--out", help="output directory (default: $OPSDP_OUTPUT_DIR or ./runs)")
    p.add_argument("--repeat", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--n-traj", dest="n_traj", type=int)
    p.add_argument("--eps-prime", dest="eps_prime", type=float)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any parameter override")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the structural check suite")
    p.add_argument("mdp", nargs="+", help="MDP files or fixture names")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--run-T", dest="run_T", type=int, default=30)
    p.add_argument("--json", help="write the report here")
    p.add_argument("--expect-fail", nargs="*", default=[], help="MDPs expected to fail (e.g. X1)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("enumerate", help="enumerate sign cells of a family of normals")
    p.add_argument("normals", help="text/CSV file, one normal per line")
    p.add_argument("--out")
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("fixtures", help="list fixtures or write them as YAML files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("bench", help="end-to-end suboptimality and runtime check")
    p.add_argument("mdp", nargs="*", default=["T1", "C3", "L1"])
    p.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int)
    p.add_argument("--tol", type=float, default=0.05, help="allowed suboptimality per layer")
    p.add_argument("--time-limit", dest="time_limit", type=float, default=60.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, MdpFormatError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
