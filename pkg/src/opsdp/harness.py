"""Experiment configuration, runs and their persisted logs.

Each run writes a directory holding ``records.jsonl`` (one line per
iteration), ``summary.json`` and ``records.csv``. Settings are merged with
precedence command line > config file > profile default.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from opsdp.algorithm import Params, RunMetrics, make_params, run
from opsdp.csc import CscOracle
from opsdp.fixtures import GENERATORS, fixture
from opsdp.mdp import LayeredMdp
from opsdp.mdpfile import load_mdp

OUTPUT_ENV = "OPSDP_OUTPUT_DIR"
PARAM_FIELDS = {f.name: f.type for f in fields(Params)}


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


@dataclass
class ExperimentConfig:
    mdp: str
    profile: str = "desk"
    overrides: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    backend: str = "cells"
    mode: str = "exact"
    output: str | None = None
    repeat: int = 1
    workers: int = 1

    def __post_init__(self) -> None:
        if self.profile not in ("desk", "theory"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.repeat < 1 or self.workers < 1:
            raise ValueError("repeat and workers must be positive")
        self.overrides = {k: coerce_override(k, v) for k, v in self.overrides.items()}

    def load(self) -> LayeredMdp:
        """The MDP file, or a shipped fixture when ``mdp`` names one."""
        path = Path(self.mdp)
        if not path.exists() and self.mdp in GENERATORS:
            return fixture(self.mdp)
        return load_mdp(path)

    def params(self, mdp: LayeredMdp) -> Params:
        return make_params(self.profile, mdp, **{**self.overrides, "mode": self.mode})

    def output_dir(self) -> Path:
        return Path(self.output) if self.output else default_output_dir()


def coerce_override(key: str, value: Any) -> Any:
    """Type-check one parameter override, accepting strings from the command line."""
    if key not in PARAM_FIELDS or key == "mode":
        raise ValueError(f"unknown parameter override {key!r}")
    if value is None:
        return None
    if key in ("T", "n_traj", "gates"):
        out = float(value)
        if out != int(out):
            raise ValueError(f"{key} must be an integer, got {value!r}")
        return int(out)
    try:
        return float(value)
    except (TypeError, ValueError) as err:
        raise ValueError(f"{key} must be a number, got {value!r}") from err


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a YAML or JSON config file into a plain dict."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


def merge_config(file_values: dict[str, Any], cli_values: dict[str, Any]) -> ExperimentConfig:
    """Command-line values win over file values, which win over profile defaults."""
    merged = {k: v for k, v in file_values.items() if k != "overrides"}
    overrides = dict(file_values.get("overrides") or {})
    for k, v in cli_values.items():
        if k == "overrides":
            overrides.update({kk: vv for kk, vv in (v or {}).items() if vv is not None})
        elif v is not None:
            merged[k] = v
    if "mdp" not in merged:
        raise ValueError("no MDP given")
    return ExperimentConfig(**merged, overrides=overrides)


# ---------------------------------------------------------------- persistence


def save_run(metrics: RunMetrics, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "records.jsonl", "w") as fh:
        for rec in metrics.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    (directory / "summary.json").write_text(json.dumps(metrics.summary(), sort_keys=True, indent=1))
    export_csv(metrics, directory / "records.csv")
    return directory


def load_run(directory: Path) -> RunMetrics:
    directory = Path(directory)
    summary = json.loads((directory / "summary.json").read_text())
    with open(directory / "records.jsonl") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return RunMetrics.from_parts(summary, records)


def export_csv(metrics: RunMetrics, path: Path) -> None:
    layers = sorted({h for r in metrics.records for h in r.u_norm})
    cols = ["t", "J", "J_exact", "csc_calls", "episodes", "stable", "extends"]
    cols += [f"u_norm_{h}" for h in layers] + [f"bonus_mass_{h}" for h in layers]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(cols)
        for r in metrics.records:
            out.writerow(
                [r.t, r.J, r.J_exact, r.csc_calls, r.episodes, int(r.stable), len(r.ws)]
                + [r.u_norm[h] for h in layers]
                + [r.bonus_mass[h] for h in layers]
            )


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[RunMetrics]
    directories: list[Path]

    def aggregate(self) -> dict[str, Any]:
        subs = [m.suboptimality for m in self.runs if m.suboptimality is not None]
        n = len(subs)
        mean = float(np.mean(subs)) if n else math.nan
        stderr = float(np.std(subs, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return {
            "mdp": self.config.mdp,
            "seeds": [self.config.seed + i for i in range(self.config.repeat)],
            "suboptimality": subs,
            "mean_suboptimality": mean,
            "stderr_suboptimality": stderr,
            "episodes": [m.episodes for m in self.runs],
            "csc_calls": [m.csc_calls for m in self.runs],
        }


def run_one(mdp: LayeredMdp, params: Params, seed: int, backend: str = "cells") -> RunMetrics:
    oracle = CscOracle(mdp, backend, params.gates)
    _, metrics, _ = run(mdp, params, oracle, np.random.default_rng(seed))
    metrics.params["seed"] = seed
    return metrics


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run ``repeat`` seeds (seed, seed+1, ...) and persist one log directory per run.

    Raises:
        FileNotFoundError / MdpFormatError: if the MDP cannot be loaded.
    """
    mdp = config.load()
    params = config.params(mdp)
    seeds = [config.seed + i for i in range(config.repeat)]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        runs = list(pool.map(lambda s: run_one(mdp, params, s, config.backend), seeds))
    base = config.output_dir()
    name = mdp.name or Path(config.mdp).stem
    dirs = [save_run(m, base / f"{name}-{params.mode}-seed{s}") for m, s in zip(runs, seeds)]
    result = ExperimentResult(config, runs, dirs)
    if config.repeat > 1:
        agg = result.aggregate()
        (base / f"{name}-{params.mode}-aggregate.json").write_text(json.dumps(agg, indent=1))
    (base / f"{name}-{params.mode}-config.json").write_text(json.dumps(asdict(config), indent=1, default=str))
    return result
