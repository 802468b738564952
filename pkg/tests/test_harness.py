import json

import numpy as np
import pytest
import yaml

from opsdp.cli import main, read_normals
from opsdp.harness import (
    OUTPUT_ENV,
    ExperimentConfig,
    coerce_override,
    load_config_file,
    load_run,
    merge_config,
    run_experiment,
)


def test_cli_value_beats_file_value_beats_profile(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"mdp": "T1", "seed": 3, "overrides": {"T": 7, "mu": 0.5}}))
    merged = merge_config(load_config_file(cfg), {"seed": 9, "mode": None, "overrides": {"T": "4"}})
    assert merged.seed == 9
    assert merged.overrides == {"T": 4, "mu": 0.5}
    p = merged.params(merged.load())
    assert (p.T, p.mu) == (4, 0.5)
    # untouched keys keep the profile default
    assert p.nu == ExperimentConfig("T1").params(merged.load()).nu


def test_json_config_is_accepted(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mdp": "C3", "mode": "sampled"}))
    assert merge_config(load_config_file(cfg), {}).mode == "sampled"


def test_config_without_mdp_is_rejected():
    with pytest.raises(ValueError):
        merge_config({}, {"seed": 1})


def test_non_mapping_config_is_rejected(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError):
        load_config_file(cfg)


@pytest.mark.parametrize(
    "key,value",
    [("T", "2.5"), ("n_traj", "many"), ("mu", "x"), ("nonsense", 1), ("mode", "exact")],
)
def test_bad_override_is_rejected(key, value):
    with pytest.raises(ValueError):
        coerce_override(key, value)


def test_override_strings_are_coerced():
    assert coerce_override("T", "12") == 12
    assert coerce_override("n_traj", "2e4") == 20000
    assert coerce_override("eps_prime", "0.25") == 0.25


def test_bad_profile_and_repeat():
    with pytest.raises(ValueError):
        ExperimentConfig("T1", profile="laptop")
    with pytest.raises(ValueError):
        ExperimentConfig("T1", repeat=0)


def test_log_round_trip(tmp_path):
    res = run_experiment(ExperimentConfig("T1", overrides={"T": 4}, output=str(tmp_path)))
    (metrics,), (directory,) = res.runs, res.directories
    assert load_run(directory) == metrics
    lines = (directory / "records.jsonl").read_text().splitlines()
    assert len(lines) == 4
    header = (directory / "records.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["t", "J", "J_exact"]
    assert "u_norm_1" in header


def test_same_seed_gives_identical_logs(tmp_path):
    files = []
    for sub in ("a", "b"):
        cfg = ExperimentConfig("T1", mode="sampled", seed=5, overrides={"T": 3, "n_traj": 200}, output=str(tmp_path / sub))
        (directory,) = run_experiment(cfg).directories
        files.append([(directory / f).read_bytes() for f in ("records.jsonl", "summary.json", "records.csv")])
    assert files[0] == files[1]


def test_different_seeds_differ_in_sampled_mode(tmp_path):
    outs = []
    for seed in (0, 1):
        cfg = ExperimentConfig("T1", mode="sampled", seed=seed, overrides={"T": 2, "n_traj": 100}, output=str(tmp_path))
        outs.append(run_experiment(cfg).runs[0].records[0].J)
    assert outs[0] != outs[1]


def test_repeat_aggregates_mean_and_stderr(tmp_path):
    cfg = ExperimentConfig(
        "T1", mode="sampled", repeat=3, workers=2, overrides={"T": 2, "n_traj": 100}, output=str(tmp_path)
    )
    res = run_experiment(cfg)
    agg = res.aggregate()
    subs = [m.suboptimality for m in res.runs]
    assert agg["seeds"] == [0, 1, 2]
    assert agg["mean_suboptimality"] == pytest.approx(np.mean(subs))
    assert agg["stderr_suboptimality"] == pytest.approx(np.std(subs, ddof=1) / np.sqrt(3))
    assert json.loads((tmp_path / "T1-sampled-aggregate.json").read_text())["seeds"] == [0, 1, 2]
    # threads must not change results: compare with a serial rerun of seed 1
    serial = run_experiment(
        ExperimentConfig("T1", mode="sampled", seed=1, overrides={"T": 2, "n_traj": 100}, output=str(tmp_path / "s"))
    )
    assert serial.runs[0] == res.runs[1]


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    (directory,) = run_experiment(ExperimentConfig("T1", overrides={"T": 2})).directories
    assert directory.parent == tmp_path / "env"


def test_missing_mdp_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_experiment(ExperimentConfig(str(tmp_path / "nope.yaml")))
    assert main(["run", "--mdp", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2


def test_cli_run(tmp_path, capsys):
    code = main(["run", "--mdp", "T1", "--T", "3", "--out", str(tmp_path), "--set", "mu=0.01"])
    assert code == 0
    assert "subopt=" in capsys.readouterr().out
    assert (tmp_path / "T1-exact-seed0" / "summary.json").exists()


def test_cli_bad_set_is_an_error(tmp_path):
    assert main(["run", "--mdp", "T1", "--out", str(tmp_path), "--set", "T"]) == 2
    assert main(["run", "--mdp", "T1", "--out", str(tmp_path), "--set", "T=half"]) == 2


def test_cli_verify(tmp_path):
    out = tmp_path / "report.json"
    assert main(["verify", "T1", "--draws", "10", "--run-T", "5", "--json", str(out)]) == 0
    assert json.loads(out.read_text())[0]["ok"] is True


def test_cli_verify_flags_unrealizable_mdp():
    assert main(["verify", "X1", "--draws", "5", "--run-T", "3"]) == 1
    assert main(["verify", "X1", "--draws", "5", "--run-T", "3", "--expect-fail", "X1"]) == 0


def test_cli_enumerate(tmp_path):
    normals = tmp_path / "v.txt"
    normals.write_text("# two lines in the plane\n1, 0\n0 1\n")
    out = tmp_path / "cells.json"
    assert main(["enumerate", str(normals), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["n_cells"] == 4
    assert {tuple(c["signs"]) for c in report["cells"]} == {(1, 1), (1, -1), (-1, 1), (-1, -1)}


def test_read_normals_rejects_ragged(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("1 0\n1\n")
    with pytest.raises(ValueError):
        read_normals(path)


def test_cli_fixtures(tmp_path, capsys):
    assert main(["fixtures"]) == 0
    assert "T1:" in capsys.readouterr().out
    assert main(["fixtures", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c3.yaml", "l1.yaml", "p1.yaml", "t1.yaml", "x1.yaml"]


def test_fixture_file_round_trips_through_run(tmp_path):
    main(["fixtures", "--out", str(tmp_path)])
    path = next(p for p in tmp_path.iterdir() if p.name.lower().startswith("t1"))
    by_file = run_experiment(ExperimentConfig(str(path), overrides={"T": 3}, output=str(tmp_path / "a"))).runs[0]
    by_name = run_experiment(ExperimentConfig("T1", overrides={"T": 3}, output=str(tmp_path / "b"))).runs[0]
    assert by_file.J_hat == by_name.J_hat
    assert by_file.J_star == by_name.J_star
