import csv

import numpy as np
import pytest

from mphrl.errors import ConfigError, InvalidInputError
from mphrl.harness import cli
from mphrl.harness.config import (PRESETS, ExperimentConfig, apply_overrides, parse_config, preset_config,
                                  resolve_config)
from mphrl.harness.plots import band, emit_plots, read_metrics
from mphrl.harness.runner import (METRICS_COLUMNS, RunRecord, ablation_matrix, format_summary, parse_summary,
                                  run_experiment, run_relearn)

TINY = ["hyper.n_actors=2", "hyper.steps_per_actor=64", "hyper.minibatch_per_actor=32", "hyper.epochs=1",
        "hyper.sub_hidden=8", "hyper.ppo_hidden=8", "hyper.baseline_hidden=8", "hyper.gating_hidden=8",
        "hyper.cov_samples=300", "taskset.budget=128"]


def tiny(preset="maze-lifelong-5", out=None, extra=()):
    return resolve_config(preset=preset, seed=0, out=str(out) if out else None,
                          overrides=TINY + ["taskset.n_tasks=2"] + list(extra))


# -- config -----------------------------------------------------------------


def test_defaults_round_trip_through_text():
    cfg = ExperimentConfig()
    again = parse_config(cfg.to_text())
    assert again.to_text() == cfg.to_text() and again.digest() == cfg.digest()


def test_config_file_sections_and_matrix():
    text = """
[run]
method = ppo
seeds = 3, 4
[taskset]
layouts = E3 N3; N2 W2
budget = 1e4
[hyper]
sub_hidden = 32 32
[matrix]
a = ablation.coupled=true
b =
"""
    cfg = parse_config(text)
    assert cfg.run.method == "ppo" and cfg.run.seeds == (3, 4)
    assert cfg.taskset.layouts == ("E3 N3", "N2 W2") and cfg.taskset.budget == 10_000
    assert cfg.hyper.sub_hidden == (32, 32)
    assert cfg.matrix == {"a": {"ablation.coupled": "true"}, "b": {}}
    assert parse_config(cfg.to_text()).matrix == cfg.matrix


@pytest.mark.parametrize("text, field", [
    ("[run]\nmethod = sac\n", "run.method"),
    ("[taskset]\nbudget = lots\n", "taskset.budget"),
    ("[taskset]\nthreshold = 1.5\n", "taskset.threshold"),
    ("[primitives]\nnoise = loud\n", "primitives.noise"),
    ("[hyper]\nepochs = 0\n", "hyper.epochs"),
    ("[hyper]\nfoo = 1\n", "hyper.foo"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[ablation]\ncoupled = true\noracle_gating = true\n", "ablation.coupled"),
])
def test_invalid_configs_name_the_field(text, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text).validate()
    assert info.value.field == field


def test_override_precedence(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nseed = 3\n[taskset]\nn_tasks = 2\n")
    cfg = resolve_config(str(path), "maze-lifelong-5", seed=9, overrides=["taskset.n_tasks=4"])
    assert cfg.run.seed == 9 and cfg.taskset.n_tasks == 4
    with pytest.raises(ConfigError):
        resolve_config(str(tmp_path / "missing.ini"))
    with pytest.raises(ConfigError):
        resolve_config(overrides=["noequals"])


def test_every_preset_validates():
    for name in PRESETS:
        preset_config(name).validate()
    assert set(preset_config("noise-matrix").matrix) == {"standard", "noise-a", "noise-b", "noise-c", "noise-d",
                                                          "noise-e"}
    assert preset_config("noise-e").sigmas == (0.5, 0.5)
    assert apply_overrides(ExperimentConfig(), {"primitives.sigma_in": "0.3"}).sigmas == (0.3, 0.5)


# -- summaries ----------------------------------------------------------------


def test_summary_format_and_na():
    recs = [RunRecord("mphrl", "default", 0, [100, 200], [True, True]),
            RunRecord("mphrl", "default", 1, [100, 300], [True, False]),
            RunRecord("mphrl", "broken", 0, [], [], error="ValueError: x")]
    text = format_summary(recs)
    assert text == format_summary(recs)
    rows = parse_summary(text)
    assert rows[0]["task2"] == "200" and rows[0]["total"] == "300" and rows[0]["total_after_first"] == "200"
    assert rows[1]["task2"] == "N/A" and rows[1]["total"] == "N/A"
    assert rows[2]["task1"] == "N/A"


# -- CLI -------------------------------------------------------------------------


def test_dry_run_prints_config(capsys):
    assert cli.main(["run", "--preset", "maze-lifelong-5", "--seed", "4", "--dry-run"]) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.run.seed == 4 and cfg.taskset.n_tasks == 5


def test_cli_errors_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--preset", "nope", "--dry-run"]) == 2
    assert "--preset" in capsys.readouterr().err
    assert cli.main(["run", "--override", "hyper.gamma=2", "--dry-run"]) == 2
    assert "hyper.gamma" in capsys.readouterr().err
    empty = tmp_path / "m.csv"
    empty.write_text("")
    assert cli.main(["plot", str(empty), "--out", str(tmp_path / "x.svg")]) == 1
    assert not (tmp_path / "x.svg").exists()
    assert cli.main(["relearn", "--out", str(tmp_path / "none")] + sum([["--override", o] for o in TINY], [])) == 1


def test_run_writes_outputs_and_relearn(tmp_path):
    cfg = tiny(out=tmp_path)
    recs = run_experiment(cfg)
    assert recs[0].task_steps == [128, 128]
    names = {p.name for p in tmp_path.iterdir()}
    assert {"config.ini", "taskset.txt", "metrics.csv", "summary.txt", "success.svg", "task0", "task1"} <= names
    assert parse_config((tmp_path / "config.ini").read_text()).digest() == cfg.digest()
    assert apply_overrides(cfg, {"run.out": "elsewhere"}).digest() == cfg.digest()
    rows = read_metrics([tmp_path / "metrics.csv"])
    assert [int(r["cumulative_steps"]) for r in rows] == [128, 256]
    steps, original = run_relearn(cfg, n_tasks=1)
    assert steps == [128] and original == [128]
    assert "1\t128\t128" in (tmp_path / "relearn.txt").read_text()


def test_cli_run_is_deterministic(tmp_path):
    args = ["run", "--preset", "maze-lifelong-5", "--seed", "7"] + sum([["--override", o] for o in TINY], [])
    for d in ("a", "b"):
        assert cli.main(args + ["--out", str(tmp_path / d), "--override", "taskset.n_tasks=2"]) == 0
    assert (tmp_path / "a" / "summary.txt").read_bytes() == (tmp_path / "b" / "summary.txt").read_bytes()


def test_ablation_matrix_records_failures(tmp_path):
    cfg = tiny(out=tmp_path)
    matrix = {"ok": {}, "bad": {"primitives.learned": "true", "taskset.kind": "stagechain"}}
    recs = ablation_matrix(cfg, matrix, seeds=(0,))
    assert [r.variant for r in recs] == ["ok", "bad"]
    assert recs[1].error and not recs[0].error
    rows = parse_summary((tmp_path / "summary.txt").read_text())
    assert rows[1]["task1"] == "N/A"
    assert (tmp_path / "success.svg").exists()


# -- plots ------------------------------------------------------------------------


def write_metrics(path, series):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for variant, seed, pts in series:
            for steps, sr in pts:
                row = dict.fromkeys(METRICS_COLUMNS, "0")
                row.update(variant=variant, method="mphrl", seed=seed, cumulative_steps=steps, success_rate=sr)
                w.writerow([row[c] for c in METRICS_COLUMNS])


def test_band_statistics(tmp_path):
    write_metrics(tmp_path / "m.csv", [("v", 0, [(10, 0.2), (30, 0.6)]), ("v", 1, [(20, 0.4)])])
    from mphrl.harness.plots import seed_curves

    grid, mean, std = band(seed_curves(read_metrics([tmp_path / "m.csv"]))["v"])
    assert grid.tolist() == [10, 20, 30]
    np.testing.assert_allclose(mean, [0.1, 0.3, 0.5])
    np.testing.assert_allclose(std, [0.1, 0.1, 0.1])
    svg = emit_plots([tmp_path / "m.csv"], tmp_path / "p.svg").read_text()
    assert svg.startswith("<svg") and "v" in svg


def test_plot_rejects_schema_mismatch(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(InvalidInputError):
        read_metrics([p])
    header_only = tmp_path / "h.csv"
    write_metrics(header_only, [])
    with pytest.raises(InvalidInputError):
        emit_plots([header_only], tmp_path / "h.svg")
