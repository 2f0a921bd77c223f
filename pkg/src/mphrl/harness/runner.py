"""Run configured experiments and write metrics, summaries, and checkpoints."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

from ..envs.tasks import (TasksetSpec, dump_taskset, generate_maze_taskset, generate_stagechain_taskset,
                          load_taskset, make_env, maze_task, stagechain_task)
from ..lifelong import (ConvergenceRule, MetricsRow, PrimitiveConfig, init_state, relearn_from_checkpoint,
                        train_lifelong)
from ..primitives import learned_corridor_set
from .config import ExperimentConfig, apply_overrides

METRICS_COLUMNS = ("variant",) + tuple(f.name for f in fields(MetricsRow))


def build_taskset(cfg: ExperimentConfig, seed: int) -> TasksetSpec:
    t = cfg.taskset
    ts_seed = seed if t.taskset_seed < 0 else t.taskset_seed
    if t.file:
        loaded = load_taskset(t.file)
        return TasksetSpec(loaded.tasks, loaded.seed, t.threshold, max(t.budget, 1))
    if t.layouts:
        make = maze_task if t.kind == "maze" else stagechain_task
        tasks = tuple(make(text, ts_seed * 1000 + i, cfg.hyper.gamma) for i, text in enumerate(t.layouts))
        return TasksetSpec(tasks, ts_seed, t.threshold, max(t.budget, 1))
    if t.kind == "maze":
        return generate_maze_taskset(ts_seed, t.n_tasks, t.corridors, variant=t.variant, min_len=t.min_len,
                                     max_len=t.max_len, threshold=t.threshold, budget=max(t.budget, 1),
                                     gamma=cfg.hyper.gamma)
    return generate_stagechain_taskset(ts_seed, t.n_tasks, threshold=t.threshold, budget=max(t.budget, 1),
                                       gamma=cfg.hyper.gamma)


_LEARNED_CACHE: dict = {}


def primitive_config(cfg: ExperimentConfig, seed: int) -> PrimitiveConfig:
    p = cfg.primitives
    s_in, s_out = cfg.sigmas
    learned = None
    if p.learned:
        if cfg.taskset.kind != "maze":
            raise ValueError("learned primitives are only provided for maze tasks")
        if seed not in _LEARNED_CACHE:
            _LEARNED_CACHE[seed] = learned_corridor_set(seed)
        learned = _LEARNED_CACHE[seed]
    return PrimitiveConfig(p.preset, s_in, s_out, learned, tuple(p.manifest))


@dataclass
class RunRecord:
    method: str
    variant: str
    seed: int
    task_steps: list
    converged: list
    accuracy: list = field(default_factory=list)
    gate_kl: list = field(default_factory=list)
    error: str = ""

    @property
    def solved_all(self) -> bool:
        return bool(self.converged) and all(self.converged) and not self.error


def run_single(cfg: ExperimentConfig, seed: int, out_dir: str | Path | None = None, variant: str = "default",
               writer=None) -> RunRecord:
    """One lifelong run of the configured method for one seed."""
    ts = build_taskset(cfg, seed)
    env = make_env(ts.tasks[0], 0)
    prims = primitive_config(cfg, seed)
    abl = cfg.ablation
    st = init_state(seed, env.obs_dim, env.act_dim, prims.k, cfg.hyper, env.obs_scale, method=cfg.run.method,
                    coupled=abl.coupled, oracle=abl.oracle_gating, policy_scale=env.policy_obs_scale)
    rule = ConvergenceRule(cfg.taskset.threshold, cfg.taskset.budget)

    def on_metrics(row: MetricsRow):
        if writer is not None:
            writer.writerow((variant,) + tuple(_cell(v) for v in astuple(row)))

    ckpt = None
    if out_dir is not None and cfg.run.save_checkpoints:
        ckpt = Path(out_dir)
    res = train_lifelong(st, ts, rule, primitives=prims, reset_gating_flag=abl.reset_gating,
                         reset_subpolicies_flag=abl.reset_subpolicies, reset_baseline_flag=abl.reset_baseline,
                         out_dir=ckpt, on_metrics=on_metrics, config_hash=cfg.digest())
    return RunRecord(cfg.run.method, variant, seed, res.task_steps, res.converged,
                     [r.final_accuracy for r in res.results], [r.final_gate_kl for r in res.results])


def run_baseline_ppo(cfg: ExperimentConfig, seed: int, out_dir: str | Path | None = None) -> RunRecord:
    """Monolithic PPO comparator, re-initialized for every task."""
    ppo_cfg = apply_overrides(cfg, {"run.method": "ppo"})
    return run_single(ppo_cfg, seed, out_dir, variant="ppo")


def _cell(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def format_summary(records: list[RunRecord], cfg: ExperimentConfig | None = None) -> str:
    """Steps-to-threshold table, one row per (variant, seed); N/A marks a task
    whose budget ran out."""
    n = max((len(r.task_steps) for r in records), default=0)
    lines = ["# steps to threshold per task (N/A: budget exhausted)"]
    if cfg is not None:
        lines.append(f"# config {cfg.digest()} threshold={cfg.taskset.threshold} budget={cfg.taskset.budget}")
    head = ["method", "variant", "seed"] + [f"task{i + 1}" for i in range(n)] + ["total", "total_after_first"]
    lines.append("\t".join(head))
    for r in records:
        if r.error:
            cells = ["N/A"] * n + ["N/A", "N/A"]
        else:
            cells = [str(s) if c else "N/A" for s, c in zip(r.task_steps, r.converged)]
            cells += ["N/A"] * (n - len(cells))
            ok = r.solved_all
            cells.append(str(sum(r.task_steps)) if ok else "N/A")
            cells.append(str(sum(r.task_steps[1:])) if ok else "N/A")
        lines.append("\t".join([r.method, r.variant, str(r.seed)] + cells))
    return "\n".join(lines) + "\n"


def parse_summary(text: str) -> list[dict]:
    rows, head = [], None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if head is None:
            head = parts
            continue
        rows.append(dict(zip(head, parts)))
    return rows


def _open_metrics(path: Path):
    fh = path.open("w", newline="")
    w = csv.writer(fh)
    w.writerow(METRICS_COLUMNS)
    return fh, w


def run_experiment(cfg: ExperimentConfig) -> list[RunRecord]:
    """Run ``cfg`` for ``cfg.run.seed`` and write config, taskset, metrics,
    summary, checkpoints, and a success-rate plot under ``cfg.run.out``."""
    from .plots import emit_plots

    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    seed = cfg.run.seed
    (out / "taskset.txt").write_text(dump_taskset(build_taskset(cfg, seed)))
    fh, w = _open_metrics(out / "metrics.csv")
    try:
        rec = run_single(cfg, seed, out, variant=cfg.run.method, writer=w)
    finally:
        fh.close()
    (out / "summary.txt").write_text(format_summary([rec], cfg))
    emit_plots([out / "metrics.csv"], out / "success.svg")
    return [rec]


def _matrix_job(args):
    cfg, variant, seed, out = args
    run_dir = Path(out) / variant / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    fh, w = _open_metrics(run_dir / "metrics.csv")
    try:
        return run_single(cfg, seed, run_dir, variant=variant, writer=w)
    except Exception as exc:  # noqa: BLE001 - a failed variant becomes an N/A row
        return RunRecord(cfg.run.method, variant, seed, [], [], error=f"{type(exc).__name__}: {exc}")
    finally:
        fh.close()


def ablation_matrix(cfg: ExperimentConfig, matrix: dict[str, dict[str, str]] | None = None,
                    seeds: tuple[int, ...] | None = None, jobs: int = 1) -> list[RunRecord]:
    """Run every (variant, seed) pair; write per-run outputs and a combined
    summary. Runs that raise are recorded as N/A rows."""
    from .plots import emit_plots

    matrix = cfg.matrix if matrix is None else matrix
    seeds = cfg.run.seeds if seeds is None else seeds
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs_args = []
    for variant, ov in matrix.items():
        vcfg = apply_overrides(cfg, ov).validate()
        for s in seeds:
            jobs_args.append((vcfg, variant, s, str(out)))
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_matrix_job, jobs_args))
    else:
        records = [_matrix_job(a) for a in jobs_args]
    (out / "summary.txt").write_text(format_summary(records, cfg))
    csvs = [Path(a[3]) / a[1] / f"seed{a[2]}" / "metrics.csv" for a in jobs_args]
    if any(_has_rows(p) for p in csvs):
        emit_plots([p for p in csvs if _has_rows(p)], out / "success.svg", group_by="variant")
    return records


def _has_rows(path: Path) -> bool:
    if not path.exists():
        return False
    with path.open() as fh:
        return sum(1 for _ in fh) > 1


def read_manifest(directory: str | Path) -> dict[str, str]:
    text = (Path(directory) / "manifest").read_text()
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def run_relearn(cfg: ExperimentConfig, checkpoint: str | Path | None = None, n_tasks: int = 1) -> tuple[list, list]:
    """Relearn the first ``n_tasks`` tasks from a subpolicy checkpoint.

    Defaults to the last task checkpoint under ``cfg.run.out``. Returns
    (relearn steps, original steps) and writes ``relearn.txt``.
    """
    out = Path(cfg.run.out)
    seed = cfg.run.seed
    ts = build_taskset(cfg, seed)
    if checkpoint is None:
        checkpoint = out / f"task{len(ts.tasks) - 1}"
    checkpoint = Path(checkpoint)
    if not (checkpoint / "subpolicies.ckpt").exists() and not checkpoint.is_file():
        raise FileNotFoundError(f"no subpolicy checkpoint at {checkpoint}")
    ckpt_dir = checkpoint if checkpoint.is_dir() else checkpoint.parent
    original = []
    if (ckpt_dir / "manifest").exists():
        original = [int(x) for x in read_manifest(ckpt_dir).get("task_steps", "").split(",") if x]
    env = make_env(ts.tasks[0], 0)
    prims = primitive_config(cfg, seed)
    rule = ConvergenceRule(cfg.taskset.threshold, cfg.taskset.budget)
    steps = relearn_from_checkpoint(checkpoint, list(ts.prefix(n_tasks)), rule, cfg.hyper, seed,
                                    obs_dim=env.obs_dim, act_dim=env.act_dim, obs_scale=env.obs_scale,
                                    policy_scale=env.policy_obs_scale, primitives=prims, coupled=cfg.ablation.coupled)
    lines = ["# relearn steps from checkpoint vs original first-time steps", "task\toriginal\trelearn"]
    for i, s in enumerate(steps):
        orig = str(original[i]) if i < len(original) else "N/A"
        lines.append(f"{i + 1}\t{orig}\t{s}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "relearn.txt").write_text("\n".join(lines) + "\n")
    return steps, original[:len(steps)]
