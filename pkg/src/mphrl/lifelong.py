"""Single-task and lifelong training loops, resets, and checkpoints."""
from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .envs.tasks import TaskSpec, TasksetSpec, make_env
from .gating import (ConstantGate, GatingController, OracleGate, gating_accuracy, gating_update,
                     kl_from_uniform)
from .numkit import AdamState, ParamBlock, derive_rng, load_params, save_params
from .policy import (Actor, BaselineNet, SubpolicySet, Subpolicy, baseline_update, collect_rollout,
                     gae_advantages, gated_ppo_update)
from .primitives import (NOISE_PRESETS, PRIMITIVE_PRESETS, PrimitiveSet, oracle_primitive_set, parse_manifest,
                         task_covariance)


@dataclass(frozen=True)
class HyperParams:
    n_actors: int = 4
    steps_per_actor: int = 512
    minibatch_per_actor: int = 256
    epochs: int = 10
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    vf_coef: float = 1.0
    ent_coef: float = 0.0
    sub_lr: float = 3e-4
    baseline_lr: float = 3e-4
    # gating rates are raised about 3x over the large-batch settings to
    # compensate for the 16x smaller desk-scale batch
    gating_lr_source: float = 3e-3
    gating_lr_target: float = 1e-2
    gating_epochs_source: int = 10
    gating_epochs_target: int = 10
    sub_hidden: tuple[int, ...] = (16, 16)
    ppo_hidden: tuple[int, ...] = (64, 64)
    baseline_hidden: tuple[int, ...] = (64, 64)
    gating_hidden: tuple[int, ...] = (64, 64)
    log_std_init: float = -0.5
    cov_samples: int = 10_000

    @property
    def batch_steps(self) -> int:
        return self.n_actors * self.steps_per_actor

    @property
    def minibatch(self) -> int:
        return self.n_actors * self.minibatch_per_actor


@dataclass(frozen=True)
class ConvergenceRule:
    threshold: float = 0.8
    budget: int = 2_000_000

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")


@dataclass(frozen=True)
class PrimitiveConfig:
    """Which primitives to build for each task."""

    preset: str = "standard-4"
    sigma_in: float = 0.0
    sigma_out: float = 0.5
    learned: PrimitiveSet | None = None
    manifest: tuple[str, ...] = ()

    @classmethod
    def noise(cls, name: str, preset: str = "standard-4") -> "PrimitiveConfig":
        s_in, s_out = NOISE_PRESETS[name]
        return cls(preset, s_in, s_out)

    def build(self, env, seed: int, cov_samples: int) -> PrimitiveSet:
        if self.learned is not None:
            return self.learned
        cov = task_covariance(env, cov_samples, seed)
        if self.manifest:
            return parse_manifest(self.manifest, cov, seed)
        return oracle_primitive_set(self.preset, cov, self.sigma_in, self.sigma_out, seed)

    @property
    def k(self) -> int:
        if self.learned is not None:
            return len(self.learned)
        if self.manifest:
            return len(self.manifest)
        return len(PRIMITIVE_PRESETS[self.preset])


@dataclass
class MetricsRow:
    method: str
    seed: int
    task: int
    iteration: int
    steps: int
    cumulative_steps: int
    mean_reward: float
    success_rate: float
    gating_ce: float
    gating_accuracy: float
    gating_entropy: float
    usage: str
    wall_clock: float


@dataclass
class TrainState:
    seed: int
    obs_dim: int
    act_dim: int
    k: int
    hyper: HyperParams
    obs_scale: np.ndarray
    policy_scale: np.ndarray
    method: str = "mphrl"
    coupled: bool = False
    oracle: bool = False
    subpolicies: SubpolicySet | None = None
    sub_opts: list = field(default_factory=list)
    gating: object = None
    gating_opt: AdamState | None = None
    baseline: BaselineNet | None = None
    baseline_opt: AdamState | None = None
    task_index: int = 0
    cumulative_steps: int = 0
    task_steps: list = field(default_factory=list)
    success_window: list = field(default_factory=list)
    ppo_rng: np.random.Generator | None = None
    baseline_rng: np.random.Generator | None = None
    gating_rng: np.random.Generator | None = None

    @property
    def learned_gating(self) -> bool:
        return isinstance(self.gating, GatingController)


def init_state(seed: int, obs_dim: int, act_dim: int, k: int, hyper: HyperParams,
               obs_scale: np.ndarray | None = None, method: str = "mphrl", coupled: bool = False,
               oracle: bool = False, policy_scale: np.ndarray | None = None) -> TrainState:
    """Fresh networks and optimizers. ``method`` is "mphrl" or "ppo".

    ``obs_scale`` normalizes inputs of the gating controller and baseline;
    ``policy_scale`` (default: ``obs_scale``) those of the subpolicies. The
    single PPO policy has no controller to locate it and always uses
    ``obs_scale``.
    """
    scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, float)
    pscale = scale if policy_scale is None else np.asarray(policy_scale, float)
    if method == "ppo":
        k = 1
        pscale = scale
    st = TrainState(seed, obs_dim, act_dim, k, hyper, scale, pscale, method, coupled, oracle)
    st.ppo_rng = derive_rng(seed, "ppo-update")
    st.baseline_rng = derive_rng(seed, "baseline-update")
    st.gating_rng = derive_rng(seed, "gating-update")
    reset_subpolicies(st, 0)
    reset_gating(st, 0)
    reset_baseline(st, 0)
    return st


def reset_subpolicies(st: TrainState, task: int) -> None:
    hidden = st.hyper.ppo_hidden if st.method == "ppo" else st.hyper.sub_hidden
    rng = derive_rng(st.seed, "subpolicies", task)
    st.subpolicies = SubpolicySet.create(st.obs_dim, st.act_dim, st.k, rng, hidden, st.policy_scale,
                                         st.hyper.log_std_init)
    st.sub_opts = [AdamState.zeros_like(s.params, st.hyper.sub_lr) for s in st.subpolicies.subs]


def reset_gating(st: TrainState, task: int, source: bool | None = None) -> None:
    if st.method == "ppo":
        st.gating, st.gating_opt = ConstantGate(), None
        return
    if st.oracle:
        st.gating, st.gating_opt = None, None  # built per task from the primitive tags
        return
    rng = derive_rng(st.seed, "gating", task)
    st.gating = GatingController.create(st.obs_dim, st.k, rng, st.hyper.gating_hidden, st.obs_scale)
    is_source = task == 0 if source is None else source
    lr = st.hyper.gating_lr_source if is_source else st.hyper.gating_lr_target
    st.gating_opt = AdamState.zeros_like(st.gating.params, lr)


def reset_baseline(st: TrainState, task: int) -> None:
    rng = derive_rng(st.seed, "baseline", task)
    st.baseline = BaselineNet(st.obs_dim, rng, st.hyper.baseline_hidden, st.obs_scale)
    st.baseline_opt = AdamState.zeros_like(st.baseline.params, st.hyper.baseline_lr)


@dataclass
class TaskResult:
    steps: int
    converged: bool
    iterations: int
    final_success: float = 0.0
    final_accuracy: float = float("nan")
    final_gate_kl: float = float("nan")
    final_usage: list = field(default_factory=list)


def _make_actors(task: TaskSpec, st: TrainState, phase: str) -> list[Actor]:
    actors = []
    for i in range(st.hyper.n_actors):
        env = make_env(task, int(derive_rng(st.seed, "env", phase, task.seed, i).integers(2 ** 31)))
        actors.append(Actor(env, derive_rng(st.seed, "actor", phase, task.seed, i), i))
    return actors


def train_single_task(st: TrainState, task: TaskSpec, rule: ConvergenceRule, *,
                      primitives: PrimitiveConfig | PrimitiveSet | None = None, source: bool | None = None,
                      phase: str = "train", on_metrics: Callable[[MetricsRow], None] | None = None) -> TaskResult:
    """Collect, estimate advantages, update subpolicies, baseline, then gating,
    until the latest batch's success rate reaches the threshold or the step
    budget runs out."""
    hp = st.hyper
    is_source = (st.task_index == 0) if source is None else source
    actors = _make_actors(task, st, f"{phase}-{st.task_index}")
    env0 = actors[0].env
    prim_set = None
    if st.method != "ppo":
        if isinstance(primitives, PrimitiveSet):
            prim_set = primitives
        else:
            cfg = primitives or PrimitiveConfig()
            prim_set = cfg.build(env0, int(derive_rng(st.seed, "primitives", task.seed).integers(2 ** 31)),
                                 hp.cov_samples)
    gate = st.gating
    if st.oracle:
        gate = OracleGate([t.replace("touch:", "first:").replace("corridor:", "first:")
                           for t in prim_set.eval_tags])
    epochs_g = hp.gating_epochs_source if is_source else hp.gating_epochs_target
    steps = 0
    it = 0
    result = TaskResult(0, False, 0)
    t0 = time.perf_counter()
    while steps < rule.budget:
        counted = sum(a.env.step_calls for a in actors)
        ro = collect_rollout(actors, st.subpolicies, gate, prim_set if st.learned_gating else None,
                             st.baseline, hp.steps_per_actor)
        assert sum(a.env.step_calls for a in actors) - counted == len(ro)
        steps += len(ro)
        st.cumulative_steps += len(ro)
        it += 1
        sr = ro.success_rate
        st.success_window = list(ro.episode_success)
        membership = prim_set.membership(ro.tags) if prim_set is not None else None
        acc = gating_accuracy(ro.gate, membership) if membership is not None else float("nan")
        result = TaskResult(steps, False, it, sr, acc, kl_from_uniform(ro.gate),
                            list(np.bincount(np.argmax(ro.gate, axis=1), minlength=ro.gate.shape[1]) / len(ro)))
        ce, ent = float("nan"), float("nan")
        if sr >= rule.threshold:
            result.converged = True
        else:
            buf = gae_advantages(ro.rewards, ro.values, ro.next_values, ro.terminal, ro.ends, task.gamma, hp.lam)
            gated_ppo_update(st.subpolicies, st.sub_opts, ro.obs, ro.actions, ro.sub_logp, ro.gate, buf.advantages,
                             clip_eps=hp.clip_eps, epochs=hp.epochs, minibatch=hp.minibatch, rng=st.ppo_rng,
                             ent_coef=hp.ent_coef)
            baseline_update(st.baseline, st.baseline_opt, ro.obs, buf.returns, epochs=hp.epochs,
                            minibatch=hp.minibatch, rng=st.baseline_rng, vf_coef=hp.vf_coef)
            if st.learned_gating:
                diag = gating_update(st.gating, st.gating_opt, ro.obs, ro.gate, ro.prim_ll, epochs=epochs_g,
                                     minibatch=hp.minibatch, rng=st.gating_rng, coupled=st.coupled,
                                     subpolicy_log_probs=ro.sub_logp if st.coupled else None,
                                     membership=membership)
                ce, ent = diag.loss, diag.target_entropy
        if on_metrics is not None:
            on_metrics(MetricsRow(st.method, st.seed, st.task_index, it, steps, st.cumulative_steps,
                                  ro.mean_episode_return, sr, ce, acc, ent,
                                  ";".join(f"{u:.3f}" for u in result.final_usage),
                                  time.perf_counter() - t0))
        if result.converged:
            break
    result.steps = steps
    return result


@dataclass
class LifelongResult:
    task_steps: list
    converged: list
    results: list


def train_lifelong(st: TrainState, taskset: TasksetSpec | list[TaskSpec], rule: ConvergenceRule, *,
                   primitives: PrimitiveConfig | PrimitiveSet | None = None, reset_gating_flag: bool = True,
                   reset_subpolicies_flag: bool = False, reset_baseline_flag: bool = True,
                   out_dir: str | Path | None = None, on_metrics: Callable[[MetricsRow], None] | None = None,
                   config_hash: str = "") -> LifelongResult:
    """Train on each task in order. Subpolicies carry over unless reset;
    the gating controller and baseline are re-initialized per task by
    default."""
    tasks = taskset.tasks if isinstance(taskset, TasksetSpec) else list(taskset)
    out = LifelongResult([], [], [])
    for i, task in enumerate(tasks):
        st.task_index = i
        if st.method == "ppo" or reset_subpolicies_flag:
            if i > 0:
                reset_subpolicies(st, i)
        if reset_gating_flag or st.method == "ppo":
            reset_gating(st, i)
        elif i == 1 and st.gating_opt is not None:
            st.gating_opt.lr = st.hyper.gating_lr_target
        if reset_baseline_flag or st.method == "ppo":
            reset_baseline(st, i)
        res = train_single_task(st, task, rule, primitives=primitives, source=(i == 0), on_metrics=on_metrics)
        st.task_steps.append(res.steps)
        out.task_steps.append(res.steps)
        out.converged.append(res.converged)
        out.results.append(res)
        if out_dir is not None:
            save_checkpoint(st, Path(out_dir) / f"task{i}", config_hash)
    return out


# --------------------------------------------------------------------------
# checkpoints


def _sub_blocks(subs: SubpolicySet) -> dict[str, ParamBlock]:
    blocks = {}
    for k, s in enumerate(subs.subs):
        blocks[f"subpolicy.{k}"] = ParamBlock("mlp", s.mlp.layer_sizes, s.params[:s.n_mlp])
        blocks[f"subpolicy.{k}.log_std"] = ParamBlock("vec", (s.log_std.size,), s.log_std)
    return blocks


def save_checkpoint(st: TrainState, directory: str | Path, config_hash: str = "") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_params(d / "subpolicies.ckpt", _sub_blocks(st.subpolicies))
    if isinstance(st.gating, GatingController):
        save_params(d / "gating.ckpt", {"gating": ParamBlock("mlp", st.gating.net.layer_sizes, st.gating.params)})
    save_params(d / "baseline.ckpt", {"baseline": ParamBlock("mlp", st.baseline.net.layer_sizes, st.baseline.params)})
    lines = [f"config_hash={config_hash}", f"seed={st.seed}", f"method={st.method}",
             f"cumulative_steps={st.cumulative_steps}",
             "task_steps=" + ",".join(str(s) for s in st.task_steps)]
    (d / "manifest").write_text("\n".join(lines) + "\n")
    return d


def load_subpolicies(path: str | Path, obs_scale: np.ndarray) -> SubpolicySet:
    p = Path(path)
    if p.is_dir():
        p = p / "subpolicies.ckpt"
    blocks = load_params(p)
    subs = []
    k = 0
    while f"subpolicy.{k}" in blocks:
        mlp_blk = blocks[f"subpolicy.{k}"]
        ls = blocks[f"subpolicy.{k}.log_std"].data
        subs.append(Subpolicy(mlp_blk.shape, obs_scale, params=np.concatenate([mlp_blk.data, ls])))
        k += 1
    return SubpolicySet(subs)


def relearn_from_checkpoint(checkpoint: str | Path, tasks: list[TaskSpec], rule: ConvergenceRule,
                            hyper: HyperParams, seed: int, *, obs_dim: int, act_dim: int, obs_scale: np.ndarray,
                            policy_scale: np.ndarray | None = None,
                            primitives: PrimitiveConfig | PrimitiveSet | None = None, coupled: bool = False,
                            on_metrics: Callable[[MetricsRow], None] | None = None) -> list[int]:
    """Restore subpolicies from ``checkpoint`` before each task, reset gating
    and baseline, and retrain. Returns steps used per task."""
    pscale = obs_scale if policy_scale is None else policy_scale
    subs = load_subpolicies(checkpoint, pscale)
    steps = []
    for i, task in enumerate(tasks):
        st = init_state(seed, obs_dim, act_dim, len(subs), hyper, obs_scale, coupled=coupled,
                        policy_scale=pscale)
        st.subpolicies = subs.copy()
        st.task_index = i
        reset_gating(st, i, source=False)
        reset_baseline(st, i)
        res = train_single_task(st, task, rule, primitives=primitives, source=False, phase="relearn",
                                on_metrics=on_metrics)
        steps.append(res.steps)
    return steps


def oracle_gating_mode(st: TrainState, task: TaskSpec, rule: ConvergenceRule, *,
                       primitives: PrimitiveConfig | None = None,
                       on_metrics: Callable[[MetricsRow], None] | None = None) -> TaskResult:
    """train_single_task with the gate fixed to the ground-truth region one-hot."""
    st.oracle = True
    st.gating = None
    return train_single_task(st, task, rule, primitives=primitives, on_metrics=on_metrics)


def params_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def hyper_dict(h: HyperParams) -> dict:
    return asdict(h)
