"""Gaussian subpolicies, their gated mixture, rollout collection, GAE, and
the gated clipped-PPO and value-baseline updates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .gating import ConstantGate, OracleGate
from .numkit import (LOG_2PI, LOG_STD_MAX, LOG_STD_MIN, AdamState, Mlp, adam_step, diag_gaussian_logp,
                     logsumexp, param_count, sample_index)
from .primitives import TransitionBatch


class Subpolicy:
    """Gaussian policy: MLP mean plus a state-independent log_std vector.

    ``params`` is one flat vector holding the MLP weights followed by
    log_std; the MLP and log_std are views into it.
    """

    def __init__(self, layer_sizes: Sequence[int], obs_scale: np.ndarray, rng: np.random.Generator | None = None,
                 log_std_init: float = -0.5, params: np.ndarray | None = None):
        n_mlp = param_count(layer_sizes)
        act_dim = layer_sizes[-1]
        if params is None:
            params = np.zeros(n_mlp + act_dim)
            self.params = params
            self.mlp = Mlp(layer_sizes, rng, output_scale=0.01, buffer=params[:n_mlp])
            params[n_mlp:] = log_std_init
        else:
            self.params = params
            self.mlp = Mlp(layer_sizes, buffer=params[:n_mlp])
        self.log_std = params[n_mlp:]
        self.obs_scale = obs_scale
        self.n_mlp = n_mlp

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.mlp.forward(obs * self.obs_scale)

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return diag_gaussian_logp(self.mean(obs), self.log_std, actions)

    def copy(self) -> "Subpolicy":
        return Subpolicy(self.mlp.layer_sizes, self.obs_scale, params=self.params.copy())


class SubpolicySet:
    def __init__(self, subs: list[Subpolicy]):
        if not subs:
            raise InvalidInputError("need at least one subpolicy")
        self.subs = subs

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, k: int, rng: np.random.Generator, hidden=(16, 16),
               obs_scale: np.ndarray | None = None, log_std_init: float = -0.5) -> "SubpolicySet":
        scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, float)
        return cls([Subpolicy((obs_dim, *hidden, act_dim), scale, rng, log_std_init) for _ in range(k)])

    def __len__(self) -> int:
        return len(self.subs)

    @property
    def act_dim(self) -> int:
        return self.subs[0].mlp.out_dim

    def means(self, obs: np.ndarray) -> np.ndarray:
        return np.stack([s.mean(obs) for s in self.subs])

    def log_probs(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """(n, K) per-subpolicy log densities."""
        return np.stack([s.log_prob(obs, actions) for s in self.subs], axis=-1)

    def copy(self) -> "SubpolicySet":
        return SubpolicySet([s.copy() for s in self.subs])


class BaselineNet:
    def __init__(self, obs_dim: int, rng: np.random.Generator | None, hidden=(64, 64),
                 obs_scale: np.ndarray | None = None, net: Mlp | None = None):
        self.net = net if net is not None else Mlp((obs_dim, *hidden, 1), rng, output_scale=1.0)
        self.obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, float)

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def values(self, obs: np.ndarray) -> np.ndarray:
        return self.net.forward(obs * self.obs_scale)[:, 0]


# --------------------------------------------------------------------------
# mixture policy


def mixture_density(subpolicies: SubpolicySet, gating_probs: np.ndarray, obs: np.ndarray, actions: np.ndarray):
    """log pi(a|s) = log sum_k g_k pi_k(a|s), plus the per-component log-probs.

    Works on a single (obs, action) pair or on batches.
    """
    single = np.asarray(obs).ndim == 1
    obs2 = np.atleast_2d(obs)
    act2 = np.atleast_2d(actions)
    g = np.atleast_2d(gating_probs)
    comp = subpolicies.log_probs(obs2, act2)
    with np.errstate(divide="ignore"):
        mix = logsumexp(np.log(g) + comp, axis=-1)
    if single:
        return float(mix[0]), comp[0]
    return mix, comp


def sample_action(subpolicies: SubpolicySet, gating_probs: np.ndarray, obs: np.ndarray, rng: np.random.Generator):
    """Exact mixture sample: k ~ Categorical(gate), then a ~ pi_k(.|s).

    Returns (action, k, mixture log-prob, per-component log-probs).
    """
    k = sample_index(np.asarray(gating_probs), rng.random())
    sub = subpolicies.subs[k]
    mean = sub.mean(np.asarray(obs)[None, :])[0]
    a = mean + np.exp(sub.log_std) * rng.standard_normal(mean.shape)
    mix, comp = mixture_density(subpolicies, gating_probs, obs, a)
    return a, k, mix, comp


# --------------------------------------------------------------------------
# rollouts


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    reward: float
    done: bool
    gate: np.ndarray
    chosen: int
    mix_logp: float
    sub_logp: np.ndarray
    prim_ll: np.ndarray
    value: float
    region: frozenset


@dataclass
class Rollout:
    """A batch of transitions stored column-wise, actor segments back to back.

    ``terminal`` marks goal termination (no bootstrap); ``ends`` marks any
    episode boundary, including horizon truncation and the end of an
    actor's segment.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    ends: np.ndarray
    gate: np.ndarray
    chosen: np.ndarray
    sub_logp: np.ndarray
    mix_logp: np.ndarray
    prim_ll: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    tags: list
    actor: np.ndarray
    episode: np.ndarray
    step: np.ndarray
    episode_lengths: list = field(default_factory=list)
    episode_success: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def total_steps(self) -> int:
        return len(self)

    @property
    def success_rate(self) -> float:
        if not self.episode_success:
            return 0.0
        return float(np.mean(self.episode_success))

    @property
    def mean_episode_return(self) -> float:
        return float(np.mean(self.episode_returns)) if self.episode_returns else float("nan")

    def transition(self, i: int) -> Transition:
        return Transition(self.obs[i], self.actions[i], self.next_obs[i], float(self.rewards[i]),
                          bool(self.terminal[i]), self.gate[i], int(self.chosen[i]), float(self.mix_logp[i]),
                          self.sub_logp[i], self.prim_ll[i], float(self.values[i]), self.tags[i])

    def episodes(self) -> list[list[Transition]]:
        out, cur = [], []
        for i in range(len(self)):
            cur.append(self.transition(i))
            if self.ends[i]:
                out.append(cur)
                cur = []
        return out

    def batch(self) -> TransitionBatch:
        return TransitionBatch(self.obs, self.actions, self.next_obs, self.tags, self.actor, self.episode, self.step)


class Actor:
    """One environment plus its private random stream."""

    def __init__(self, env, rng: np.random.Generator, actor_id: int):
        self.env = env
        self.rng = rng
        self.actor_id = actor_id
        self.episode = 0
        self.ep_return = 0.0
        self.obs = env.reset()


def collect_rollout(actors: list[Actor], subpolicies: SubpolicySet, gate, primitives, baseline: BaselineNet,
                    steps_per_actor: int) -> Rollout:
    """Step every actor ``steps_per_actor`` times with the gated mixture policy.

    Actors advance in lockstep; each samples with its own generator, so the
    result does not depend on how many actors share the call.
    """
    if not actors:
        raise InvalidInputError("need at least one actor")
    n_act = len(actors)
    act_dim = subpolicies.act_dim
    oracle = isinstance(gate, OracleGate)
    cols = {k: [[] for _ in range(n_act)] for k in
            ("obs", "act", "rew", "next", "term", "ends", "gate", "chosen", "tags", "episode", "step")}
    ep_len, ep_succ, ep_ret = [], [], []
    std = np.stack([np.exp(s.log_std) for s in subpolicies.subs])
    for t in range(steps_per_actor):
        obs_b = np.stack([a.obs for a in actors])
        tags_b = [a.env.tags() for a in actors]
        if oracle:
            g = gate.probs_from_tags(tags_b)
        else:
            g = gate.probs(obs_b)
        means = subpolicies.means(obs_b)
        for i, actor in enumerate(actors):
            k = sample_index(g[i], actor.rng.random())
            a = means[k, i] + std[k] * actor.rng.standard_normal(act_dim)
            ep_step = actor.env.state.steps_elapsed
            nxt, r, done, info = actor.env.step(a)
            c = cols
            c["obs"][i].append(actor.obs)
            c["act"][i].append(a)
            c["rew"][i].append(r)
            c["next"][i].append(nxt)
            c["term"][i].append(bool(info["terminal"]))
            c["ends"][i].append(bool(done) or t == steps_per_actor - 1)
            c["gate"][i].append(g[i])
            c["chosen"][i].append(k)
            c["tags"][i].append(tags_b[i])
            c["episode"][i].append(actor.episode)
            c["step"][i].append(ep_step)
            actor.ep_return += r
            if done:
                ep_len.append(ep_step + 1)
                ep_succ.append(bool(info["success"]))
                ep_ret.append(actor.ep_return)
                actor.ep_return = 0.0
                actor.episode += 1
                actor.obs = actor.env.reset()
            else:
                actor.obs = nxt

    def flat(key):
        return [x for seg in cols[key] for x in seg]

    obs = np.array(flat("obs"))
    actions = np.array(flat("act"))
    next_obs = np.array(flat("next"))
    gate_arr = np.array(flat("gate"))
    sub_logp = subpolicies.log_probs(obs, actions)
    with np.errstate(divide="ignore"):
        mix_logp = logsumexp(np.log(gate_arr) + sub_logp, axis=-1)
    actor_ids = np.repeat([a.actor_id for a in actors], steps_per_actor)
    ro = Rollout(
        obs=obs, actions=actions, rewards=np.array(flat("rew"), dtype=np.float64), next_obs=next_obs,
        terminal=np.array(flat("term"), dtype=bool), ends=np.array(flat("ends"), dtype=bool),
        gate=gate_arr, chosen=np.array(flat("chosen"), dtype=np.int64), sub_logp=sub_logp, mix_logp=mix_logp,
        prim_ll=np.zeros((obs.shape[0], 0)), values=baseline.values(obs), next_values=baseline.values(next_obs),
        tags=flat("tags"), actor=actor_ids, episode=np.array(flat("episode"), dtype=np.int64),
        step=np.array(flat("step"), dtype=np.int64), episode_lengths=ep_len, episode_success=ep_succ,
        episode_returns=ep_ret,
    )
    if primitives is not None and len(primitives) > 0:
        ro.prim_ll = primitives.log_likelihoods(ro.batch())
    return ro


# --------------------------------------------------------------------------
# advantages


@dataclass
class AdvantageBuffer:
    advantages: np.ndarray  # normalized
    returns: np.ndarray
    raw: np.ndarray
    mean: float
    std: float


def gae_advantages(rewards: np.ndarray, values: np.ndarray, next_values: np.ndarray, terminal: np.ndarray,
                   ends: np.ndarray, gamma: float, lam: float, normalize: bool = True) -> AdvantageBuffer:
    """Generalized advantage estimation over back-to-back episodes.

    delta_t = r_t + gamma V(s_{t+1}) (1 - terminal_t) - V(s_t); the
    exponentially weighted sum restarts at every ``ends`` boundary.
    """
    n = len(rewards)
    if not (len(values) == len(next_values) == len(terminal) == len(ends) == n):
        raise InvalidInputError("rollout columns have mismatched lengths")
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        if ends[t]:
            last = 0.0
        delta = rewards[t] + gamma * next_values[t] * (0.0 if terminal[t] else 1.0) - values[t]
        last = delta + gamma * lam * last
        adv[t] = last
    returns = adv + values
    mean, std = float(adv.mean()), float(adv.std())
    normed = (adv - mean) / (std + 1e-8) if normalize else adv.copy()
    return AdvantageBuffer(normed, returns, adv, mean, std)


# --------------------------------------------------------------------------
# updates


def ppo_objective(sub: Subpolicy, obs: np.ndarray, actions: np.ndarray, old_logp: np.ndarray, gate: np.ndarray,
                  adv: np.ndarray, clip_eps: float, ent_coef: float = 0.0):
    """Gated clipped surrogate for one subpolicy and its gradient.

    objective = mean_i g_i min(r_i A_i, clip(r_i, 1-eps, 1+eps) A_i)
                + ent_coef * mean_i(g_i) * H(pi_k)
    Returns (objective, d objective / d params, clip fraction).
    """
    n = obs.shape[0]
    mean = sub.mean(obs)
    log_std = sub.log_std
    inv_std = np.exp(-log_std)
    z = (actions - mean) * inv_std
    logp = np.sum(-log_std - 0.5 * LOG_2PI - 0.5 * z * z, axis=1)
    ratio = np.exp(logp - old_logp)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    active = surr1 <= surr2
    objective = float(np.sum(gate * np.minimum(surr1, surr2)) / n)
    g_mean = float(np.sum(gate) / n)
    if ent_coef:
        objective += ent_coef * g_mean * float(np.sum(log_std) + 0.5 * log_std.size * (LOG_2PI + 1.0))
    dlogp = np.where(active, gate * adv * ratio, 0.0) / n
    dmean = dlogp[:, None] * z * inv_std
    dlog_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) + ent_coef * g_mean
    gmlp, _ = sub.mlp.backward(dmean)
    grad = np.concatenate([gmlp, dlog_std])
    clip_frac = float(np.mean(~active)) if n else 0.0
    return objective, grad, clip_frac


@dataclass
class PPODiagnostics:
    objective: float
    clip_fraction: float


def gated_ppo_update(subpolicies: SubpolicySet, opts: list[AdamState], obs: np.ndarray, actions: np.ndarray,
                     old_sub_logp: np.ndarray, gate: np.ndarray, adv: np.ndarray, *, clip_eps: float, epochs: int,
                     minibatch: int, rng: np.random.Generator, ent_coef: float = 0.0) -> PPODiagnostics:
    """Adam ascent on each subpolicy's gated clipped surrogate.

    ``gate`` and ``old_sub_logp`` are the rollout-time values and stay fixed
    across epochs.
    """
    n = obs.shape[0]
    objs, clips = [], []
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, minibatch):
            idx = perm[start:start + minibatch]
            for k, sub in enumerate(subpolicies.subs):
                obj, grad, cf = ppo_objective(sub, obs[idx], actions[idx], old_sub_logp[idx, k], gate[idx, k],
                                              adv[idx], clip_eps, ent_coef)
                adam_step(opts[k], sub.params, -grad)
                np.clip(sub.log_std, LOG_STD_MIN, LOG_STD_MAX, out=sub.log_std)
                objs.append(obj)
                clips.append(cf)
    return PPODiagnostics(float(np.mean(objs)) if objs else 0.0, float(np.mean(clips)) if clips else 0.0)


def baseline_loss(baseline: BaselineNet, obs: np.ndarray, returns: np.ndarray, vf_coef: float = 1.0):
    n = obs.shape[0]
    err = baseline.values(obs) - returns
    loss = vf_coef * float(np.sum(err * err) / n)
    grad, _ = baseline.net.backward((2.0 * vf_coef * err / n)[:, None])
    return loss, grad


def baseline_update(baseline: BaselineNet, opt: AdamState, obs: np.ndarray, returns: np.ndarray, *, epochs: int,
                    minibatch: int, rng: np.random.Generator, vf_coef: float = 1.0) -> float:
    n = obs.shape[0]
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, minibatch):
            idx = perm[start:start + minibatch]
            loss, grad = baseline_loss(baseline, obs[idx], returns[idx], vf_coef)
            adam_step(opt, baseline.params, grad)
            losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


__all__ = [
    "Actor", "AdvantageBuffer", "BaselineNet", "ConstantGate", "PPODiagnostics", "Rollout", "Subpolicy",
    "SubpolicySet", "Transition", "baseline_loss", "baseline_update", "collect_rollout", "gae_advantages",
    "gated_ppo_update", "mixture_density", "ppo_objective", "sample_action",
]
