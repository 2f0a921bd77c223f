"""Model primitives: next-observation predictors with likelihood queries.

Two flavors. ``NoisyOraclePrimitive`` perturbs the simulator's true next
observation with region-dependent Gaussian noise; ``LearnedPrimitive`` is an
MLP dynamics model trained with a region-weighted squared error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NumericError
from .numkit import (LOG_2PI, AdamState, DiagGaussian, Mlp, adam_step, derive_rng, hash_keys,
                     keyed_normals, label_code)

COV_FLOOR = 1e-6
SIGMA_FLOOR = 0.05

NOISE_PRESETS = {
    "standard": (0.0, 0.5),
    "noise-a": (0.4, 0.5),
    "noise-b": (0.5, 1.0),
    "noise-c": (5.0, 10.0),
    "noise-d": (9.0, 10.0),
    "noise-e": (0.5, 0.5),
}

_STAGES = ("reach-above", "lower-to", "grasp", "pick-up", "carry", "drop")

# label -> (predicate tag selecting the low-noise regime, tag used to score gating accuracy)
PRIMITIVE_PRESETS: dict[str, tuple[tuple[str, str, str], ...]] = {
    "standard-4": tuple((d, f"corridor:{d}", f"touch:{d}") for d in "NSEW"),
    "corner-overlap": tuple((d, f"touch:{d}", f"touch:{d}") for d in "NSEW"),
    "extra-5": tuple((d, f"corridor:{d}", f"touch:{d}") for d in "NSEW") + (("moving-H", "moving:H", "moving:H"),),
    "hv-2": (("H", "axis:H", "axis:H"), ("V", "axis:V", "axis:V")),
    "velocity-2": (("moving-H", "moving:H", "moving:H"), ("moving-V", "moving:V", "moving:V")),
    "stage-12": tuple((f"B{b}:{s}", f"stage:B{b}:{s}", f"stage:B{b}:{s}") for b in (1, 2) for s in _STAGES),
    "box-only-2": tuple((f"B{b}", f"box:B{b}", f"box:B{b}") for b in (1, 2)),
    "action-only-6": tuple((s, f"action:{s}", f"action:{s}") for s in _STAGES),
}


@dataclass
class EmpiricalCovariance:
    variances: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.variances.size


def fit_covariance(next_states: np.ndarray) -> EmpiricalCovariance:
    """Diagonal sample covariance of next states, floored at COV_FLOOR.

    Accepts an (n, d) array of next states or a sequence of (s, a, s')
    triples.
    """
    if isinstance(next_states, (list, tuple)) and next_states and isinstance(next_states[0], tuple):
        next_states = np.array([t[2] for t in next_states])
    x = np.asarray(next_states, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("need at least 2 transitions to fit a covariance")
    var = x.var(axis=0, ddof=1)
    return EmpiricalCovariance(np.maximum(var, COV_FLOOR), x.shape[0])


@dataclass
class TransitionBatch:
    """Columns the primitives need to score a batch of transitions."""

    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    tags: Sequence[frozenset]
    actor: np.ndarray
    episode: np.ndarray
    step: np.ndarray


def _diag_ll(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    d = x - mean
    return -0.5 * np.sum(LOG_2PI + np.log(var) + d * d / var, axis=-1)


@dataclass
class NoisyOraclePrimitive:
    label: str
    predicate: str
    sigma_in: float
    sigma_out: float
    cov: EmpiricalCovariance
    seed: int = 0
    eval_tag: str | None = None
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if self.sigma_in < 0 or self.sigma_out < 0:
            raise InvalidInputError("noise scales must be non-negative")
        if self.eval_tag is None:
            self.eval_tag = self.predicate
        self._code = label_code(self.label)

    def sigma(self, tags: frozenset) -> float:
        return self.sigma_in if self.predicate in tags else self.sigma_out

    def _noise(self, actor, episode, step) -> np.ndarray:
        keys = hash_keys(self.seed, self._code, actor, episode, step)
        return keyed_normals(keys, self.cov.dim)

    def predict(self, tags: frozenset, true_next: np.ndarray, key: tuple[int, int, int]) -> DiagGaussian:
        """Predictive distribution N(mu, max(sigma, floor) * Sigma) for one transition.

        ``key`` is (actor, episode, step); the same key always yields the
        same mean draw.
        """
        s = self.sigma(tags)
        z = self._noise(*key)
        mu = np.asarray(true_next, dtype=np.float64) + np.sqrt(s * self.cov.variances) * z
        var = max(s, self.sigma_floor) * self.cov.variances
        return DiagGaussian(mu, 0.5 * np.log(var))

    def log_likelihood(self, tags: frozenset, s_next: np.ndarray, true_next: np.ndarray,
                       key: tuple[int, int, int]) -> float:
        d = self.predict(tags, true_next, key)
        return d.log_prob(s_next)

    def batch_log_likelihood(self, batch: TransitionBatch) -> np.ndarray:
        sig = np.array([self.sigma(t) for t in batch.tags])
        z = self._noise(batch.actor, batch.episode, batch.step)
        var = self.cov.variances
        mu = batch.next_obs + np.sqrt(sig[:, None] * var) * z
        out = _diag_ll(batch.next_obs, mu, np.maximum(sig, self.sigma_floor)[:, None] * var)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite likelihood from primitive {self.label}")
        return out


@dataclass
class LearnedPrimitive:
    label: str
    net: Mlp
    cov: EmpiricalCovariance
    in_scale: np.ndarray
    predicate: str = ""
    eval_tag: str | None = None
    corpus: str = ""

    def __post_init__(self):
        if self.eval_tag is None:
            self.eval_tag = self.predicate

    def mean(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([obs, actions], axis=-1) * self.in_scale
        return obs + self.net.forward(x)

    def predict(self, obs: np.ndarray, action: np.ndarray) -> DiagGaussian:
        return DiagGaussian(self.mean(obs, action), 0.5 * np.log(self.cov.variances))

    def log_likelihood(self, obs, action, s_next) -> float:
        return self.predict(np.asarray(obs, float), np.asarray(action, float)).log_prob(s_next)

    def batch_log_likelihood(self, batch: TransitionBatch) -> np.ndarray:
        out = _diag_ll(batch.next_obs, self.mean(batch.obs, batch.actions), self.cov.variances)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite likelihood from primitive {self.label}")
        return out


@dataclass
class PrimitiveSet:
    primitives: list

    def __len__(self) -> int:
        return len(self.primitives)

    @property
    def labels(self) -> list[str]:
        return [p.label for p in self.primitives]

    @property
    def eval_tags(self) -> list[str]:
        return [p.eval_tag for p in self.primitives]

    def log_likelihoods(self, batch: TransitionBatch) -> np.ndarray:
        """(n, K) matrix of per-primitive log-likelihoods of the observed next states."""
        return np.stack([p.batch_log_likelihood(batch) for p in self.primitives], axis=1)

    def membership(self, tags: Sequence[frozenset]) -> np.ndarray:
        """(n, K) boolean: does state i lie in primitive k's evaluation region."""
        return np.array([[p.eval_tag in t for p in self.primitives] for t in tags], dtype=bool)


def oracle_primitive_set(preset: str, cov: EmpiricalCovariance, sigma_in: float, sigma_out: float,
                         seed: int = 0) -> PrimitiveSet:
    if preset not in PRIMITIVE_PRESETS:
        raise InvalidInputError(f"unknown primitive preset {preset!r}")
    return PrimitiveSet([NoisyOraclePrimitive(lab, pred, sigma_in, sigma_out, cov, seed, ev)
                         for lab, pred, ev in PRIMITIVE_PRESETS[preset]])


def sample_transitions(env, n: int, rng: np.random.Generator):
    """Single random-action transitions from states spread over the task.

    Uses the environment's pure step function, so no episode bookkeeping or
    step counters are touched.
    """
    obs, act, nxt, tags = [], [], [], []
    for _ in range(n):
        st = env.sample_free_state(rng)
        a = rng.uniform(-1.0, 1.0, size=env.act_dim)
        s_next = _pure_step(env, st, a)
        obs.append(env.observe(st))
        act.append(a)
        nxt.append(env.observe(s_next))
        tags.append(env.tags(st))
    return np.array(obs), np.array(act), np.array(nxt), tags


def _pure_step(env, state, action):
    if env.kind == "maze":
        from .envs.maze import maze_step
        return maze_step(env.layout, state, action, 10 ** 9, env.params)[0]
    from .envs.stagechain import stagechain_step
    return stagechain_step(env.spec, state, action, 10 ** 9, env.params)[0]


def task_covariance(env, n: int = 10_000, seed: int = 0) -> EmpiricalCovariance:
    _, _, nxt, _ = sample_transitions(env, n, derive_rng(seed, "covariance"))
    return fit_covariance(nxt)


# --------------------------------------------------------------------------
# learned primitives


def train_learned_primitive(label: str, obs: np.ndarray, actions: np.ndarray, next_obs: np.ndarray,
                            weights: np.ndarray, *, in_scale: np.ndarray | None = None,
                            hidden: Sequence[int] = (64, 64), epochs: int = 200, minibatch: int = 256,
                            lr: float = 3e-4, seed: int = 0, predicate: str = "",
                            in_region: np.ndarray | None = None, corpus: str = "") -> LearnedPrimitive:
    """Fit a residual dynamics MLP by minimizing sum_i w_i |s_i + f(s_i, a_i) - s'_i|^2.

    The output covariance is the per-dimension variance of the in-region
    residuals (all transitions with positive weight when ``in_region`` is
    not given).
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[0] == 0:
        raise InvalidInputError("empty corpus")
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise InvalidInputError("weights must be non-negative")
    n, d = obs.shape
    x_dim = d + actions.shape[1]
    if in_scale is None:
        in_scale = np.ones(x_dim)
    rng = derive_rng(seed, "learned-primitive", label)
    net = Mlp((x_dim, *hidden, d), rng, output_scale=0.01)
    opt = AdamState.zeros_like(net.params, lr)
    x = np.concatenate([obs, actions], axis=1) * in_scale
    target = next_obs - obs
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, minibatch):
            idx = perm[start:start + minibatch]
            grad = weighted_mse_grad(net, x[idx], target[idx], weights[idx])[1]
            adam_step(opt, net.params, grad)
    mask = weights > 0 if in_region is None else np.asarray(in_region, bool)
    resid = next_obs[mask] - (obs[mask] + net.forward(x[mask]))
    cov = EmpiricalCovariance(np.maximum(resid.var(axis=0, ddof=1), COV_FLOOR), int(mask.sum()))
    return LearnedPrimitive(label, net, cov, in_scale, predicate, corpus=corpus)


def weighted_mse_grad(net: Mlp, x: np.ndarray, target: np.ndarray, w: np.ndarray):
    """Loss sum_i w_i |f(x_i) - t_i|^2 / n and its parameter gradient."""
    n = x.shape[0]
    err = net.forward(x) - target
    loss = float(np.sum(w[:, None] * err * err) / n)
    grad, _ = net.backward(2.0 * w[:, None] * err / n)
    return loss, grad


def corridor_corpus(direction: str, n_per_env: int = 3000, seed: int = 0, w_out: float = 0.1):
    """Transitions from three corridor environments specialised on ``direction``.

    Layouts: the corridor alone, and the corridor entered from each
    perpendicular direction.
    """
    from .envs.maze import MazeLayout, PointMazeEnv

    perp = "EW" if direction in "NS" else "NS"
    layouts = [f"{direction}3", f"{perp[0]}2 {direction}3", f"{perp[1]}2 {direction}3"]
    rng = derive_rng(seed, "corridor-corpus", direction)
    parts = []
    for text in layouts:
        env = PointMazeEnv(MazeLayout.parse(text), 180, seed)
        obs, act, nxt, tags = sample_transitions(env, n_per_env, rng)
        inside = np.array([f"corridor:{direction}" in t for t in tags])
        parts.append((obs, act, nxt, inside))
    obs, act, nxt, inside = (np.concatenate(c) for c in zip(*parts))
    weights = np.where(inside, 1.0, w_out)
    return obs, act, nxt, weights, inside, " | ".join(layouts)


def learned_corridor_set(seed: int = 0, epochs: int = 60, n_per_env: int = 3000) -> PrimitiveSet:
    from .envs.maze import PointMazeEnv, MazeLayout

    scale = PointMazeEnv(MazeLayout.parse("N1"), 60).obs_scale
    in_scale = np.concatenate([scale, np.ones(2)])
    prims = []
    for d in "NSEW":
        obs, act, nxt, w, inside, desc = corridor_corpus(d, n_per_env, seed)
        prims.append(train_learned_primitive(d, obs, act, nxt, w, in_scale=in_scale, epochs=epochs,
                                             seed=seed, predicate=f"corridor:{d}", in_region=inside,
                                             corpus=desc))
        prims[-1].eval_tag = f"touch:{d}"
    return PrimitiveSet(prims)


def parse_manifest(entries: Sequence[str], cov: EmpiricalCovariance, seed: int = 0) -> PrimitiveSet:
    """Manifest lines ``label:predicate:sigma_in:sigma_out`` or ``label:ckpt=<path>``."""
    from .numkit import load_params

    prims = []
    for entry in entries:
        parts = entry.split(":")
        if len(parts) >= 2 and parts[-1].startswith("ckpt="):
            label = ":".join(parts[:-1])
            blocks = load_params(parts[-1][5:])
            net_blk = blocks["net"]
            net = Mlp(net_blk.shape, buffer=net_blk.data.copy())
            pcov = EmpiricalCovariance(blocks["cov"].data.copy(), 0)
            prims.append(LearnedPrimitive(label, net, pcov, blocks["in_scale"].data.copy(),
                                          f"corridor:{label}", f"touch:{label}"))
        elif len(parts) >= 4:
            label, pred = parts[0], ":".join(parts[1:-2])
            prims.append(NoisyOraclePrimitive(label, pred, float(parts[-2]), float(parts[-1]), cov, seed))
        else:
            raise InvalidInputError(f"bad manifest entry {entry!r}")
    return PrimitiveSet(prims)


def save_learned(prim: LearnedPrimitive, path) -> None:
    from .numkit import ParamBlock, save_params

    save_params(path, {
        "net": ParamBlock("mlp", prim.net.layer_sizes, prim.net.params),
        "cov": ParamBlock("vec", (prim.cov.dim,), prim.cov.variances),
        "in_scale": ParamBlock("vec", (prim.in_scale.size,), prim.in_scale),
    })


def expected_gap(sigma_in: float, sigma_out: float, dim: int, floor: float = SIGMA_FLOOR) -> float:
    """Expected log-likelihood advantage of the in-region primitive on one transition."""
    vi, vo = max(sigma_in, floor), max(sigma_out, floor)
    return 0.5 * dim * (math.log(vo / vi) + sigma_out / vo - sigma_in / vi)
