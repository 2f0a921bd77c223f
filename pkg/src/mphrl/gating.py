"""Gating controller over model primitives.

The controller is a categorical network P(M_k | s). It is trained by
conditional cross-entropy against per-transition posterior targets built
from its own output and the primitives' likelihoods of the observed next
state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numkit import AdamState, Mlp, adam_step, log_softmax, logsumexp, softmax


@dataclass
class GatingController:
    net: Mlp
    obs_scale: np.ndarray

    @classmethod
    def create(cls, obs_dim: int, k: int, rng: np.random.Generator, hidden=(64, 64),
               obs_scale: np.ndarray | None = None) -> "GatingController":
        scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, float)
        return cls(Mlp((obs_dim, *hidden, k), rng, output_scale=0.01), scale)

    @property
    def k(self) -> int:
        return self.net.out_dim

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def logits(self, obs: np.ndarray) -> np.ndarray:
        return self.net.forward(np.asarray(obs) * self.obs_scale)

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return softmax(self.logits(obs))


class OracleGate:
    """One-hot gate on the ground-truth region.

    ``tag_for`` maps each primitive index to the state tag that activates
    it; at corners the earlier corridor wins (``first:<dir>`` tags).
    """

    def __init__(self, tags: list[str]):
        self.tags = list(tags)

    @property
    def k(self) -> int:
        return len(self.tags)

    def probs_from_tags(self, tags: list[frozenset]) -> np.ndarray:
        out = np.zeros((len(tags), self.k))
        for i, t in enumerate(tags):
            hits = [j for j, tag in enumerate(self.tags) if tag in t]
            out[i, hits[0] if hits else 0] = 1.0
        return out


class ConstantGate:
    """Gate of exactly 1.0 on a single component (plain PPO)."""

    k = 1

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return np.ones((np.asarray(obs).shape[0], 1))


def posterior_target(prior: np.ndarray, log_likelihoods: np.ndarray, coupled: bool = False,
                     subpolicy_log_probs: np.ndarray | None = None) -> np.ndarray:
    """Per-transition target distribution over primitives.

    Decoupled: target_k ∝ prior_k * exp(ll_k).
    Coupled:   target_k ∝ prior_k * exp(logpi_k) * exp(ll_k).
    Works row-wise on (n, K) arrays or on single K-vectors.
    """
    prior = np.asarray(prior, dtype=np.float64)
    ll = np.asarray(log_likelihoods, dtype=np.float64)
    if prior.shape != ll.shape:
        raise InvalidInputError(f"prior {prior.shape} and likelihoods {ll.shape} differ in shape")
    if not np.all(np.isfinite(ll)):
        raise InvalidInputError("log-likelihoods must be finite")
    with np.errstate(divide="ignore"):
        score = np.log(prior) + ll
    if coupled:
        if subpolicy_log_probs is None:
            raise InvalidInputError("coupled target needs subpolicy log-probs")
        score = score + np.asarray(subpolicy_log_probs, dtype=np.float64)
    return np.exp(score - logsumexp(score, axis=-1)[..., None])


def gating_loss(controller: GatingController, obs: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy -sum_k target_k log P(k|s) and its parameter gradient."""
    n = obs.shape[0]
    logits = controller.logits(obs)
    logp = log_softmax(logits)
    loss = float(-np.sum(targets * logp) / n)
    # d/dlogits of -sum t log softmax = p * sum(t) - t
    p = np.exp(logp)
    dlogits = (p * targets.sum(axis=1, keepdims=True) - targets) / n
    grad, _ = controller.net.backward(dlogits)
    return loss, grad


@dataclass
class GatingDiagnostics:
    loss: float
    target_entropy: float
    accuracy: float
    usage: np.ndarray
    divergence: float


def _entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=-1)


def gating_accuracy(probs: np.ndarray, membership: np.ndarray) -> float:
    """Share of states whose argmax primitive's region contains the state."""
    if probs.shape[0] == 0:
        return float("nan")
    k = np.argmax(probs, axis=1)
    return float(np.mean(membership[np.arange(len(k)), k]))


def gating_update(controller: GatingController, opt: AdamState, obs: np.ndarray, prior: np.ndarray,
                  log_likelihoods: np.ndarray, *, epochs: int, minibatch: int, rng: np.random.Generator,
                  coupled: bool = False, subpolicy_log_probs: np.ndarray | None = None,
                  membership: np.ndarray | None = None) -> GatingDiagnostics:
    """Minibatched Adam on the cross-entropy to frozen posterior targets.

    ``prior`` is the controller output recorded at collection time; the
    targets built from it stay fixed for all epochs of this update.
    """
    targets = posterior_target(prior, log_likelihoods, coupled, subpolicy_log_probs)
    n = obs.shape[0]
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, minibatch):
            idx = perm[start:start + minibatch]
            loss, grad = gating_loss(controller, obs[idx], targets[idx])
            adam_step(opt, controller.params, grad)
            losses.append(loss)
    probs = controller.probs(obs)
    if not losses:
        losses = [float(-np.mean(np.sum(targets * np.log(np.maximum(probs, 1e-300)), axis=1)))]
    acc = gating_accuracy(probs, membership) if membership is not None else float("nan")
    usage = np.bincount(np.argmax(probs, axis=1), minlength=controller.k) / max(n, 1)
    mean_t = targets.mean(axis=0)
    mean_p = probs.mean(axis=0)
    divergence = float(np.sum(mean_t * (np.log(np.maximum(mean_t, 1e-300)) - np.log(np.maximum(mean_p, 1e-300)))))
    return GatingDiagnostics(float(np.mean(losses)), float(np.mean(_entropy(targets))), acc, usage, divergence)


def kl_from_uniform(probs: np.ndarray) -> float:
    """Mean KL(P || uniform) over rows."""
    k = probs.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.sum(np.where(probs > 0, probs * (np.log(probs) + np.log(k)), 0.0), axis=-1)
    return float(np.mean(kl))
