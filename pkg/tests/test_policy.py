import math

import numpy as np
import pytest

from mphrl.envs import MazeLayout, PointMazeEnv
from mphrl.gating import ConstantGate, GatingController, OracleGate
from mphrl.numkit import AdamState, derive_rng
from mphrl.policy import (Actor, BaselineNet, Subpolicy, SubpolicySet, baseline_loss, baseline_update,
                          collect_rollout, gae_advantages, gated_ppo_update, mixture_density, ppo_objective,
                          sample_action)
from mphrl.primitives import EmpiricalCovariance, oracle_primitive_set


def brute_force_gae(rewards, values, next_values, terminal, ends, gamma, lam):
    """Sum_l (gamma lam)^l delta_{t+l} within each episode, computed term by term."""
    n = len(rewards)
    delta = [rewards[t] + gamma * next_values[t] * (0.0 if terminal[t] else 1.0) - values[t] for t in range(n)]
    out = np.zeros(n)
    for t in range(n):
        total, coef, u = 0.0, 1.0, t
        while u < n:
            total += coef * delta[u]
            if ends[u]:
                break
            coef *= gamma * lam
            u += 1
        out[t] = total
    return out


def test_gae_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 51))
        r, v, nv = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n)
        ends = rng.random(n) < 0.2
        ends[-1] = True
        term = ends & (rng.random(n) < 0.5)
        buf = gae_advantages(r, v, nv, term, ends, 0.99, 0.95, normalize=False)
        np.testing.assert_allclose(buf.advantages, brute_force_gae(r, v, nv, term, ends, 0.99, 0.95), atol=1e-10)
        np.testing.assert_allclose(buf.returns, buf.raw + v, atol=1e-14)


def test_gae_lambda_one_is_discounted_return_minus_value():
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, 0.1, 0.2])
    nv = np.array([0.1, 0.2, 9.0])
    buf = gae_advantages(r, v, nv, np.array([0, 0, 1], bool), np.array([0, 0, 1], bool), 0.9, 1.0, normalize=False)
    np.testing.assert_allclose(buf.raw + v, [1 + 0.9 * 2 + 0.81 * 3, 2 + 0.9 * 3, 3], atol=1e-12)


def test_gae_normalization_and_validation():
    rng = np.random.default_rng(1)
    n = 40
    buf = gae_advantages(rng.standard_normal(n), np.zeros(n), np.zeros(n), np.zeros(n, bool),
                         np.arange(n) % 10 == 9, 0.99, 0.95)
    assert abs(buf.advantages.mean()) < 1e-12 and buf.advantages.std() == pytest.approx(1.0, abs=1e-6)
    from mphrl.errors import InvalidInputError
    with pytest.raises(InvalidInputError):
        gae_advantages(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3, bool), np.ones(3, bool), 0.9, 0.9)


def make_subs(k=3, obs_dim=2, act_dim=1, seed=0, hidden=(8,)):
    rng = np.random.default_rng(seed)
    subs = SubpolicySet.create(obs_dim, act_dim, k, rng, hidden)
    for s in subs.subs:
        s.mlp.weights[-1][:] = rng.standard_normal(s.mlp.weights[-1].shape)
        s.log_std[:] = rng.uniform(-1.0, 0.5, act_dim)
    return subs


@pytest.mark.parametrize("k", [1, 2, 4])
def test_mixture_integrates_to_one(k):
    subs = make_subs(k, seed=k)
    obs = np.array([0.3, -0.2])
    gate = np.random.default_rng(k).dirichlet(np.ones(k))
    xs = np.linspace(-40, 40, 400001)
    dens = np.exp(mixture_density(subs, np.tile(gate, (xs.size, 1)), np.tile(obs, (xs.size, 1)), xs[:, None])[0])
    assert np.trapezoid(dens, xs) == pytest.approx(1.0, abs=1e-6)


def test_one_hot_gate_reduces_to_component():
    subs = make_subs(3)
    obs = np.array([0.1, 0.4])
    a = np.array([0.7])
    mix, comp = mixture_density(subs, np.array([0.0, 1.0, 0.0]), obs, a)
    assert mix == comp[1]


def test_log_sum_exp_shift_invariance():
    subs = make_subs(3)
    obs = np.random.default_rng(0).standard_normal((5, 2))
    act = np.random.default_rng(1).standard_normal((5, 1))
    g = np.full((5, 3), 1 / 3)
    mix, comp = mixture_density(subs, g, obs, act)
    ref = np.log(np.sum(g * np.exp(comp), axis=1))
    np.testing.assert_allclose(mix, ref, atol=1e-12)


def test_sampling_frequencies_match_gate():
    subs = make_subs(4)
    gate = np.array([0.1, 0.2, 0.3, 0.4])
    rng = np.random.default_rng(0)
    counts = np.zeros(4)
    obs = np.zeros(2)
    from mphrl.numkit import sample_index
    for _ in range(100_000):
        counts[sample_index(gate, rng.random())] += 1
    np.testing.assert_allclose(counts / 1e5, gate, atol=0.01)
    a, k, mix, comp = sample_action(subs, gate, obs, rng)
    assert a.shape == (1,) and 0 <= k < 4
    assert mix == pytest.approx(mixture_density(subs, gate, obs, a)[0])


def numeric(f, params, eps=1e-6):
    g = np.zeros_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + eps
        hi = f()
        params[i] = old - eps
        lo = f()
        params[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def ppo_instance(seed):
    rng = np.random.default_rng(seed)
    sub = Subpolicy((3, 6, 2), np.ones(3), rng)
    sub.mlp.weights[-1][:] = 0.3 * rng.standard_normal(sub.mlp.weights[-1].shape)
    n = 16
    obs = rng.standard_normal((n, 3))
    act = rng.standard_normal((n, 2))
    old = sub.log_prob(obs, act) + rng.normal(0, 0.3, n)
    return sub, obs, act, old, rng.uniform(0, 1, n), rng.standard_normal(n)


@pytest.mark.parametrize("seed", range(5))
def test_ppo_objective_gradient(seed):
    sub, obs, act, old, gate, adv = ppo_instance(seed)
    _, grad, _ = ppo_objective(sub, obs, act, old, gate, adv, 0.2, ent_coef=0.01)
    num = numeric(lambda: ppo_objective(sub, obs, act, old, gate, adv, 0.2, ent_coef=0.01)[0], sub.params)
    assert np.linalg.norm(grad - num) / np.linalg.norm(num) < 1e-4


def test_ppo_ratio_one_identity():
    sub, obs, act, _, gate, adv = ppo_instance(0)
    old = sub.log_prob(obs, act)
    obj, grad, clip = ppo_objective(sub, obs, act, old, gate, adv, 0.2)
    assert obj == pytest.approx(np.mean(gate * adv), abs=1e-12)
    assert clip == 0.0
    # at ratio 1 the gradient is the gated policy gradient mean(g A grad log pi)
    num = numeric(lambda: float(np.mean(gate * adv * sub.log_prob(obs, act))), sub.params)
    np.testing.assert_allclose(grad, num, atol=1e-6)


def test_zero_gate_means_zero_gradient():
    sub, obs, act, old, _, adv = ppo_instance(1)
    _, grad, _ = ppo_objective(sub, obs, act, old, np.zeros(len(adv)), adv, 0.2)
    assert np.all(grad == 0.0)


def test_gated_update_leaves_ungated_subpolicy_untouched():
    subs = make_subs(2, obs_dim=3, act_dim=2, hidden=(6,))
    rng = np.random.default_rng(0)
    n = 64
    obs, act = rng.standard_normal((n, 3)), rng.standard_normal((n, 2))
    gate = np.tile([1.0, 0.0], (n, 1))
    before = subs.subs[1].params.copy()
    opts = [AdamState.zeros_like(s.params, 1e-3) for s in subs.subs]
    gated_ppo_update(subs, opts, obs, act, subs.log_probs(obs, act), gate, rng.standard_normal(n), clip_eps=0.2,
                     epochs=3, minibatch=16, rng=rng)
    np.testing.assert_array_equal(subs.subs[1].params, before)
    assert not np.array_equal(subs.subs[0].params, make_subs(2, 3, 2, hidden=(6,)).subs[0].params)


def test_ppo_improves_surrogate():
    sub, obs, act, _, gate, adv = ppo_instance(3)
    subs = SubpolicySet([sub])
    old = sub.log_prob(obs, act)
    opts = [AdamState.zeros_like(sub.params, 1e-2)]
    gated_ppo_update(subs, opts, obs, act, old[:, None], gate[:, None], adv, clip_eps=0.2, epochs=10,
                     minibatch=16, rng=np.random.default_rng(0))
    obj, _, _ = ppo_objective(sub, obs, act, old, gate, adv, 0.2)
    assert obj > np.mean(gate * adv)


@pytest.mark.parametrize("seed", range(5))
def test_baseline_gradient(seed):
    rng = np.random.default_rng(seed)
    bl = BaselineNet(4, rng, hidden=(5,))
    obs, ret = rng.standard_normal((10, 4)), rng.standard_normal(10)
    _, grad = baseline_loss(bl, obs, ret, 1.0)
    num = numeric(lambda: baseline_loss(bl, obs, ret, 1.0)[0], bl.params)
    assert np.linalg.norm(grad - num) / np.linalg.norm(num) < 1e-4


def test_baseline_regresses_constant():
    rng = np.random.default_rng(0)
    bl = BaselineNet(2, rng, hidden=(16,))
    opt = AdamState.zeros_like(bl.params, 1e-2)
    obs = rng.standard_normal((256, 2))
    for _ in range(30):
        baseline_update(bl, opt, obs, np.full(256, 3.0), epochs=5, minibatch=64, rng=rng)
    v = bl.values(obs)
    assert abs(v.mean() - 3.0) < 0.01 and np.abs(v - 3.0).max() < 0.1


# -- rollouts ----------------------------------------------------------------

LAYOUT = MazeLayout.parse("E2 N2")


def make_actors(n, seed=0, horizon=40):
    return [Actor(PointMazeEnv(LAYOUT, horizon, seed + i), derive_rng(seed, "actor", i), i) for i in range(n)]


def rollout_setup(k=4):
    rng = np.random.default_rng(0)
    env = PointMazeEnv(LAYOUT, 40)
    subs = SubpolicySet.create(9, 2, k, rng, (8, 8), env.obs_scale)
    gate = GatingController.create(9, k, rng, (8,), env.obs_scale)
    bl = BaselineNet(9, rng, (8,), env.obs_scale)
    prims = oracle_primitive_set("standard-4", EmpiricalCovariance(np.ones(9), 10), 0.0, 0.5)
    return subs, gate, bl, prims


def test_rollout_columns_and_recomputation():
    subs, gate, bl, prims = rollout_setup()
    actors = make_actors(3)
    ro = collect_rollout(actors, subs, gate, prims, bl, 50)
    assert len(ro) == 150
    assert sum(a.env.step_calls for a in actors) == 150
    mix, comp = mixture_density(subs, ro.gate, ro.obs, ro.actions)
    np.testing.assert_allclose(ro.mix_logp, mix, atol=1e-9)
    np.testing.assert_allclose(ro.sub_logp, comp, atol=1e-12)
    np.testing.assert_allclose(ro.gate, gate.probs(ro.obs), atol=1e-12)
    assert ro.prim_ll.shape == (150, 4)
    np.testing.assert_allclose(ro.prim_ll, prims.log_likelihoods(ro.batch()))
    np.testing.assert_allclose(ro.values, bl.values(ro.obs))
    # ends close every actor segment and every finished episode
    assert ro.ends[49] and ro.ends[99] and ro.ends[149]
    assert np.all(ro.ends[ro.terminal])
    # each episode's steps count from zero
    for ep in ro.episodes():
        assert len(ep) >= 1
    assert set(np.unique(ro.actor)) == {0, 1, 2}
    np.testing.assert_allclose(ro.next_obs[:-1][~ro.ends[:-1]], ro.obs[1:][~ro.ends[:-1]])


def test_rollout_is_independent_of_actor_grouping():
    subs, gate, bl, prims = rollout_setup()
    together = collect_rollout(make_actors(3), subs, gate, prims, bl, 30)
    alone = [collect_rollout([a], subs, gate, prims, bl, 30) for a in make_actors(3)]
    np.testing.assert_allclose(together.actions, np.concatenate([r.actions for r in alone]), rtol=0, atol=1e-12)
    np.testing.assert_allclose(together.obs, np.concatenate([r.obs for r in alone]), rtol=0, atol=1e-12)


def test_oracle_and_constant_gate_rollouts():
    subs, _, bl, _ = rollout_setup()
    ro = collect_rollout(make_actors(1), subs, OracleGate(["first:N", "first:S", "first:E", "first:W"]), None, bl, 30)
    assert set(np.unique(ro.gate.sum(axis=1))) == {1.0}
    for tags, g in zip(ro.tags, ro.gate):
        active = ["first:N", "first:S", "first:E", "first:W"][int(np.argmax(g))]
        assert active in tags
    one = SubpolicySet.create(9, 2, 1, np.random.default_rng(0), (8,))
    ro = collect_rollout(make_actors(1), one, ConstantGate(), None, bl, 20)
    np.testing.assert_array_equal(ro.mix_logp, ro.sub_logp[:, 0])
    assert ro.prim_ll.shape == (20, 0)


def test_success_rate_counts_completed_episodes():
    subs, gate, bl, prims = rollout_setup()
    ro = collect_rollout(make_actors(2, horizon=10), subs, gate, prims, bl, 25)
    assert len(ro.episode_success) == 4  # two truncations per actor
    assert ro.success_rate == 0.0
    assert all(n == 10 for n in ro.episode_lengths)
    assert math.isfinite(ro.mean_episode_return)
