import numpy as np
import pytest

from mphrl.envs import make_env, maze_task
from mphrl.lifelong import (ConvergenceRule, HyperParams, PrimitiveConfig, init_state, load_subpolicies,
                            params_digest, relearn_from_checkpoint, reset_subpolicies, train_lifelong,
                            train_single_task)
from mphrl.numkit import load_params

TINY = HyperParams(n_actors=2, steps_per_actor=64, minibatch_per_actor=32, epochs=2, sub_hidden=(8,),
                   ppo_hidden=(8,), baseline_hidden=(8,), gating_hidden=(8,), cov_samples=500)
TASKS = [maze_task("E2 N2", seed=1), maze_task("N2 W2", seed=2), maze_task("W2 S2", seed=3)]
ENV = make_env(TASKS[0], 0)


def state(seed=0, **kw):
    return init_state(seed, ENV.obs_dim, ENV.act_dim, 4, TINY, ENV.obs_scale, **kw)


def sub_digest(st):
    return params_digest(*[s.params for s in st.subpolicies.subs])


def test_zero_budget_runs_no_iterations():
    st = state()
    res = train_single_task(st, TASKS[0], ConvergenceRule(0.8, 0))
    assert res.steps == 0 and res.iterations == 0 and not res.converged
    assert st.cumulative_steps == 0


def test_step_accounting_and_metrics():
    st = state()
    rows = []
    out = train_lifelong(st, TASKS[:2], ConvergenceRule(0.99, 300), on_metrics=rows.append)
    batch = TINY.batch_steps
    # the loop stops on the first batch that reaches or passes the budget
    assert out.task_steps == [3 * batch, 3 * batch]
    assert st.cumulative_steps == sum(out.task_steps)
    assert [r.task for r in rows] == [0, 0, 0, 1, 1, 1]
    assert [r.cumulative_steps for r in rows] == [batch * i for i in range(1, 7)]
    assert all(len(r.usage.split(";")) == 4 for r in rows)


def test_subpolicies_persist_and_gating_resets():
    st = state()
    train_single_task(st, TASKS[0], ConvergenceRule(0.99, 128))
    subs_before = sub_digest(st)
    gate_before = st.gating.params.copy()
    out = train_lifelong(st, TASKS[:1], ConvergenceRule(0.99, 0))
    assert out.task_steps == [0]
    # resets happen at task entry: gating re-initialized, subpolicies kept
    assert sub_digest(st) == subs_before
    assert not np.array_equal(st.gating.params, gate_before)


def test_reset_subpolicies_is_deterministic_per_task():
    a, b = state(), state()
    reset_subpolicies(a, 3)
    reset_subpolicies(b, 3)
    assert sub_digest(a) == sub_digest(b)
    reset_subpolicies(b, 4)
    assert sub_digest(a) != sub_digest(b)


def test_reset_subpolicies_flag_changes_transfer():
    rule = ConvergenceRule(0.99, 128)
    keep, fresh = state(), state()
    train_lifelong(keep, TASKS[:2], rule)
    train_lifelong(fresh, TASKS[:2], rule, reset_subpolicies_flag=True)
    assert sub_digest(keep) != sub_digest(fresh)


def test_lifelong_single_task_equals_train_single_task():
    rule = ConvergenceRule(0.99, 256)
    a, b = state(3), state(3)
    train_lifelong(a, TASKS[:1], rule)
    train_single_task(b, TASKS[0], rule)
    assert sub_digest(a) == sub_digest(b)
    np.testing.assert_array_equal(a.gating.params, b.gating.params)


def test_training_is_deterministic():
    rule = ConvergenceRule(0.99, 256)
    digests = []
    for _ in range(2):
        st = state(5)
        train_lifelong(st, TASKS[:2], rule)
        digests.append((sub_digest(st), params_digest(st.gating.params, st.baseline.params)))
    assert digests[0] == digests[1]


def test_source_and_target_gating_rates():
    st = state()
    assert st.gating_opt.lr == TINY.gating_lr_source
    train_lifelong(st, TASKS[:2], ConvergenceRule(0.99, 64))
    assert st.gating_opt.lr == TINY.gating_lr_target


def test_ppo_method_uses_single_policy_and_resets():
    st = state(method="ppo")
    assert st.k == 1 and len(st.subpolicies.subs) == 1
    assert st.subpolicies.subs[0].mlp.layer_sizes[1:-1] == TINY.ppo_hidden
    train_single_task(st, TASKS[0], ConvergenceRule(0.99, 128))
    before = sub_digest(st)
    train_lifelong(st, TASKS[1:2], ConvergenceRule(0.99, 0))
    # task index 0 of the new suite keeps parameters; later tasks would reset
    assert sub_digest(st) == before
    train_lifelong(st, TASKS[:2], ConvergenceRule(0.99, 0))
    assert sub_digest(st) != before


def test_oracle_gating_runs_without_learned_controller():
    st = state(oracle=True)
    assert st.gating is None
    rows = []
    res = train_single_task(st, TASKS[0], ConvergenceRule(0.99, 128), on_metrics=rows.append)
    assert res.steps == 128 and res.final_accuracy == 1.0
    assert all(np.isnan(r.gating_ce) for r in rows)


def test_checkpoint_round_trip_and_relearn(tmp_path):
    st = state()
    train_lifelong(st, TASKS[:2], ConvergenceRule(0.99, 128), out_dir=tmp_path, config_hash="abc")
    for i in range(2):
        d = tmp_path / f"task{i}"
        assert {p.name for p in d.iterdir()} == {"subpolicies.ckpt", "gating.ckpt", "baseline.ckpt", "manifest"}
    manifest = (tmp_path / "task1" / "manifest").read_text()
    assert "config_hash=abc" in manifest and "task_steps=128,128" in manifest
    loaded = load_subpolicies(tmp_path / "task1", ENV.obs_scale)
    assert params_digest(*[s.params for s in loaded.subs]) == sub_digest(st)
    blocks = load_params(tmp_path / "task1" / "gating.ckpt")
    np.testing.assert_array_equal(blocks["gating"].data, st.gating.params)

    assert relearn_from_checkpoint(tmp_path / "task1", [], ConvergenceRule(0.99, 128), TINY, 0,
                                   obs_dim=ENV.obs_dim, act_dim=ENV.act_dim, obs_scale=ENV.obs_scale) == []
    steps = relearn_from_checkpoint(tmp_path / "task1", TASKS[:1], ConvergenceRule(0.99, 128), TINY, 0,
                                    obs_dim=ENV.obs_dim, act_dim=ENV.act_dim, obs_scale=ENV.obs_scale)
    assert steps == [128]
    # relearning does not touch the checkpoint
    again = load_subpolicies(tmp_path / "task1", ENV.obs_scale)
    assert params_digest(*[s.params for s in again.subs]) == sub_digest(st)


def test_converges_on_easy_task():
    hp = HyperParams(cov_samples=2000)
    task = maze_task("E2", seed=0)
    env = make_env(task, 0)
    st = init_state(0, env.obs_dim, env.act_dim, 4, hp, env.obs_scale)
    res = train_single_task(st, task, ConvergenceRule(0.8, 100_000), primitives=PrimitiveConfig())
    assert res.converged and res.final_success >= 0.8
    assert res.steps % hp.batch_steps == 0


def test_convergence_rule_validation():
    with pytest.raises(ValueError):
        ConvergenceRule(0.0, 10)
    with pytest.raises(ValueError):
        ConvergenceRule(0.8, -1)


def test_policy_scale_applies_to_subpolicies_only():
    st = state(policy_scale=ENV.policy_obs_scale)
    np.testing.assert_array_equal(st.subpolicies.subs[0].obs_scale, ENV.policy_obs_scale)
    np.testing.assert_array_equal(st.gating.obs_scale, ENV.obs_scale)
    ppo = state(method="ppo", policy_scale=ENV.policy_obs_scale)
    np.testing.assert_array_equal(ppo.subpolicies.subs[0].obs_scale, ENV.obs_scale)
