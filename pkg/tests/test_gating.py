import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mphrl.errors import InvalidInputError
from mphrl.gating import (ConstantGate, GatingController, OracleGate, gating_accuracy, gating_loss, gating_update,
                          kl_from_uniform, posterior_target)
from mphrl.numkit import AdamState, softmax


def reference_target(prior, ll, logpi=None):
    """Direct product-and-normalize in float64 (inputs kept moderate)."""
    w = prior * np.exp(ll - ll.max())
    if logpi is not None:
        w = w * np.exp(logpi - logpi.max())
    return w / w.sum()


probs = arrays(np.float64, 4, elements=st.floats(0.01, 1.0)).map(lambda p: p / p.sum())
lls = arrays(np.float64, 4, elements=st.floats(-30, 30))


@settings(max_examples=200)
@given(probs, lls, st.floats(-100, 100))
def test_posterior_properties(prior, ll, shift):
    t = posterior_target(prior, ll)
    assert t.sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(t, reference_target(prior, ll), atol=1e-12)
    np.testing.assert_allclose(posterior_target(prior, ll + shift), t, atol=1e-9)


def test_posterior_equal_likelihoods_return_prior():
    prior = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(posterior_target(prior, np.full(4, -7.0)), prior, atol=1e-15)


def test_posterior_zero_prior_component_stays_zero():
    t = posterior_target(np.array([0.0, 0.5, 0.5]), np.array([100.0, 0.0, 0.0]))
    assert t[0] == 0.0 and t[1:].sum() == pytest.approx(1.0)


def test_coupled_requires_log_probs_and_differs():
    prior = np.array([0.25, 0.25, 0.25, 0.25])
    ll = np.array([0.0, 1.0, 2.0, 3.0])
    with pytest.raises(InvalidInputError):
        posterior_target(prior, ll, coupled=True)
    lp = np.array([3.0, 0.0, 0.0, -3.0])
    c = posterior_target(prior, ll, coupled=True, subpolicy_log_probs=lp)
    np.testing.assert_allclose(c, reference_target(prior, ll, lp), atol=1e-12)
    assert not np.allclose(c, posterior_target(prior, ll))
    # decoupled ignores any log-probs passed
    np.testing.assert_array_equal(posterior_target(prior, ll, subpolicy_log_probs=lp), posterior_target(prior, ll))


def test_posterior_input_validation():
    with pytest.raises(InvalidInputError):
        posterior_target(np.ones(3) / 3, np.zeros(4))
    with pytest.raises(InvalidInputError):
        posterior_target(np.ones(2) / 2, np.array([0.0, np.nan]))


def test_gating_loss_gradient():
    rng = np.random.default_rng(0)
    ctrl = GatingController.create(5, 3, rng, hidden=(8,))
    ctrl.net.weights[-1][:] = rng.standard_normal(ctrl.net.weights[-1].shape)
    obs = rng.standard_normal((12, 5))
    targets = rng.dirichlet(np.ones(3), size=12)
    loss, grad = gating_loss(ctrl, obs, targets)
    ref = -np.mean(np.sum(targets * np.log(softmax(ctrl.logits(obs))), axis=1))
    assert loss == pytest.approx(ref, abs=1e-12)
    num = np.zeros_like(grad)
    for i in range(grad.size):
        old = ctrl.params[i]
        ctrl.params[i] = old + 1e-6
        hi = gating_loss(ctrl, obs, targets)[0]
        ctrl.params[i] = old - 1e-6
        lo = gating_loss(ctrl, obs, targets)[0]
        ctrl.params[i] = old
        num[i] = (hi - lo) / 2e-6
    assert np.linalg.norm(grad - num) / np.linalg.norm(num) < 1e-6


def test_gating_update_learns_region_map():
    rng = np.random.default_rng(0)
    ctrl = GatingController.create(1, 2, rng, hidden=(16,))
    opt = AdamState.zeros_like(ctrl.params, 1e-2)
    obs = rng.uniform(-1, 1, (512, 1))
    member = np.stack([obs[:, 0] < 0, obs[:, 0] >= 0], axis=1)
    ll = np.where(member, 0.0, -20.0)
    for _ in range(10):
        prior = ctrl.probs(obs)
        diag = gating_update(ctrl, opt, obs, prior, ll, epochs=5, minibatch=128, rng=rng, membership=member)
    assert diag.accuracy > 0.97
    assert gating_accuracy(ctrl.probs(obs), member) > 0.97
    assert diag.target_entropy < 1e-6
    assert diag.usage.sum() == pytest.approx(1.0)


def test_gating_update_zero_epochs_is_noop():
    rng = np.random.default_rng(0)
    ctrl = GatingController.create(2, 2, rng)
    before = ctrl.params.copy()
    opt = AdamState.zeros_like(ctrl.params, 1e-2)
    obs = rng.standard_normal((10, 2))
    gating_update(ctrl, opt, obs, ctrl.probs(obs), np.zeros((10, 2)), epochs=0, minibatch=4, rng=rng)
    np.testing.assert_array_equal(ctrl.params, before)


def test_accuracy_counts_corner_states_for_either_region():
    member = np.array([[True, True], [False, True], [True, False]])
    assert gating_accuracy(np.array([[0.9, 0.1], [0.2, 0.8], [0.3, 0.7]]), member) == pytest.approx(2 / 3)
    assert np.isnan(gating_accuracy(np.zeros((0, 2)), np.zeros((0, 2), bool)))


def test_kl_from_uniform():
    assert kl_from_uniform(np.full((3, 4), 0.25)) == pytest.approx(0.0)
    assert kl_from_uniform(np.array([[1.0, 0.0]])) == pytest.approx(np.log(2))


def test_oracle_and_constant_gates():
    gate = OracleGate(["first:E", "first:N"])
    p = gate.probs_from_tags([frozenset({"first:N"}), frozenset({"first:E", "touch:N"}), frozenset()])
    assert p.tolist() == [[0, 1], [1, 0], [1, 0]]
    assert ConstantGate().probs(np.zeros((3, 5))).tolist() == [[1.0]] * 3


def test_controller_initially_near_uniform():
    ctrl = GatingController.create(9, 4, np.random.default_rng(0))
    p = ctrl.probs(np.random.default_rng(1).standard_normal((50, 9)))
    assert np.abs(p - 0.25).max() < 0.05
