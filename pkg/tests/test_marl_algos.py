"""Tests for the MADDPG and MA-SAC updates."""

import numpy as np
import pytest

from dvm_marl.config.experiment_config import AlgoConfig
from dvm_marl.core.models import ActionMode, Algorithm
from dvm_marl.core.tensor_core import (
    SquashedGaussianDist,
    adam_step,
    forward,
    one_hot,
    squashed_gaussian_sample,
)
from dvm_marl.services.marl_algos import (
    MultiAgentTrainer,
    create_bundles,
    critic_inputs,
    epsilon_at,
    maddpg_actor_loss,
    maddpg_actor_update,
    maddpg_critic_loss,
    maddpg_critic_update,
    masac_actor_loss,
    masac_actor_update,
    masac_q_loss,
    masac_q_update,
    masac_value_loss,
    masac_value_update,
    select_action,
    target_update,
    value_inputs,
)
from dvm_marl.services.replay import TransitionBatch
from tests.gradcheck import assert_grad_close, numerical_grad

OBS_DIM = 3


def _constant_output(net, value: float) -> None:
    """Make a network output ``value`` for every input."""
    net.weights[-1][:] = 0.0
    net.biases[-1][:] = value


def _param_copies(bundles):
    return [{name: net.copy() for name, net in b.networks().items()} for b in bundles]


def _assert_unchanged(bundles, copies):
    for bundle, saved in zip(bundles, copies):
        for name, net in bundle.networks().items():
            for a, b in zip(net.arrays(), saved[name].arrays()):
                np.testing.assert_array_equal(a, b)


def test_bundle_shapes(tiny_maddpg, tiny_masac, rng):
    """Critic width is sum of observation widths plus sum of action widths."""
    maddpg = create_bundles(3, OBS_DIM, tiny_maddpg, rng)
    assert maddpg[0].critic.input_size == 3 * OBS_DIM + 3 * 5
    assert maddpg[0].actor.output_size == 5
    assert maddpg[0].target_critic.same_shape(maddpg[0].critic)
    assert maddpg[0].value is None
    assert set(maddpg[0].optimizers) == {"actor", "critic"}

    masac = create_bundles(2, OBS_DIM, tiny_masac, rng)
    assert masac[0].critic.input_size == 2 * OBS_DIM + 2 * 2
    assert masac[0].actor.output_size == 4
    assert masac[0].value.input_size == 2 * OBS_DIM
    assert masac[0].target_value.same_shape(masac[0].value)
    assert masac[0].target_actor is None
    assert set(masac[0].optimizers) == {"actor", "critic", "value"}


def test_critic_inputs_layout():
    obs = np.arange(12, dtype=float).reshape(2, 2, 3)
    act = np.arange(20, dtype=float).reshape(2, 2, 5) + 100
    x = critic_inputs(obs, act)
    np.testing.assert_array_equal(x[0], np.concatenate([obs[0].ravel(), act[0].ravel()]))
    np.testing.assert_array_equal(value_inputs(obs)[1], obs[1].ravel())


def test_maddpg_critic_loss_zero_when_q_equals_reward(rng, make_batch):
    """With gamma = 0 and Q forced to r the critic loss vanishes."""
    cfg = AlgoConfig(gamma=0.0, hidden_sizes=(8, 8), batch_size=8)
    bundles = create_bundles(2, OBS_DIM, cfg, rng)
    batch = make_batch(rng, 2, OBS_DIM, True, 8)
    batch.rewards[:] = 0.7
    _constant_output(bundles[0].critic, 0.7)
    assert maddpg_critic_loss(bundles, 0, batch, cfg).loss == pytest.approx(0.0, abs=1e-20)


def test_maddpg_terminal_target_is_reward(tiny_maddpg, rng, make_batch):
    """Done transitions ignore the bootstrap term."""
    bundles = create_bundles(2, OBS_DIM, tiny_maddpg, rng)
    batch = make_batch(rng, 2, OBS_DIM, True, 6)
    batch.dones[:] = 1.0
    _constant_output(bundles[1].critic, 0.25)
    _constant_output(bundles[1].target_critic, 50.0)
    result = maddpg_critic_loss(bundles, 1, batch, tiny_maddpg)
    assert result.loss == pytest.approx(np.mean((0.25 - batch.rewards) ** 2), rel=1e-12)


def test_maddpg_single_transition_hand_check(tiny_maddpg, rng, make_batch):
    """(Q - y)^2 on one transition with y from the target actors' argmax."""
    bundles = create_bundles(2, OBS_DIM, tiny_maddpg, rng)
    batch = make_batch(rng, 2, OBS_DIM, True, 1, done_fraction=0.0)

    next_actions = np.stack(
        [
            one_hot(np.argmax(forward(b.target_actor, batch.next_obs[0, j])), 5)
            for j, b in enumerate(bundles)
        ]
    )
    next_x = np.concatenate([batch.next_obs[0].ravel(), next_actions.ravel()])
    q_next = forward(bundles[0].target_critic, next_x)[0]
    y = batch.rewards[0] + tiny_maddpg.gamma * q_next
    x = np.concatenate([batch.obs[0].ravel(), batch.actions[0].ravel()])
    q = forward(bundles[0].critic, x)[0]

    result = maddpg_critic_loss(bundles, 0, batch, tiny_maddpg)
    assert abs(result.loss - (q - y) ** 2) < 1e-10


@pytest.mark.parametrize("seed", range(50))
def test_maddpg_critic_gradient(seed, tiny_maddpg, make_batch):
    rng = np.random.default_rng(seed)
    bundles = create_bundles(2, OBS_DIM, tiny_maddpg, rng)
    batch = make_batch(rng, 2, OBS_DIM, True, 4)
    result = maddpg_critic_loss(bundles, 0, batch, tiny_maddpg)
    numeric = numerical_grad(
        bundles[0].critic, lambda: maddpg_critic_loss(bundles, 0, batch, tiny_maddpg).loss
    )
    assert_grad_close(result.grad, numeric)


@pytest.mark.parametrize("seed", range(50))
def test_maddpg_actor_gradient(seed, tiny_maddpg, make_batch):
    """Finite differences through the Gumbel-softmax relaxation with frozen noise."""
    rng = np.random.default_rng(seed)
    bundles = create_bundles(2, OBS_DIM, tiny_maddpg, rng)
    batch = make_batch(rng, 2, OBS_DIM, True, 4)
    uniform = rng.uniform(size=(4, 5))
    result = maddpg_actor_loss(bundles, 1, batch, tiny_maddpg, uniform)
    numeric = numerical_grad(
        bundles[1].actor,
        lambda: maddpg_actor_loss(bundles, 1, batch, tiny_maddpg, uniform).loss,
    )
    assert_grad_close(result.grad, numeric)


def test_maddpg_actor_gradient_zero_without_action_dependence(tiny_maddpg, rng, make_batch):
    """A critic blind to agent i's action slot gives agent i no actor gradient."""
    bundles = create_bundles(2, OBS_DIM, tiny_maddpg, rng)
    batch = make_batch(rng, 2, OBS_DIM, True, 5)
    slot = slice(2 * OBS_DIM, 2 * OBS_DIM + 5)
    bundles[0].critic.weights[0][:, slot] = 0.0
    result = maddpg_actor_loss(bundles, 0, batch, tiny_maddpg, rng.uniform(size=(5, 5)))
    for g in result.grad.arrays():
        np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("seed", range(50))
def test_masac_value_gradient(seed, tiny_masac, make_batch):
    rng = np.random.default_rng(seed)
    bundles = create_bundles(2, OBS_DIM, tiny_masac, rng)
    batch = make_batch(rng, 2, OBS_DIM, False, 4)
    noise = rng.standard_normal((4, 2, 2))
    result = masac_value_loss(bundles, 0, batch, tiny_masac, noise)
    numeric = numerical_grad(
        bundles[0].value, lambda: masac_value_loss(bundles, 0, batch, tiny_masac, noise).loss
    )
    assert_grad_close(result.grad, numeric)


def test_masac_value_loss_zero_at_fixed_point(tiny_masac, rng, make_batch):
    """A value output equal to Q(o, a~) - alpha * log pi(a~ | o) has zero loss."""
    bundles = create_bundles(2, OBS_DIM, tiny_masac, rng)
    batch = make_batch(rng, 2, OBS_DIM, False, 1)
    noise = rng.standard_normal((1, 2, 2))

    fresh, log_probs = [], []
    for j, b in enumerate(bundles):
        dist = SquashedGaussianDist.from_output(forward(b.actor, batch.obs[:, j]))
        a, lp = squashed_gaussian_sample(dist, noise[:, j])
        fresh.append(a)
        log_probs.append(lp)
    q = forward(bundles[0].critic, critic_inputs(batch.obs, np.stack(fresh, axis=1)))[0, 0]
    target = q - tiny_masac.alpha * log_probs[0][0]

    _constant_output(bundles[0].value, target)
    assert masac_value_loss(bundles, 0, batch, tiny_masac, noise).loss < 1e-20


@pytest.mark.parametrize("seed", range(50))
def test_masac_q_gradient(seed, tiny_masac, make_batch):
    rng = np.random.default_rng(seed)
    bundles = create_bundles(2, OBS_DIM, tiny_masac, rng)
    batch = make_batch(rng, 2, OBS_DIM, False, 4)
    result = masac_q_loss(bundles, 1, batch, tiny_masac)
    numeric = numerical_grad(
        bundles[1].critic, lambda: masac_q_loss(bundles, 1, batch, tiny_masac).loss
    )
    assert_grad_close(result.grad, numeric)


def test_masac_q_targets(rng, make_batch):
    """gamma = 0 or done reduces the target to the reward; otherwise r + gamma * Vbar."""
    cfg = AlgoConfig(algorithm=Algorithm.MASAC, hidden_sizes=(8,), batch_size=4)
    bundles = create_bundles(2, OBS_DIM, cfg, rng)
    batch = make_batch(rng, 2, OBS_DIM, False, 4, done_fraction=0.0)
    _constant_output(bundles[0].critic, 1.5)
    _constant_output(bundles[0].target_value, 2.0)

    result = masac_q_loss(bundles, 0, batch, cfg)
    assert result.loss == pytest.approx(np.mean((1.5 - (batch.rewards + 0.95 * 2.0)) ** 2))

    no_bootstrap = cfg.model_copy(update={"gamma": 0.0})
    assert masac_q_loss(bundles, 0, batch, no_bootstrap).loss == pytest.approx(
        np.mean((1.5 - batch.rewards) ** 2)
    )
    batch.dones[:] = 1.0
    assert masac_q_loss(bundles, 0, batch, cfg).loss == pytest.approx(
        np.mean((1.5 - batch.rewards) ** 2)
    )


@pytest.mark.parametrize("seed", range(50))
def test_masac_actor_gradient(seed, tiny_masac, make_batch):
    """Finite differences through the reparameterized sample with frozen noise."""
    rng = np.random.default_rng(seed)
    bundles = create_bundles(2, OBS_DIM, tiny_masac, rng)
    batch = make_batch(rng, 2, OBS_DIM, False, 4)
    noise = rng.standard_normal((4, 2, 2))
    result = masac_actor_loss(bundles, 0, batch, tiny_masac, noise)
    numeric = numerical_grad(
        bundles[0].actor, lambda: masac_actor_loss(bundles, 0, batch, tiny_masac, noise).loss
    )
    assert_grad_close(result.grad, numeric)


def test_masac_actor_gradient_zero_without_entropy_or_critic(tiny_masac, rng, make_batch):
    cfg = tiny_masac.model_copy(update={"alpha": 0.0})
    bundles = create_bundles(2, OBS_DIM, cfg, rng)
    bundles[0].critic.weights[0][:] = 0.0
    batch = make_batch(rng, 2, OBS_DIM, False, 5)
    result = masac_actor_loss(bundles, 0, batch, cfg, rng.standard_normal((5, 2, 2)))
    for g in result.grad.arrays():
        np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_masac_actor_raises_entropy_when_critic_is_blind(rng):
    """With a constant critic the actor loss is alpha * E[log pi], which the updates lower."""
    cfg = AlgoConfig(
        algorithm=Algorithm.MASAC, alpha=1.0, hidden_sizes=(8,), batch_size=64, actor_lr=1e-2
    )
    bundles = create_bundles(1, 1, cfg, rng)
    bundles[0].critic.weights[0][:] = 0.0
    # start narrow: mean 0, log-stddev -2
    bundles[0].actor.weights[-1][:] = 0.0
    bundles[0].actor.biases[-1][:] = [0.0, 0.0, -2.0, -2.0]
    obs = np.ones((64, 1, 1))
    batch = TransitionBatch(obs, np.zeros((64, 1, 2)), np.zeros(64), obs, np.zeros(64))
    fixed_noise = np.random.default_rng(99).standard_normal((64, 1, 2))

    before = masac_actor_loss(bundles, 0, batch, cfg, fixed_noise).loss
    for _ in range(100):
        result = masac_actor_loss(bundles, 0, batch, cfg, rng.standard_normal((64, 1, 2)))
        adam_step(bundles[0].actor, result.grad, bundles[0].optimizers["actor"])
    after = masac_actor_loss(bundles, 0, batch, cfg, fixed_noise).loss
    assert after < before - 0.5


def test_updates_leave_parameters_untouched(tiny_maddpg, tiny_masac, rng, make_batch):
    """The update functions only compute gradients; each belongs to its own agent."""
    bundles = create_bundles(2, OBS_DIM, tiny_maddpg, rng)
    copies = _param_copies(bundles)
    batch = make_batch(rng, 2, OBS_DIM, True, 8)
    for results, name in (
        (maddpg_critic_update(bundles, batch, tiny_maddpg), "critic"),
        (maddpg_actor_update(bundles, batch, tiny_maddpg, rng), "actor"),
    ):
        assert [r.agent for r in results] == [0, 1]
        for r in results:
            assert r.grad.same_shape(getattr(bundles[r.agent], name))
    _assert_unchanged(bundles, copies)

    sac = create_bundles(2, OBS_DIM, tiny_masac, rng)
    copies = _param_copies(sac)
    batch = make_batch(rng, 2, OBS_DIM, False, 8)
    masac_value_update(sac, batch, tiny_masac, rng)
    masac_q_update(sac, batch, tiny_masac)
    masac_actor_update(sac, batch, tiny_masac, rng)
    _assert_unchanged(sac, copies)


def test_critic_loss_ignores_other_agents_critics(tiny_maddpg, rng, make_batch):
    bundles = create_bundles(2, OBS_DIM, tiny_maddpg, rng)
    batch = make_batch(rng, 2, OBS_DIM, True, 8)
    before = maddpg_critic_loss(bundles, 0, batch, tiny_maddpg).loss
    bundles[1].critic.weights[0] += 1.0
    assert maddpg_critic_loss(bundles, 0, batch, tiny_maddpg).loss == before


def test_critic_regression_converges_with_gamma_zero(rng, make_batch):
    """With gamma = 0 on a fixed batch the critic loss shrinks toward zero."""
    cfg = AlgoConfig(gamma=0.0, hidden_sizes=(16, 16), batch_size=16)
    bundles = create_bundles(2, OBS_DIM, cfg, rng)
    trainer = MultiAgentTrainer(bundles, cfg, rng)
    batch = make_batch(rng, 2, OBS_DIM, True, 16)
    first = trainer.update(batch)["critic"]
    for _ in range(1000):
        last = trainer.update(batch)["critic"]
    assert trainer.updates == 1001
    for a, b in zip(first, last):
        assert b < 0.1 * a


def test_target_update_rates(tiny_maddpg, rng):
    bundles = create_bundles(2, OBS_DIM, tiny_maddpg, rng)
    bundles[0].critic.weights[0] += 1.0
    target_update(bundles, tiny_maddpg.model_copy(update={"rho": 1.0}))
    np.testing.assert_array_equal(bundles[0].target_critic.weights[0], bundles[0].critic.weights[0])

    gap = bundles[0].actor.weights[0] - bundles[0].target_actor.weights[0]
    bundles[0].actor.weights[0] += 1.0
    target_update(bundles, tiny_maddpg)
    np.testing.assert_allclose(
        bundles[0].actor.weights[0] - bundles[0].target_actor.weights[0], 0.99 * (gap + 1.0)
    )


def test_select_action_discrete(tiny_maddpg, rng):
    bundle = create_bundles(1, OBS_DIM, tiny_maddpg, rng)[0]
    obs = rng.normal(size=OBS_DIM)
    greedy = int(np.argmax(forward(bundle.actor, obs)))
    assert all(
        select_action(bundle, obs, ActionMode.EXPLORE, rng, epsilon=0.0) == greedy
        for _ in range(50)
    )
    assert select_action(bundle, obs, ActionMode.EVALUATE) == greedy


def test_select_action_uniform_exploration(tiny_maddpg, rng):
    """With epsilon = 1 each of the 5 actions shows up about 20% of the time."""
    bundle = create_bundles(1, OBS_DIM, tiny_maddpg, rng)[0]
    obs = rng.normal(size=OBS_DIM)
    draws = [
        select_action(bundle, obs, ActionMode.EXPLORE, rng, epsilon=1.0)
        for _ in range(10_000)
    ]
    freq = np.bincount(draws, minlength=5) / 10_000
    sigma = np.sqrt(0.2 * 0.8 / 10_000)
    assert np.all(np.abs(freq - 0.2) < 5 * sigma)


def test_select_action_continuous(tiny_masac, rng):
    bundle = create_bundles(1, OBS_DIM, tiny_masac, rng)[0]
    obs = rng.normal(size=OBS_DIM)
    first = select_action(bundle, obs, ActionMode.EVALUATE)
    np.testing.assert_array_equal(first, select_action(bundle, obs, ActionMode.EVALUATE))
    np.testing.assert_allclose(first, np.tanh(forward(bundle.actor, obs)[:2]))
    sample = select_action(bundle, obs, ActionMode.EXPLORE, rng)
    assert sample.shape == (2,)
    assert np.all(np.abs(sample) < 1.0)


def test_epsilon_schedule():
    """Linear from 1.0 to 0.05 over the first 20% of steps, flat afterwards."""
    cfg = AlgoConfig()
    assert epsilon_at(0, 1000, cfg) == pytest.approx(1.0)
    assert epsilon_at(100, 1000, cfg) == pytest.approx(0.525)
    assert epsilon_at(200, 1000, cfg) == pytest.approx(0.05)
    assert epsilon_at(900, 1000, cfg) == pytest.approx(0.05)


@pytest.mark.slow
def test_masac_bandit_concentrates_near_zero():
    """On a single-state bandit with reward -|a|^2 evaluation actions settle near 0."""
    rng = np.random.default_rng(0)
    cfg = AlgoConfig(
        algorithm=Algorithm.MASAC,
        hidden_sizes=(32, 32),
        batch_size=128,
        gamma=0.0,
        actor_lr=1e-3,
        critic_lr=1e-3,
    )
    bundles = create_bundles(1, 1, cfg, rng)
    trainer = MultiAgentTrainer(bundles, cfg, rng)
    obs = np.ones((128, 1, 1))
    for _ in range(2_000):
        actions = rng.uniform(-1.0, 1.0, size=(128, 1, 2))
        rewards = -np.sum(actions[:, 0] ** 2, axis=1)
        trainer.update(TransitionBatch(obs, actions, rewards, obs, np.ones(128)))
    action = select_action(bundles[0], np.ones(1), ActionMode.EVALUATE)
    assert np.all(np.abs(action) < 0.1)


@pytest.mark.slow
def test_maddpg_matrix_game_finds_dominant_joint_action():
    """Two agents recover the single rewarding joint action in at least 9 of 10 seeds."""
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cfg = AlgoConfig(hidden_sizes=(16, 16), batch_size=64, gamma=0.0)
        bundles = create_bundles(2, 1, cfg, rng)
        trainer = MultiAgentTrainer(bundles, cfg, rng)
        obs = np.ones((64, 2, 1))
        for _ in range(500):
            joint = rng.integers(5, size=(64, 2))
            rewards = ((joint[:, 0] == 3) & (joint[:, 1] == 1)).astype(float)
            trainer.update(TransitionBatch(obs, one_hot(joint, 5), rewards, obs, np.ones(64)))
        greedy = tuple(select_action(b, np.ones(1), ActionMode.EVALUATE) for b in bundles)
        hits += greedy == (3, 1)
    assert hits >= 9
