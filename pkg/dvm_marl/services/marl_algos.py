"""Centralized-critic updates: discrete MADDPG and multiagent soft actor-critic.

Every ``*_update`` function is pure: it reads the bundles and a batch and returns
one ``AgentLoss`` (scalar loss + gradient) per agent without touching any
parameters. ``MultiAgentTrainer`` applies those gradients with Adam in the
usual order (critics, then actors, then targets).

Critic input layout, fixed agent order::

    [o^1, ..., o^n, a^1, ..., a^n]

with one-hot discrete actions or continuous force vectors.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from dvm_marl.config.experiment_config import AlgoConfig
from dvm_marl.core.errors import ShapeError
from dvm_marl.core.models import ActionMode
from dvm_marl.core.tensor_core import (
    AdamState,
    Grad,
    ParamStore,
    SquashedGaussianDist,
    adam_step,
    backward,
    forward,
    gumbel_softmax,
    gumbel_softmax_backward,
    init_params,
    one_hot,
    polyak_average,
    squashed_gaussian_backward,
    squashed_gaussian_sample,
)
from dvm_marl.services.particle_envs import CONTINUOUS_ACTION_DIM, NUM_DISCRETE_ACTIONS
from dvm_marl.services.replay import TransitionBatch

logger = logging.getLogger(__name__)

TARGET_PAIRS = (
    ("target_actor", "actor"),
    ("target_critic", "critic"),
    ("target_value", "value"),
)


@dataclass
class AgentBundle:
    """One agent's networks, target networks and optimizer states.

    MADDPG bundles carry ``target_actor`` and ``target_critic``; MA-SAC bundles
    carry ``value`` and ``target_value``. ``optimizers`` maps each trainable
    network name (``actor``, ``critic``, ``value``) to its Adam state.
    """

    actor: ParamStore
    critic: ParamStore
    discrete: bool
    value: Optional[ParamStore] = None
    target_actor: Optional[ParamStore] = None
    target_critic: Optional[ParamStore] = None
    target_value: Optional[ParamStore] = None
    optimizers: Dict[str, AdamState] = field(default_factory=dict)

    def networks(self) -> Dict[str, ParamStore]:
        """All present networks by attribute name."""
        names = ("actor", "critic", "value", "target_actor", "target_critic", "target_value")
        return {name: getattr(self, name) for name in names if getattr(self, name) is not None}

    def copy(self) -> "AgentBundle":
        copies = {name: net.copy() for name, net in self.networks().items()}
        optimizers = {
            name: AdamState(
                first_moment=state.first_moment.copy(),
                second_moment=state.second_moment.copy(),
                learning_rate=state.learning_rate,
                beta1=state.beta1,
                beta2=state.beta2,
                eps=state.eps,
                step=state.step,
            )
            for name, state in self.optimizers.items()
        }
        return AgentBundle(discrete=self.discrete, optimizers=optimizers, **copies)


@dataclass
class AgentLoss:
    """Loss value and gradient for one agent's network."""

    agent: int
    loss: float
    grad: Grad


def action_width(discrete: bool) -> int:
    """Width of one agent's action slot in the critic input."""
    return NUM_DISCRETE_ACTIONS if discrete else CONTINUOUS_ACTION_DIM


def actor_output_width(discrete: bool) -> int:
    return NUM_DISCRETE_ACTIONS if discrete else 2 * CONTINUOUS_ACTION_DIM


def critic_inputs(obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Flatten joint ``(B, n, d)`` observations and ``(B, n, k)`` actions."""
    if obs.shape[:-1] != actions.shape[:-1]:
        raise ShapeError(f"observations {obs.shape} and actions {actions.shape} disagree")
    lead = obs.shape[:-2]
    return np.concatenate(
        [obs.reshape(lead + (-1,)), actions.reshape(lead + (-1,))], axis=-1
    )


def value_inputs(obs: np.ndarray) -> np.ndarray:
    return obs.reshape(obs.shape[:-2] + (-1,))


def _action_slot(num_agents: int, obs_dim: int, width: int, agent: int) -> slice:
    start = num_agents * obs_dim + agent * width
    return slice(start, start + width)


def create_bundle(
    num_agents: int, obs_dim: int, cfg: AlgoConfig, rng: np.random.Generator
) -> AgentBundle:
    """Initialize one agent's networks for the configured algorithm."""
    hidden = list(cfg.hidden_sizes)
    width = action_width(cfg.discrete)
    actor = init_params([obs_dim] + hidden + [actor_output_width(cfg.discrete)], rng)
    critic = init_params([num_agents * (obs_dim + width)] + hidden + [1], rng)
    bundle = AgentBundle(actor=actor, critic=critic, discrete=cfg.discrete)
    if cfg.discrete:
        bundle.target_actor = actor.copy()
        bundle.target_critic = critic.copy()
    else:
        bundle.value = init_params([num_agents * obs_dim] + hidden + [1], rng)
        bundle.target_value = bundle.value.copy()
    reset_optimizers(bundle, cfg)
    return bundle


def create_bundles(
    num_agents: int, obs_dim: int, cfg: AlgoConfig, rng: np.random.Generator
) -> List[AgentBundle]:
    return [create_bundle(num_agents, obs_dim, cfg, rng) for _ in range(num_agents)]


def reset_optimizers(
    bundle: AgentBundle, cfg: AlgoConfig, names: Optional[Sequence[str]] = None
) -> None:
    """Give the named trainable networks (default: all) fresh Adam states."""
    rates = {"actor": cfg.actor_lr, "critic": cfg.critic_lr, "value": cfg.critic_lr}
    for name in names or rates:
        net = getattr(bundle, name)
        if net is not None:
            bundle.optimizers[name] = AdamState.for_params(net, rates[name])


def _mse(prediction: np.ndarray, target: np.ndarray):
    err = prediction - target
    return float(np.mean(err**2)), 2.0 * err / err.shape[0]


# --- MADDPG (discrete) ----------------------------------------------------------


def maddpg_target_actions(bundles: Sequence[AgentBundle], next_obs: np.ndarray) -> np.ndarray:
    """One-hot argmax actions of every agent's target actor ``(B, n, 5)``."""
    return np.stack(
        [
            one_hot(
                np.argmax(forward(b.target_actor, next_obs[:, j]), axis=-1),
                NUM_DISCRETE_ACTIONS,
            )
            for j, b in enumerate(bundles)
        ],
        axis=1,
    )


def maddpg_critic_loss(
    bundles: Sequence[AgentBundle],
    agent: int,
    batch: TransitionBatch,
    cfg: AlgoConfig,
    next_actions: Optional[np.ndarray] = None,
) -> AgentLoss:
    """MSE between ``Q^i(o, a)`` and ``r + gamma * Qbar^i(o', abar')``."""
    bundle = bundles[agent]
    if next_actions is None:
        next_actions = maddpg_target_actions(bundles, batch.next_obs)
    q_next = forward(bundle.target_critic, critic_inputs(batch.next_obs, next_actions))[:, 0]
    targets = batch.rewards + cfg.gamma * (1.0 - batch.dones) * q_next

    x = critic_inputs(batch.obs, batch.actions)
    loss, upstream = _mse(forward(bundle.critic, x)[:, 0], targets)
    grad, _ = backward(bundle.critic, x, upstream[:, None])
    return AgentLoss(agent, loss, grad)


def maddpg_critic_update(
    bundles: Sequence[AgentBundle], batch: TransitionBatch, cfg: AlgoConfig
) -> List[AgentLoss]:
    next_actions = maddpg_target_actions(bundles, batch.next_obs)
    return [
        maddpg_critic_loss(bundles, i, batch, cfg, next_actions) for i in range(len(bundles))
    ]


def maddpg_actor_loss(
    bundles: Sequence[AgentBundle],
    agent: int,
    batch: TransitionBatch,
    cfg: AlgoConfig,
    uniform: np.ndarray,
) -> AgentLoss:
    """``-mean Q^i`` with agent i's slot replaced by a Gumbel-softmax relaxation.

    Args:
        uniform: U(0,1) draws ``(B, 5)`` feeding the Gumbel noise
    """
    bundle = bundles[agent]
    obs_i = batch.obs[:, agent]
    logits = forward(bundle.actor, obs_i)
    relaxed = gumbel_softmax(logits, cfg.gumbel_temperature, uniform)

    actions = batch.actions.copy()
    actions[:, agent] = relaxed
    x = critic_inputs(batch.obs, actions)
    q = forward(bundle.critic, x)[:, 0]
    b = q.shape[0]
    loss = -float(np.mean(q))

    _, grad_x = backward(bundle.critic, x, np.full((b, 1), -1.0 / b))
    n, obs_dim = batch.obs.shape[1:]
    grad_action = grad_x[:, _action_slot(n, obs_dim, NUM_DISCRETE_ACTIONS, agent)]
    grad_logits = gumbel_softmax_backward(relaxed, grad_action, cfg.gumbel_temperature)
    grad, _ = backward(bundle.actor, obs_i, grad_logits)
    return AgentLoss(agent, loss, grad)


def maddpg_actor_update(
    bundles: Sequence[AgentBundle],
    batch: TransitionBatch,
    cfg: AlgoConfig,
    rng: np.random.Generator,
) -> List[AgentLoss]:
    return [
        maddpg_actor_loss(
            bundles, i, batch, cfg, rng.uniform(size=(len(batch), NUM_DISCRETE_ACTIONS))
        )
        for i in range(len(bundles))
    ]


# --- MA-SAC (continuous) --------------------------------------------------------


def _policy_samples(
    bundles: Sequence[AgentBundle], obs: np.ndarray, noise: np.ndarray
) -> tuple:
    """Reparameterized actions ``(B, n, 2)`` and log-densities ``(B, n)`` of all agents."""
    actions, log_probs = [], []
    for j, b in enumerate(bundles):
        dist = SquashedGaussianDist.from_output(forward(b.actor, obs[:, j]))
        a, lp = squashed_gaussian_sample(dist, noise[:, j])
        actions.append(a)
        log_probs.append(lp)
    return np.stack(actions, axis=1), np.stack(log_probs, axis=1)


def masac_value_loss(
    bundles: Sequence[AgentBundle],
    agent: int,
    batch: TransitionBatch,
    cfg: AlgoConfig,
    noise: np.ndarray,
) -> AgentLoss:
    """MSE between ``V^i(o)`` and ``Q^i(o, a~) - alpha * log pi^i(a~^i | o^i)``.

    Args:
        noise: Standard-normal draws ``(B, n, 2)`` for the fresh joint action
    """
    bundle = bundles[agent]
    fresh, log_probs = _policy_samples(bundles, batch.obs, noise)
    q = forward(bundle.critic, critic_inputs(batch.obs, fresh))[:, 0]
    targets = q - cfg.alpha * log_probs[:, agent]

    x = value_inputs(batch.obs)
    loss, upstream = _mse(forward(bundle.value, x)[:, 0], targets)
    grad, _ = backward(bundle.value, x, upstream[:, None])
    return AgentLoss(agent, loss, grad)


def masac_value_update(
    bundles: Sequence[AgentBundle],
    batch: TransitionBatch,
    cfg: AlgoConfig,
    rng: np.random.Generator,
) -> List[AgentLoss]:
    shape = batch.obs.shape[:2] + (CONTINUOUS_ACTION_DIM,)
    return [
        masac_value_loss(bundles, i, batch, cfg, rng.standard_normal(shape))
        for i in range(len(bundles))
    ]


def masac_q_loss(
    bundles: Sequence[AgentBundle], agent: int, batch: TransitionBatch, cfg: AlgoConfig
) -> AgentLoss:
    """MSE between ``Q^i(o, a)`` and ``r + gamma * Vbar^i(o')`` (masked when done)."""
    bundle = bundles[agent]
    v_next = forward(bundle.target_value, value_inputs(batch.next_obs))[:, 0]
    targets = batch.rewards + cfg.gamma * (1.0 - batch.dones) * v_next

    x = critic_inputs(batch.obs, batch.actions)
    loss, upstream = _mse(forward(bundle.critic, x)[:, 0], targets)
    grad, _ = backward(bundle.critic, x, upstream[:, None])
    return AgentLoss(agent, loss, grad)


def masac_q_update(
    bundles: Sequence[AgentBundle], batch: TransitionBatch, cfg: AlgoConfig
) -> List[AgentLoss]:
    return [masac_q_loss(bundles, i, batch, cfg) for i in range(len(bundles))]


def masac_actor_loss(
    bundles: Sequence[AgentBundle],
    agent: int,
    batch: TransitionBatch,
    cfg: AlgoConfig,
    noise: np.ndarray,
) -> AgentLoss:
    """``mean[alpha * log pi^i(a~^i|o^i) - Q^i(o, a^1..a~^i..a^n)]``.

    Other agents' slots hold samples of their current policies and carry no
    gradient; agent i's slot is reparameterized through its own noise.

    Args:
        noise: Standard-normal draws ``(B, n, 2)``
    """
    bundle = bundles[agent]
    actions, _ = _policy_samples(bundles, batch.obs, noise)

    obs_i = batch.obs[:, agent]
    output = forward(bundle.actor, obs_i)
    dist = SquashedGaussianDist.from_output(output)
    action_i, log_prob_i = squashed_gaussian_sample(dist, noise[:, agent])
    actions[:, agent] = action_i

    x = critic_inputs(batch.obs, actions)
    q = forward(bundle.critic, x)[:, 0]
    b = q.shape[0]
    loss = float(np.mean(cfg.alpha * log_prob_i - q))

    _, grad_x = backward(bundle.critic, x, np.full((b, 1), -1.0 / b))
    n, obs_dim = batch.obs.shape[1:]
    grad_action = grad_x[:, _action_slot(n, obs_dim, CONTINUOUS_ACTION_DIM, agent)]
    d = CONTINUOUS_ACTION_DIM
    grad_mean, grad_log_std = squashed_gaussian_backward(
        output[:, :d], output[:, d:], noise[:, agent], grad_action, np.full(b, cfg.alpha / b)
    )
    grad, _ = backward(bundle.actor, obs_i, np.concatenate([grad_mean, grad_log_std], axis=1))
    return AgentLoss(agent, loss, grad)


def masac_actor_update(
    bundles: Sequence[AgentBundle],
    batch: TransitionBatch,
    cfg: AlgoConfig,
    rng: np.random.Generator,
) -> List[AgentLoss]:
    shape = batch.obs.shape[:2] + (CONTINUOUS_ACTION_DIM,)
    return [
        masac_actor_loss(bundles, i, batch, cfg, rng.standard_normal(shape))
        for i in range(len(bundles))
    ]


# --- shared ---------------------------------------------------------------------


def target_update(bundles: Sequence[AgentBundle], cfg: AlgoConfig) -> Sequence[AgentBundle]:
    """Polyak-average every target network toward its source with rate ``rho``."""
    for bundle in bundles:
        for target_name, source_name in TARGET_PAIRS:
            target = getattr(bundle, target_name)
            if target is not None:
                polyak_average(target, getattr(bundle, source_name), cfg.rho)
    return bundles


def epsilon_at(step: int, total_steps: int, cfg: AlgoConfig) -> float:
    """Linear decay from ``epsilon_start`` to ``epsilon_end`` over the first
    ``epsilon_decay_fraction`` of ``total_steps``, flat afterwards."""
    horizon = cfg.epsilon_decay_fraction * max(total_steps, 1)
    frac = min(step / horizon, 1.0) if horizon > 0 else 1.0
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


def select_action(
    bundle: AgentBundle,
    obs: np.ndarray,
    mode: ActionMode,
    rng: Optional[np.random.Generator] = None,
    epsilon: float = 0.0,
) -> Union[int, np.ndarray]:
    """Pick one agent's action from its own observation.

    MADDPG explores epsilon-greedily around the argmax logit and evaluates with
    the argmax; MA-SAC explores by sampling and evaluates with ``tanh(mean)``.
    Evaluation never touches ``rng``.
    """
    output = forward(bundle.actor, obs)
    if bundle.discrete:
        greedy = int(np.argmax(output))
        if mode is ActionMode.EXPLORE and rng.random() < epsilon:
            return int(rng.integers(NUM_DISCRETE_ACTIONS))
        return greedy
    dist = SquashedGaussianDist.from_output(output)
    if mode is ActionMode.EVALUATE:
        return dist.deterministic()
    action, _ = squashed_gaussian_sample(dist, rng.standard_normal(dist.mean.shape))
    return action


def select_joint_action(
    bundles: Sequence[AgentBundle],
    joint_obs: np.ndarray,
    mode: ActionMode,
    rng: Optional[np.random.Generator] = None,
    epsilon: float = 0.0,
) -> np.ndarray:
    """Joint action in the form ``particle_envs.step`` consumes."""
    actions = [
        select_action(b, joint_obs[i], mode, rng, epsilon) for i, b in enumerate(bundles)
    ]
    if bundles[0].discrete:
        return np.array(actions, dtype=np.int64)
    return np.stack(actions)


def encode_joint_action(actions: np.ndarray, discrete: bool) -> np.ndarray:
    """Critic-side encoding: one-hot rows (discrete) or force vectors (continuous)."""
    if discrete:
        return one_hot(actions, NUM_DISCRETE_ACTIONS)
    return np.asarray(actions, dtype=np.float64)


class MultiAgentTrainer:
    """Applies one round of centralized-critic updates per call."""

    def __init__(self, bundles: List[AgentBundle], cfg: AlgoConfig, rng: np.random.Generator):
        self.bundles = bundles
        self.cfg = cfg
        self.rng = rng
        self.updates = 0

    def _apply(self, name: str, results: List[AgentLoss]) -> List[float]:
        losses = []
        for result in results:
            bundle = self.bundles[result.agent]
            if not (np.isfinite(result.loss) and result.grad.is_finite()):
                logger.warning(
                    f"Non-finite {name} loss for agent {result.agent}; update skipped"
                )
            else:
                adam_step(getattr(bundle, name), result.grad, bundle.optimizers[name])
            losses.append(result.loss)
        return losses

    def update(self, batch: TransitionBatch) -> Dict[str, List[float]]:
        """Run critic, actor and target updates on one batch.

        Returns:
            Per-agent losses keyed by ``critic``, ``actor`` (and ``value`` for MA-SAC)
        """
        losses: Dict[str, List[float]] = {}
        if self.cfg.discrete:
            losses["critic"] = self._apply(
                "critic", maddpg_critic_update(self.bundles, batch, self.cfg)
            )
            losses["actor"] = self._apply(
                "actor", maddpg_actor_update(self.bundles, batch, self.cfg, self.rng)
            )
        else:
            losses["value"] = self._apply(
                "value", masac_value_update(self.bundles, batch, self.cfg, self.rng)
            )
            losses["critic"] = self._apply(
                "critic", masac_q_update(self.bundles, batch, self.cfg)
            )
            losses["actor"] = self._apply(
                "actor", masac_actor_update(self.bundles, batch, self.cfg, self.rng)
            )
        target_update(self.bundles, self.cfg)
        self.updates += 1
        return losses
