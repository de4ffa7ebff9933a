"""Distillation with value matching (DVM).

Homogeneous agents are merged into one distilled actor (KL distillation of every
agent's policy) and one distilled critic (regressed so that every agent
permutation of a joint input reproduces the agent critic's value on the
original ordering). All agents are then hard-updated from the distilled
networks and keep learning from there.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dvm_marl.config.experiment_config import AlgoConfig, DvmConfig
from dvm_marl.core.errors import ConfigurationError, HomogeneityError
from dvm_marl.core.models import DvmMode
from dvm_marl.core.tensor_core import (
    AdamState,
    Grad,
    LOG_STD_MAX,
    LOG_STD_MIN,
    ParamStore,
    adam_step,
    backward,
    copy_params,
    forward,
    init_params,
    kl_categorical,
    kl_gaussian,
    kl_gaussian_backward,
    softmax_with_temperature,
)
from dvm_marl.services.marl_algos import (
    AgentBundle,
    critic_inputs,
    reset_optimizers,
    value_inputs,
)
from dvm_marl.services.particle_envs import agent_permutations, permute_joint
from dvm_marl.services.replay import ReplayBuffer, TransitionBatch

logger = logging.getLogger(__name__)

DvmSources = Union[ReplayBuffer, Sequence[Tuple[ReplayBuffer, int]]]

_LOG_EVERY = 256
_ALL_NETWORKS = ("actor", "critic", "value")


@dataclass
class DistilledBundle:
    """Distilled actor, critic and (MA-SAC) value networks shared by all agents."""

    actor: ParamStore
    critic: ParamStore
    discrete: bool
    value: Optional[ParamStore] = None
    target_value: Optional[ParamStore] = None
    optimizers: Dict[str, AdamState] = field(default_factory=dict)

    @classmethod
    def fresh(
        cls, template: AgentBundle, rng: np.random.Generator, learning_rate: float
    ) -> "DistilledBundle":
        """Newly initialized networks with the template agent's architecture."""
        bundle = cls(
            actor=init_params(template.actor.sizes, rng),
            critic=init_params(template.critic.sizes, rng),
            discrete=template.discrete,
        )
        if template.value is not None:
            bundle.value = init_params(template.value.sizes, rng)
            bundle.target_value = bundle.value.copy()
        bundle.reset_optimizers(learning_rate)
        return bundle

    @classmethod
    def from_agent(cls, template: AgentBundle, learning_rate: float) -> "DistilledBundle":
        """Warm start: copies of the template agent's networks."""
        bundle = cls(
            actor=template.actor.copy(),
            critic=template.critic.copy(),
            discrete=template.discrete,
        )
        if template.value is not None:
            bundle.value = template.value.copy()
            bundle.target_value = template.value.copy()
        bundle.reset_optimizers(learning_rate)
        return bundle

    def reset_optimizers(self, learning_rate: float) -> None:
        self.optimizers = {
            name: AdamState.for_params(getattr(self, name), learning_rate)
            for name in ("actor", "critic", "value")
            if getattr(self, name) is not None
        }


@dataclass
class ValueMatchResult:
    """Losses of one value-matching step.

    Attributes:
        critic_loss: Permutation-summed, batch-averaged critic MSE
        value_loss: Same for the value network (MA-SAC), else ``None``
        permutations: Permutations evaluated per sample
    """

    critic_loss: float
    value_loss: Optional[float]
    permutations: int


def hard_update(target: ParamStore, source: ParamStore) -> ParamStore:
    """Overwrite ``target`` with a bitwise copy of ``source``; no aliasing."""
    return copy_params(target, source)


# --- distillation ---------------------------------------------------------------


def distill_loss(
    student: ParamStore,
    teacher: ParamStore,
    obs: np.ndarray,
    temperature: float,
    discrete: bool,
) -> Tuple[float, Grad]:
    """``KL(teacher || student)`` averaged over the batch, with its student gradient.

    Discrete policies compare temperature softmaxes of their logits. Continuous
    policies compare their pre-squash Gaussians in closed form, averaged over
    batch and action dimensions.

    Args:
        student: Distilled actor
        teacher: Agent actor
        obs: Single-agent observations ``(B, obs_dim)``
        temperature: Softmax temperature (discrete only)
        discrete: Action space kind

    Returns:
        Tuple of (loss, gradient w.r.t. the student parameters)
    """
    teacher_out = forward(teacher, obs)
    student_out = forward(student, obs)
    b = teacher_out.shape[0]

    if discrete:
        p = softmax_with_temperature(teacher_out, temperature)
        q = softmax_with_temperature(student_out, temperature)
        loss = float(np.mean(kl_categorical(p, q)))
        upstream = (q.probs - p.probs) / (temperature * b)
    else:
        d = teacher_out.shape[1] // 2
        raw_log_std = student_out[:, d:]
        t_mean = teacher_out[:, :d]
        t_log_std = np.clip(teacher_out[:, d:], LOG_STD_MIN, LOG_STD_MAX)
        s_mean = student_out[:, :d]
        s_log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        loss = float(np.mean(kl_gaussian(t_mean, t_log_std, s_mean, s_log_std)))
        g_mean, g_log_std = kl_gaussian_backward(t_mean, t_log_std, s_mean, s_log_std)
        inside = (raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)
        upstream = np.concatenate([g_mean, g_log_std * inside], axis=1) / (b * d)

    grad, _ = backward(student, obs, upstream)
    return loss, grad


def distill_step(
    distilled: DistilledBundle, agent: AgentBundle, obs_batch: np.ndarray, cfg: DvmConfig
) -> float:
    """One Adam step of the distilled actor toward one agent's policy.

    Args:
        distilled: Student networks (updated in place)
        agent: Teacher agent
        obs_batch: Teacher observations ``(B, obs_dim)``
        cfg: DVM settings

    Returns:
        KL loss before the step
    """
    loss, grad = distill_loss(
        distilled.actor, agent.actor, obs_batch, cfg.temperature, distilled.discrete
    )
    adam_step(distilled.actor, grad, distilled.optimizers["actor"])
    return loss


# --- value matching -------------------------------------------------------------


def check_permutation_cap(num_agents: int, cfg: DvmConfig) -> None:
    count = math.factorial(num_agents)
    if count > cfg.permutation_cap:
        raise ConfigurationError(
            f"{num_agents} agents give {count} permutations, above the cap of "
            f"{cfg.permutation_cap}"
        )


def _permutation_regression(
    student: ParamStore,
    targets: np.ndarray,
    inputs_for: Callable[[Tuple[int, ...]], np.ndarray],
    permutations: Sequence[Tuple[int, ...]],
) -> Tuple[float, Grad]:
    loss = 0.0
    grad = Grad.zeros_for(student)
    for perm in permutations:
        x = inputs_for(perm)
        err = forward(student, x)[:, 0] - targets
        loss += float(np.mean(err**2))
        g, _ = backward(student, x, (2.0 * err / err.shape[0])[:, None])
        grad = grad + g
    return loss, grad


def value_match_critic_loss(
    student: ParamStore,
    teacher: ParamStore,
    obs: np.ndarray,
    actions: np.ndarray,
    permutations: Optional[Sequence[Tuple[int, ...]]] = None,
) -> Tuple[float, Grad]:
    """``sum_X mean_b (Q_teacher(o, a) - Q_student(X(o), X(a)))^2``.

    Observation and action blocks are always permuted together. The teacher
    value on the original ordering is a constant target.
    """
    if permutations is None:
        permutations = agent_permutations(obs.shape[1])
    targets = forward(teacher, critic_inputs(obs, actions))[:, 0]
    return _permutation_regression(
        student,
        targets,
        lambda perm: critic_inputs(*permute_joint(obs, actions, perm)),
        permutations,
    )


def value_match_value_loss(
    student: ParamStore,
    teacher: ParamStore,
    obs: np.ndarray,
    permutations: Optional[Sequence[Tuple[int, ...]]] = None,
) -> Tuple[float, Grad]:
    """``sum_X mean_b (V_teacher(o) - V_student(X(o)))^2``."""
    if permutations is None:
        permutations = agent_permutations(obs.shape[1])
    targets = forward(teacher, value_inputs(obs))[:, 0]
    return _permutation_regression(
        student,
        targets,
        lambda perm: value_inputs(obs[:, list(perm)]),
        permutations,
    )


def value_match_step(
    distilled: DistilledBundle,
    agent: AgentBundle,
    batch: TransitionBatch,
    cfg: DvmConfig,
) -> ValueMatchResult:
    """One Adam step of the distilled critic (and value) toward one agent's.

    Raises:
        ConfigurationError: If the agent count has more permutations than the cap
    """
    num_agents = batch.obs.shape[1]
    check_permutation_cap(num_agents, cfg)
    permutations = agent_permutations(num_agents)

    critic_loss, grad = value_match_critic_loss(
        distilled.critic, agent.critic, batch.obs, batch.actions, permutations
    )
    adam_step(distilled.critic, grad, distilled.optimizers["critic"])

    value_loss = None
    if distilled.value is not None and agent.value is not None:
        value_loss, value_grad = value_match_value_loss(
            distilled.value, agent.value, batch.obs, permutations
        )
        adam_step(distilled.value, value_grad, distilled.optimizers["value"])
    return ValueMatchResult(critic_loss, value_loss, len(permutations))


def permutation_asymmetry(critic: ParamStore, obs: np.ndarray, actions: np.ndarray) -> float:
    """``max |Q(o, a) - Q(X(o), X(a))|`` over samples and agent permutations."""
    base = forward(critic, critic_inputs(obs, actions))[:, 0]
    worst = 0.0
    for perm in agent_permutations(obs.shape[1])[1:]:
        permuted = forward(critic, critic_inputs(*permute_joint(obs, actions, perm)))[:, 0]
        worst = max(worst, float(np.max(np.abs(permuted - base))))
    return worst


# --- full procedure -------------------------------------------------------------


def check_homogeneity(bundles: Sequence[AgentBundle]) -> None:
    """Raise HomogeneityError unless all agents have congruent networks."""
    reference = bundles[0].networks()
    for k, bundle in enumerate(bundles[1:], start=1):
        nets = bundle.networks()
        if nets.keys() != reference.keys() or bundle.discrete != bundles[0].discrete:
            raise HomogeneityError(f"agent {k} carries different networks than agent 0")
        for name, net in nets.items():
            if not net.same_shape(reference[name]):
                raise HomogeneityError(
                    f"agent {k} {name} {net!r} differs from agent 0 {reference[name]!r}"
                )


def _resolve_sources(
    sources: DvmSources, num_agents: int
) -> List[Tuple[ReplayBuffer, int]]:
    if isinstance(sources, ReplayBuffer):
        return [(sources, i) for i in range(num_agents)]
    resolved = list(sources)
    if len(resolved) != num_agents:
        raise ConfigurationError(
            f"{len(resolved)} DVM sources given for {num_agents} agents"
        )
    return resolved


def cosine_rate(base: float, iteration: int, iterations: int) -> float:
    """Learning rate at ``iteration`` of a cosine decay from ``base`` to zero."""
    return 0.5 * base * (1.0 + math.cos(math.pi * iteration / max(iterations, 1)))


def _hard_update_agents(
    bundles: Sequence[AgentBundle], distilled: DistilledBundle, mode: DvmMode, cfg: AlgoConfig
) -> None:
    for bundle in bundles:
        overwritten = []
        if mode.distills:
            hard_update(bundle.actor, distilled.actor)
            if bundle.target_actor is not None:
                hard_update(bundle.target_actor, bundle.actor)
            overwritten.append("actor")
        if mode.value_matches:
            hard_update(bundle.critic, distilled.critic)
            if bundle.target_critic is not None:
                hard_update(bundle.target_critic, bundle.critic)
            overwritten.append("critic")
            if bundle.value is not None:
                hard_update(bundle.value, distilled.value)
                hard_update(bundle.target_value, bundle.value)
                overwritten.append("value")
        reset_optimizers(bundle, cfg, overwritten)


def run_dvm(
    bundles: Sequence[AgentBundle],
    sources: DvmSources,
    cfg: DvmConfig,
    algo_cfg: AlgoConfig,
    rng: np.random.Generator,
    distilled: Optional[DistilledBundle] = None,
) -> Sequence[AgentBundle]:
    """Distill, value-match and hard-update all agents.

    Args:
        bundles: Agents to merge (updated in place)
        sources: One shared buffer, or one ``(buffer, agent slot)`` per agent
        cfg: DVM settings; ``mode`` selects distillation and/or value matching
        algo_cfg: Learner settings, used for fresh optimizer states
        rng: Generator for batch sampling and fresh initialization
        distilled: Optional pre-built distilled networks

    Returns:
        The bundles, hard-updated from the distilled networks

    Raises:
        HomogeneityError: If the agents' networks are not congruent
        ConfigurationError: If value matching would exceed the permutation cap
    """
    mode = cfg.mode
    if mode is DvmMode.NONE:
        return bundles

    check_homogeneity(bundles)
    per_agent = _resolve_sources(sources, len(bundles))
    if mode.value_matches:
        check_permutation_cap(per_agent[0][0].num_agents or len(bundles), cfg)

    learning_rate = cfg.learning_rate_for(algo_cfg)
    if distilled is None:
        distilled = (
            DistilledBundle.from_agent(bundles[0], learning_rate)
            if cfg.warm_start
            else DistilledBundle.fresh(bundles[0], rng, learning_rate)
        )

    logger.info(
        f"DVM ({mode.value}) over {len(bundles)} agents for {cfg.iterations} iterations"
    )

    base_rates = {name: opt.learning_rate for name, opt in distilled.optimizers.items()}

    kl_losses: List[float] = []
    match_losses: List[float] = []

    def set_rates(iteration: int, names: Sequence[str]) -> None:
        if not cfg.anneal:
            return
        for name in names:
            if name in distilled.optimizers:
                distilled.optimizers[name].learning_rate = cosine_rate(
                    base_rates[name], iteration, cfg.iterations
                )

    def distill_round() -> None:
        kl_losses.clear()
        for bundle, (buffer, slot) in zip(bundles, per_agent):
            obs = buffer.sample_observations(cfg.batch_size, rng)[:, slot]
            kl_losses.append(distill_step(distilled, bundle, obs, cfg))

    def match_round() -> None:
        match_losses.clear()
        for bundle, (buffer, _) in zip(bundles, per_agent):
            result = value_match_step(
                distilled, bundle, buffer.sample_arrays(cfg.batch_size, rng), cfg
            )
            match_losses.append(result.critic_loss)

    def log_progress(iteration: int) -> None:
        if iteration % _LOG_EVERY == 0:
            logger.debug(
                f"DVM iteration {iteration}: kl={np.mean(kl_losses or [0.0]):.6f} "
                f"match={np.mean(match_losses or [0.0]):.6f}"
            )

    if cfg.interleave:
        for iteration in range(cfg.iterations):
            set_rates(iteration, _ALL_NETWORKS)
            if mode.distills:
                distill_round()
            if mode.value_matches:
                match_round()
            log_progress(iteration)
    else:
        for iteration in range(cfg.iterations if mode.distills else 0):
            set_rates(iteration, ("actor",))
            distill_round()
            log_progress(iteration)
        for iteration in range(cfg.iterations if mode.value_matches else 0):
            set_rates(iteration, ("critic", "value"))
            match_round()
            log_progress(iteration)

    _hard_update_agents(bundles, distilled, mode, algo_cfg)
    logger.info(
        f"DVM finished: final kl={np.mean(kl_losses or [0.0]):.6f} "
        f"match={np.mean(match_losses or [0.0]):.6f}"
    )
    return bundles
