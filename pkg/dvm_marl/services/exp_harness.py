"""Experiment protocols: Phase I -> condition -> Phase II, evaluation and outputs.

Each seed runs fully isolated with four independent random streams spawned from
its seed: network initialization, training (rollouts, exploration, batch
sampling), evaluation and DVM. Conditions therefore share identical Phase I
trajectories for a given seed, and evaluation never perturbs training.
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dvm_marl.config.domain_registry import QUADRANT_SIGNS, get_domain
from dvm_marl.config.experiment_config import ExperimentConfig
from dvm_marl.config.settings import get_settings
from dvm_marl.core.errors import ParameterError, UnsupportedError
from dvm_marl.core.models import ActionMode, EvalRecord, Phase
from dvm_marl.core.tensor_core import forward
from dvm_marl.services.dvm import check_permutation_cap, run_dvm
from dvm_marl.services.marl_algos import (
    AgentBundle,
    MultiAgentTrainer,
    create_bundles,
    critic_inputs,
    encode_joint_action,
    epsilon_at,
    select_joint_action,
)
from dvm_marl.services.particle_envs import (
    ACTION_FORCES,
    EnvState,
    PhaseSpec,
    PhysicsConfig,
    landmark_anchors,
    observe_all,
    reset,
    step,
)
from dvm_marl.services.replay import ReplayBuffer, Transition
from dvm_marl.services.snapshot import Snapshot, snapshot_from_bundles

logger = logging.getLogger(__name__)

METRICS_HEADER = (
    "seed",
    "phase",
    "episode",
    "mean_return",
    "actor_loss",
    "critic_loss",
    "wall_clock_s",
)
GRID_HEADER = ("x", "y", "action", "q_value")

# per-seed snapshot stages; the final one is what `ExperimentResult.snapshots` holds
STAGE_PRE_DVM = "pre_dvm"
STAGE_POST_DVM = "post_dvm"
STAGE_FINAL = "final"

# below this force magnitude a continuous action counts as a no-op in grid dumps
_NOOP_THRESHOLD = 0.1


@dataclass
class SeedStreams:
    """Independent generators for one seed."""

    init: np.random.Generator
    train: np.random.Generator
    eval: np.random.Generator
    dvm: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "SeedStreams":
        children = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.default_rng(child) for child in children))


@dataclass
class Team:
    """Agents trained together on one buffer."""

    bundles: List[AgentBundle]
    buffer: ReplayBuffer
    trainer: MultiAgentTrainer
    explore_step: int = 0
    explore_horizon: int = 1
    last_losses: Dict[str, List[float]] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    """Evaluation records of all seeds plus each seed's parameters.

    Attributes:
        records: Evaluation records of every seed
        snapshots: Final parameters per seed
        stage_snapshots: Per seed, parameters right before and right after DVM
    """

    records: List[EvalRecord]
    snapshots: Dict[int, Snapshot]
    stage_snapshots: Dict[int, Dict[str, Snapshot]] = field(default_factory=dict)


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start if self.enabled else 0.0


def evaluate_policy(
    bundles: Sequence[AgentBundle], spec: PhaseSpec, episodes: int, rng: np.random.Generator
) -> float:
    """Mean undiscounted return over ``episodes`` exploration-free episodes.

    Args:
        bundles: Agents (read only)
        spec: Domain and phase to evaluate on
        episodes: Number of episodes
        rng: Evaluation stream, used for episode resets only

    Returns:
        Mean episode return
    """
    total = 0.0
    for _ in range(episodes):
        state, obs = reset(spec, rng)
        done = False
        while not done:
            actions = select_joint_action(bundles, obs, ActionMode.EVALUATE)
            state, obs, reward, done = step(state, actions)
            total += reward
    return total / max(episodes, 1)


def _build_team(
    bundles: List[AgentBundle], cfg: ExperimentConfig, rng: np.random.Generator
) -> Team:
    return Team(
        bundles=bundles,
        buffer=ReplayBuffer(cfg.buffer_capacity),
        trainer=MultiAgentTrainer(bundles, cfg.algo, rng),
    )


def _record(
    team: Team,
    spec: PhaseSpec,
    cfg: ExperimentConfig,
    seed: int,
    phase: Phase,
    episode: int,
    streams: SeedStreams,
    clock: _Clock,
) -> EvalRecord:
    mean_return = evaluate_policy(team.bundles, spec, cfg.eval_episodes, streams.eval)
    record = EvalRecord(
        seed=seed,
        phase=phase,
        episode=episode,
        mean_return=mean_return,
        actor_losses=team.last_losses.get("actor", []),
        critic_losses=team.last_losses.get("critic", []),
        wall_clock_s=clock.elapsed(),
    )
    logger.info(
        f"seed {seed} phase {phase.value} episode {episode}: mean return {mean_return:.4f}"
    )
    return record


def _run_episode(
    team: Team, spec: PhaseSpec, cfg: ExperimentConfig, rng: np.random.Generator
) -> None:
    batch_size = cfg.algo.batch_size
    discrete = cfg.algo.discrete
    state, obs = reset(spec, rng)
    done = False
    while not done:
        epsilon = epsilon_at(team.explore_step, team.explore_horizon, cfg.algo)
        actions = select_joint_action(team.bundles, obs, ActionMode.EXPLORE, rng, epsilon)
        state, next_obs, reward, done = step(state, actions)
        team.buffer.push(
            Transition(obs, encode_joint_action(actions, discrete), reward, next_obs, done)
        )
        team.explore_step += 1
        obs = next_obs
        if len(team.buffer) >= batch_size:
            for _ in range(cfg.algo.updates_per_step):
                batch = team.buffer.sample_arrays(batch_size, rng)
                team.last_losses = team.trainer.update(batch)


def train_phase(
    team: Team,
    spec: PhaseSpec,
    episodes: int,
    cfg: ExperimentConfig,
    seed: int,
    streams: SeedStreams,
    clock: Optional[_Clock] = None,
    learn: bool = True,
) -> List[EvalRecord]:
    """Train (or, with ``learn=False``, only evaluate) for one phase.

    An evaluation record is emitted at episode 0 and after every
    ``eval_interval`` episodes.
    """
    clock = clock or _Clock(False)
    phase = spec.phase
    if team.explore_step == 0 or cfg.algo.epsilon_reset_between_phases:
        team.explore_step = 0
        team.explore_horizon = max(episodes * cfg.episode_length, 1)
    team.last_losses = {}
    logger.info(
        f"seed {seed}: {'training' if learn else 'evaluating'} {spec.domain.value} "
        f"phase {phase.value} for {episodes} episodes"
    )

    records = [_record(team, spec, cfg, seed, phase, 0, streams, clock)]
    for episode in range(1, episodes + 1):
        if learn:
            _run_episode(team, spec, cfg, streams.train)
        if episode % cfg.eval_interval == 0:
            records.append(_record(team, spec, cfg, seed, phase, episode, streams, clock))
    return records


def _physics(cfg: ExperimentConfig) -> PhysicsConfig:
    return PhysicsConfig(episode_length=cfg.episode_length)


def _snapshot(bundles: Sequence[AgentBundle], cfg: ExperimentConfig, phase: Phase) -> Snapshot:
    return snapshot_from_bundles(
        bundles, cfg.domain, cfg.algorithm, phase, episode_length=cfg.episode_length
    )


def _run_spread(
    cfg: ExperimentConfig, seed: int, streams: SeedStreams, clock: _Clock
) -> Tuple[List[EvalRecord], Dict[str, Snapshot]]:
    domain = get_domain(cfg.domain)
    physics = _physics(cfg)
    phase1 = PhaseSpec.create(cfg.domain, Phase.I, physics=physics)
    phase2 = PhaseSpec.create(cfg.domain, Phase.II, physics=physics)

    bundles = create_bundles(domain.num_agents, domain.obs_dim, cfg.algo, streams.init)
    team = _build_team(bundles, cfg, streams.train)

    records = train_phase(team, phase1, cfg.phase1_episodes, cfg, seed, streams, clock)
    snapshots = {STAGE_PRE_DVM: _snapshot(team.bundles, cfg, Phase.I)}
    if len(team.buffer) > 0:
        run_dvm(team.bundles, team.buffer, cfg.dvm, cfg.algo, streams.dvm)
    else:
        logger.info(f"seed {seed}: empty buffer after Phase I, condition skipped")
    snapshots[STAGE_POST_DVM] = _snapshot(team.bundles, cfg, Phase.II)
    records += train_phase(team, phase2, cfg.phase2_episodes, cfg, seed, streams, clock)
    snapshots[STAGE_FINAL] = _snapshot(team.bundles, cfg, Phase.II)
    return records, snapshots


def _run_pushbox(
    cfg: ExperimentConfig, seed: int, streams: SeedStreams, clock: _Clock
) -> Tuple[List[EvalRecord], Dict[str, Snapshot]]:
    domain = get_domain(cfg.domain)
    physics = _physics(cfg)
    task1 = PhaseSpec.create(cfg.domain, Phase.I, physics=physics)
    task2 = PhaseSpec.create(cfg.domain, Phase.II, physics=physics)
    task3 = PhaseSpec.create(cfg.domain, Phase.III, physics=physics)

    # pair A (agents 1, 2) learns Task I, pair B (agents 3, 4) learns Task II
    pair_a, pair_b = (
        _build_team(
            create_bundles(domain.num_agents, domain.obs_dim, cfg.algo, streams.init),
            cfg,
            streams.train,
        )
        for _ in range(2)
    )
    records = train_phase(pair_a, task1, cfg.phase1_episodes, cfg, seed, streams, clock)
    records += train_phase(pair_b, task2, cfg.phase1_episodes, cfg, seed, streams, clock)

    merged = [pair_a.bundles[0], pair_b.bundles[0]]
    snapshots = {STAGE_PRE_DVM: _snapshot(merged, cfg, Phase.III)}
    if len(pair_a.buffer) > 0 and len(pair_b.buffer) > 0:
        run_dvm(
            merged,
            [(pair_a.buffer, 0), (pair_b.buffer, 0)],
            cfg.dvm,
            cfg.algo,
            streams.dvm,
        )
    else:
        logger.info(f"seed {seed}: empty task buffers, condition skipped")

    snapshots[STAGE_POST_DVM] = _snapshot(merged, cfg, Phase.III)

    team = _build_team(merged, cfg, streams.train)
    records += train_phase(
        team, task3, cfg.phase2_episodes, cfg, seed, streams, clock, learn=cfg.task3_learning
    )
    snapshots[STAGE_FINAL] = _snapshot(team.bundles, cfg, Phase.III)
    return records, snapshots


def run_seed(cfg: ExperimentConfig, seed: int) -> Tuple[List[EvalRecord], Dict[str, Snapshot]]:
    """Run the full protocol for one (already offset) seed.

    Returns:
        Tuple of (records, snapshots keyed by ``STAGE_PRE_DVM``, ``STAGE_POST_DVM``
        and ``STAGE_FINAL``)
    """
    settings = get_settings()
    record_clock = (
        settings.record_wall_clock if cfg.record_wall_clock is None else cfg.record_wall_clock
    )
    clock = _Clock(record_clock)
    streams = SeedStreams.from_seed(seed)
    if cfg.domain.is_spread:
        return _run_spread(cfg, seed, streams, clock)
    return _run_pushbox(cfg, seed, streams, clock)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every configured seed.

    Seeds are shifted by ``DVM_SEED_OFFSET``. Configuration problems surface
    before any training starts.

    Raises:
        ConfigurationError: If value matching would exceed the permutation cap
    """
    if cfg.dvm.mode.value_matches:
        check_permutation_cap(get_domain(cfg.domain).num_agents, cfg.dvm)
    offset = get_settings().seed_offset

    records: List[EvalRecord] = []
    snapshots: Dict[int, Snapshot] = {}
    stage_snapshots: Dict[int, Dict[str, Snapshot]] = {}
    for configured in cfg.seeds:
        seed = configured + offset
        logger.info(
            f"Starting seed {seed}: {cfg.domain.value} / {cfg.algorithm.value} / "
            f"{cfg.condition.value}"
        )
        seed_records, seed_snapshots = run_seed(cfg, seed)
        records.extend(seed_records)
        snapshots[seed] = seed_snapshots.pop(STAGE_FINAL)
        stage_snapshots[seed] = seed_snapshots
    return ExperimentResult(
        records=records, snapshots=snapshots, stage_snapshots=stage_snapshots
    )


def write_metrics(records: Sequence[EvalRecord], path: Union[str, Path]) -> Path:
    """Write records as CSV with full-precision floats.

    Raises:
        ParameterError: If ``records`` is empty
        OSError: If the file cannot be written
    """
    if not records:
        raise ParameterError("no evaluation records to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.seed,
                    r.phase.value,
                    r.episode,
                    repr(float(r.mean_return)),
                    repr(float(r.actor_loss)),
                    repr(float(r.critic_loss)),
                    repr(float(r.wall_clock_s)),
                ]
            )
    logger.info(f"Wrote {len(records)} metric rows to {path}")
    return path


# --- policy grids ---------------------------------------------------------------


@dataclass
class GridRow:
    x: float
    y: float
    action: int
    q_value: float


def _nearest_direction(force: np.ndarray) -> int:
    if np.linalg.norm(force) < _NOOP_THRESHOLD:
        return 0
    return int(np.argmax(ACTION_FORCES[1:] @ force)) + 1


def policy_grid(
    bundles: Sequence[AgentBundle], spec: PhaseSpec, agent: int, resolution: int
) -> List[GridRow]:
    """Greedy action and its Q-value for one agent over a lattice of positions.

    The other agents sit at the landmark anchors of their quadrants in the
    spec's layout (identity when the layout is randomized); all velocities are
    zero. Cell centers are ``-w + (2k + 1) w / r`` for half-width ``w``.

    Raises:
        UnsupportedError: For non-spread domains
        ParameterError: For a bad agent index or resolution
    """
    if not spec.is_spread:
        raise UnsupportedError(
            f"policy grids are defined for spread domains, not {spec.domain.value}"
        )
    n = spec.num_agents
    if not 0 <= agent < n:
        raise ParameterError(f"agent index {agent} out of range for {n} agents")
    if resolution < 1:
        raise ParameterError(f"grid resolution must be positive, got {resolution}")

    physics = spec.physics
    quadrants = spec.quadrants if spec.quadrants is not None else tuple(range(n))
    anchors = 0.5 * physics.world_half * np.array([QUADRANT_SIGNS[q] for q in quadrants])
    half = physics.world_half
    centers = -half + (2 * np.arange(resolution) + 1) * half / resolution
    discrete = bundles[agent].discrete

    rows = []
    for y in centers:
        for x in centers:
            positions = anchors.copy()
            positions[agent] = (x, y)
            state = EnvState(
                spec=spec,
                positions=positions,
                velocities=np.zeros((n, 2)),
                landmarks=landmark_anchors(spec.num_landmarks, physics),
            )
            obs = observe_all(state)
            actions = select_joint_action(bundles, obs, ActionMode.EVALUATE)
            encoded = encode_joint_action(actions, discrete)
            q = float(forward(bundles[agent].critic, critic_inputs(obs, encoded))[0])
            action = int(actions[agent]) if discrete else _nearest_direction(actions[agent])
            rows.append(GridRow(float(x), float(y), action, q))
    return rows


def dump_policy_grid(
    bundles: Sequence[AgentBundle],
    spec: PhaseSpec,
    agent: int,
    resolution: int,
    path: Union[str, Path],
) -> List[GridRow]:
    """Write ``policy_grid`` as an ``x,y,action,q_value`` CSV."""
    rows = policy_grid(bundles, spec, agent, resolution)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(GRID_HEADER)
        for row in rows:
            writer.writerow([repr(row.x), repr(row.y), row.action, repr(row.q_value)])
    logger.info(f"Wrote {len(rows)} grid cells for agent {agent} to {path}")
    return rows


def grid_agreement(rows: Sequence[GridRow], targets: np.ndarray) -> float:
    """Fraction of cells whose greedy action pushes toward the nearest target.

    A no-op never counts as agreeing.

    Raises:
        ParameterError: If ``rows`` is empty
    """
    if not rows:
        raise ParameterError("no grid cells to compare")
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    hits = 0
    for row in rows:
        gaps = targets - np.array([row.x, row.y])
        nearest = gaps[np.argmin(np.linalg.norm(gaps, axis=1))]
        hits += int(ACTION_FORCES[row.action] @ nearest > 0.0)
    return hits / len(rows)


LAYOUTS = {"phase1": Phase.I, "phase2": Phase.II, "phase3": Phase.III}


def layout_spec(snapshot: Snapshot, layout: Optional[str] = None) -> PhaseSpec:
    """Phase spec for a snapshot's domain, at its own phase or a named layout.

    Args:
        snapshot: Source of the domain, default phase and episode length
        layout: ``phase1``, ``phase2`` or ``phase3``; ``None`` keeps the snapshot phase
    """
    if layout is None:
        phase = snapshot.phase
    elif layout in LAYOUTS:
        phase = LAYOUTS[layout]
    else:
        raise ParameterError(f"unknown layout {layout!r}; expected one of {sorted(LAYOUTS)}")
    return PhaseSpec.create(
        snapshot.domain, phase, physics=PhysicsConfig(episode_length=snapshot.episode_length)
    )
