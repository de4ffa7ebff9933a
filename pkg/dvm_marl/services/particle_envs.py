"""2-D particle simulation for the spread and cooperative push-box domains.

States are values: ``reset`` and ``step`` return new ``EnvState`` objects and
take an explicit ``numpy.random.Generator``, so trajectories are reproducible
from (seed, spec, action sequence).
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from dvm_marl.config.domain_registry import QUADRANT_SIGNS, get_domain
from dvm_marl.core.errors import ParameterError, ProtocolError, ShapeError
from dvm_marl.core.models import Domain, Phase

logger = logging.getLogger(__name__)

# no-op, +x, -x, +y, -y
ACTION_FORCES = np.array(
    [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], dtype=np.float64
)
NUM_DISCRETE_ACTIONS = len(ACTION_FORCES)
CONTINUOUS_ACTION_DIM = 2


@dataclass(frozen=True)
class PhysicsConfig:
    """Integrator and geometry constants shared by all domains."""

    dt: float = 0.1
    damping: float = 0.25
    accel: float = 5.0
    world_half: float = 1.0
    world_clamp: float = 1.2
    agent_radius: float = 0.05
    landmark_radius: float = 0.05
    box_radius: float = 0.15
    # heavier than an agent: same force, half the acceleration
    box_accel: float = 2.5
    contact_tolerance: float = 0.02
    spawn_inner: float = 0.25
    spawn_outer: float = 0.5
    episode_length: int = 25

    @property
    def contact_radius(self) -> float:
        return self.agent_radius + self.box_radius


@dataclass(frozen=True)
class PhaseSpec:
    """What to simulate: domain, phase/task and its initialization regime.

    Attributes:
        domain: Particle domain
        phase: Phase (spread) or task (push box)
        quadrants: Agent-to-quadrant assignment, ``None`` for a random
            permutation at every reset (spread only)
        targets: Candidate box targets, one drawn per reset (push box only)
        physics: Integrator constants
    """

    domain: Domain
    phase: Phase
    quadrants: Optional[Tuple[int, ...]] = None
    targets: Tuple[Tuple[float, float], ...] = ()
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)

    @classmethod
    def create(
        cls,
        domain: Union[Domain, str],
        phase: Union[Phase, str],
        quadrants: Optional[Sequence[int]] = None,
        physics: Optional[PhysicsConfig] = None,
    ) -> "PhaseSpec":
        """Build the registered spec for a domain/phase, optionally overriding quadrants."""
        config = get_domain(domain)
        phase = Phase(phase)
        layout = config.quadrant_layouts.get(phase) if quadrants is None else tuple(quadrants)
        if config.is_spread and layout is not None:
            if sorted(layout) != list(range(config.num_agents)):
                raise ParameterError(f"quadrant assignment {layout} is not a permutation")
        return cls(
            domain=config.domain,
            phase=phase,
            quadrants=layout if config.is_spread else None,
            targets=config.task_targets.get(phase, ()),
            physics=physics or PhysicsConfig(),
        )

    @property
    def num_agents(self) -> int:
        return get_domain(self.domain).num_agents

    @property
    def num_landmarks(self) -> int:
        return get_domain(self.domain).num_landmarks

    @property
    def obs_dim(self) -> int:
        return get_domain(self.domain).obs_dim

    @property
    def is_spread(self) -> bool:
        return self.domain.is_spread


@dataclass
class EnvState:
    """Full simulator state."""

    spec: PhaseSpec
    positions: np.ndarray  # (n, 2)
    velocities: np.ndarray  # (n, 2)
    landmarks: np.ndarray  # (m, 2), empty for push box
    box_position: np.ndarray = field(default_factory=lambda: np.zeros(2))
    box_velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    target: np.ndarray = field(default_factory=lambda: np.zeros(2))
    step_count: int = 0

    @property
    def num_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def done(self) -> bool:
        return self.step_count >= self.spec.physics.episode_length

    def copy(self) -> "EnvState":
        return replace(
            self,
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            landmarks=self.landmarks.copy(),
            box_position=self.box_position.copy(),
            box_velocity=self.box_velocity.copy(),
            target=self.target.copy(),
        )


def landmark_anchors(num_landmarks: int, physics: PhysicsConfig) -> np.ndarray:
    """Fixed landmark positions, one per quadrant at (+-0.5, +-0.5) * world_half."""
    signs = np.array(QUADRANT_SIGNS[:num_landmarks], dtype=np.float64)
    return 0.5 * physics.world_half * signs


def reset(spec: PhaseSpec, rng: np.random.Generator) -> Tuple[EnvState, np.ndarray]:
    """Start a new episode.

    Args:
        spec: Domain, phase and initialization regime
        rng: Random generator for start positions and target choice

    Returns:
        Tuple of (initial state, joint observation ``(n, obs_dim)``)
    """
    physics = spec.physics
    n = spec.num_agents

    if spec.is_spread:
        quadrants = spec.quadrants if spec.quadrants is not None else tuple(rng.permutation(n))
        signs = np.array([QUADRANT_SIGNS[q] for q in quadrants], dtype=np.float64)
        # strictly inside the quadrant so both coordinate signs are well-defined
        magnitudes = rng.uniform(physics.agent_radius, physics.world_half, size=(n, 2))
        state = EnvState(
            spec=spec,
            positions=signs * magnitudes,
            velocities=np.zeros((n, 2)),
            landmarks=landmark_anchors(spec.num_landmarks, physics),
        )
    else:
        if not spec.targets:
            raise ParameterError(f"push-box task {spec.phase.value} has no targets")
        choice = int(rng.integers(len(spec.targets))) if len(spec.targets) > 1 else 0
        # area-uniform over the annulus
        radii = np.sqrt(rng.uniform(physics.spawn_inner**2, physics.spawn_outer**2, size=n))
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
        positions = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        state = EnvState(
            spec=spec,
            positions=positions,
            velocities=np.zeros((n, 2)),
            landmarks=np.zeros((0, 2)),
            target=np.array(spec.targets[choice], dtype=np.float64),
        )

    return state, observe_all(state)


def action_forces(actions: Union[Sequence, np.ndarray], num_agents: int) -> np.ndarray:
    """Map a joint action to per-agent force vectors ``(n, 2)``.

    Discrete joint actions are integer arrays of shape ``(n,)``; continuous ones
    are float arrays of shape ``(n, 2)`` and are clamped to [-1, 1].
    """
    arr = np.asarray(actions)
    if arr.dtype.kind in "iu":
        if arr.shape != (num_agents,):
            raise ShapeError(f"discrete joint action must have shape ({num_agents},)")
        if np.any(arr < 0) or np.any(arr >= NUM_DISCRETE_ACTIONS):
            raise ParameterError(f"discrete action out of range: {arr.tolist()}")
        return ACTION_FORCES[arr]
    arr = arr.astype(np.float64)
    if arr.shape != (num_agents, CONTINUOUS_ACTION_DIM):
        raise ShapeError(f"continuous joint action must have shape ({num_agents}, 2)")
    return np.clip(arr, -1.0, 1.0)


def joint_push(state: EnvState, forces: np.ndarray) -> bool:
    """True iff every agent touches the box and pushes into it."""
    if state.num_agents < 2:
        return False
    physics = state.spec.physics
    offsets = state.box_position - state.positions
    distances = np.linalg.norm(offsets, axis=1)
    in_contact = distances <= physics.contact_radius + physics.contact_tolerance
    toward = np.einsum("ij,ij->i", forces, offsets) > 0.0
    applying = np.linalg.norm(forces, axis=1) > 0.0
    return bool(np.all(in_contact & toward & applying))


def _resolve_box_contacts(state: EnvState) -> None:
    physics = state.spec.physics
    offsets = state.positions - state.box_position
    distances = np.linalg.norm(offsets, axis=1)
    for i in np.flatnonzero(distances < physics.contact_radius):
        normal = offsets[i] / distances[i] if distances[i] > 0.0 else np.array([1.0, 0.0])
        state.positions[i] = state.box_position + normal * physics.contact_radius
        inward = float(state.velocities[i] @ normal)
        if inward < 0.0:
            state.velocities[i] = state.velocities[i] - inward * normal


def step(
    state: EnvState, actions: Union[Sequence, np.ndarray]
) -> Tuple[EnvState, np.ndarray, float, bool]:
    """Advance one step.

    Returns:
        Tuple of (next state, joint observation, shared reward, done)

    Raises:
        ProtocolError: If the episode already ended
    """
    if state.done:
        raise ProtocolError("step() called on a terminal state; reset first")

    physics = state.spec.physics
    forces = action_forces(actions, state.num_agents)
    pushing = (not state.spec.is_spread) and joint_push(state, forces)

    nxt = state.copy()
    nxt.velocities = nxt.velocities * (1.0 - physics.damping) + forces * (
        physics.dt * physics.accel
    )
    nxt.positions = np.clip(
        nxt.positions + nxt.velocities * physics.dt,
        -physics.world_clamp,
        physics.world_clamp,
    )

    if not state.spec.is_spread:
        if pushing:
            nxt.box_velocity = nxt.box_velocity * (1.0 - physics.damping) + forces.sum(
                axis=0
            ) * (physics.dt * physics.box_accel)
            nxt.box_position = np.clip(
                nxt.box_position + nxt.box_velocity * physics.dt,
                -physics.world_clamp,
                physics.world_clamp,
            )
        else:
            # static friction: the box never coasts without a joint push
            nxt.box_velocity = np.zeros(2)
        _resolve_box_contacts(nxt)

    nxt.step_count += 1
    reward = spread_reward(nxt) if state.spec.is_spread else pushbox_reward(nxt)
    return nxt, observe_all(nxt), reward, nxt.done


def spread_reward(state: EnvState) -> float:
    """Negative sum over landmarks of the distance to the closest agent."""
    if not state.spec.is_spread:
        raise ParameterError("spread_reward on a push-box state")
    gaps = state.landmarks[:, None, :] - state.positions[None, :, :]
    return -float(np.sum(np.min(np.linalg.norm(gaps, axis=2), axis=1)))


def pushbox_reward(state: EnvState) -> float:
    """Negative squared distance between box and target."""
    if state.spec.is_spread:
        raise ParameterError("pushbox_reward on a spread state")
    gap = state.target - state.box_position
    return -float(gap @ gap)


def build_observation(state: EnvState, agent: int) -> np.ndarray:
    """Observation of one agent.

    Layout: own velocity, own position, landmark offsets (spread) or box and
    target offsets (push box), then the other agents' relative positions sorted
    by heading angle (ties by distance).
    """
    if not 0 <= agent < state.num_agents:
        raise ParameterError(f"agent index {agent} out of range")
    own = state.positions[agent]
    parts = [state.velocities[agent], own]
    if state.spec.is_spread:
        parts.extend(state.landmarks - own)
    else:
        parts.extend([state.box_position - own, state.target - own])

    others = [state.positions[j] - own for j in range(state.num_agents) if j != agent]
    others.sort(key=lambda d: (math.atan2(d[1], d[0]), math.hypot(d[0], d[1])))
    parts.extend(others)
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


def observe_all(state: EnvState) -> np.ndarray:
    return np.stack([build_observation(state, i) for i in range(state.num_agents)])


def agent_permutations(num_agents: int) -> List[Tuple[int, ...]]:
    """All n! agent orderings, identity first."""
    return list(itertools.permutations(range(num_agents)))


def permute_joint(
    obs: np.ndarray, act: np.ndarray, perm: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray]:
    """Reorder agent blocks of observations and actions by the same permutation.

    Block ``k`` of the result is block ``perm[k]`` of the input. Arrays may carry
    leading batch axes; the agent axis is the second to last.
    """
    perm = tuple(int(p) for p in perm)
    obs = np.asarray(obs)
    act = np.asarray(act)
    if sorted(perm) != list(range(len(perm))):
        raise ParameterError(f"{perm} is not a permutation")
    if obs.ndim < 2 or act.ndim < 2 or obs.shape[-2] != len(perm) or act.shape[-2] != len(perm):
        raise ShapeError(
            f"permutation of {len(perm)} agents does not fit obs {obs.shape} / act {act.shape}"
        )
    index = list(perm)
    return obs[..., index, :], act[..., index, :]


def greedy_assignment(state: EnvState) -> Tuple[int, ...]:
    """Landmark index per agent minimizing total agent-landmark distance."""
    n = state.num_agents
    dists = np.linalg.norm(state.positions[:, None, :] - state.landmarks[None, :, :], axis=2)
    best = min(
        itertools.permutations(range(state.landmarks.shape[0]), n),
        key=lambda assign: sum(dists[i, assign[i]] for i in range(n)),
    )
    return tuple(best)


def damped_travel(steps: int, physics: PhysicsConfig, force: float = 1.0) -> np.ndarray:
    """Distance covered from rest after each of ``steps`` steps of constant force.

    With ``c = 1 - damping`` and ``g = force * dt * accel`` the velocity after
    ``k`` steps is ``g (1 - c^k) / damping``; the distance is ``dt`` times the
    sum of those velocities.
    """
    c = 1.0 - physics.damping
    g = force * physics.dt * physics.accel
    k = np.arange(1, steps + 1, dtype=np.float64)
    return physics.dt * g / physics.damping * (k - c * (1.0 - c**k) / physics.damping)


def assignment_return(state: EnvState, assignment: Optional[Sequence[int]] = None) -> float:
    """Return of sending every agent straight onto its landmark at full force.

    Agents move along the segment to their assigned landmark (``greedy_assignment``
    by default) following ``damped_travel`` and stay once they arrive. Computed
    from the geometry alone, without stepping the simulator.
    """
    if not state.spec.is_spread:
        raise ParameterError("the assignment oracle is defined for spread domains only")
    if assignment is None:
        assignment = greedy_assignment(state)
    remaining = state.spec.physics.episode_length - state.step_count
    goals = state.landmarks[list(assignment)]
    offsets = goals - state.positions
    distances = np.linalg.norm(offsets, axis=1)
    directions = np.divide(
        offsets, distances[:, None], out=np.zeros_like(offsets), where=distances[:, None] > 0
    )

    travel = damped_travel(remaining, state.spec.physics)
    covered = np.minimum(travel[:, None], distances[None, :])  # (T, n)
    positions = state.positions[None] + covered[..., None] * directions[None]  # (T, n, 2)
    gaps = state.landmarks[None, :, None, :] - positions[:, None, :, :]  # (T, m, n, 2)
    return -float(np.sum(np.min(np.linalg.norm(gaps, axis=3), axis=2)))


def spread_oracle_return(spec: PhaseSpec, episodes: int, rng: np.random.Generator) -> float:
    """Mean ``assignment_return`` over ``episodes`` start configurations of a spread spec."""
    if not spec.is_spread:
        raise ParameterError("the assignment oracle is defined for spread domains only")
    total = 0.0
    for _ in range(episodes):
        state, _ = reset(spec, rng)
        total += assignment_return(state)
    return total / max(episodes, 1)


def random_policy_return(
    spec: PhaseSpec, episodes: int, rng: np.random.Generator, discrete: bool
) -> float:
    """Mean return of uniformly random joint actions.

    Discrete agents draw one of the five actions, continuous agents a force in
    [-1, 1]^2, independently at every step.
    """
    n = spec.num_agents
    total = 0.0
    for _ in range(episodes):
        state, _ = reset(spec, rng)
        done = False
        while not done:
            if discrete:
                actions = rng.integers(NUM_DISCRETE_ACTIONS, size=n)
            else:
                actions = rng.uniform(-1.0, 1.0, size=(n, CONTINUOUS_ACTION_DIM))
            state, _, reward, done = step(state, actions)
            total += reward
    return total / max(episodes, 1)
