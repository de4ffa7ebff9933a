"""Domain registry: static layout of every particle domain.

Each entry fixes the agent count, the per-phase quadrant assignment (spread) or
per-task targets (push box), and the desk-scale default phase length.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from dvm_marl.core.errors import ConfigurationError
from dvm_marl.core.models import Domain, Phase

# Quadrant ids; anchors are scaled by world_half in the environment
QUADRANT_SIGNS: Tuple[Tuple[float, float], ...] = (
    (-1.0, -1.0),  # 0: lower left
    (1.0, 1.0),  # 1: upper right
    (-1.0, 1.0),  # 2: upper left
    (1.0, -1.0),  # 3: lower right
)

# Common push-box target distance from the box start
PUSHBOX_TARGET_DISTANCE = 0.6


@dataclass(frozen=True)
class DomainConfig:
    """Configuration for one particle domain.

    Attributes:
        domain: Domain identifier
        num_agents: Number of (homogeneous) agents
        num_landmarks: Spread landmarks, one per occupied quadrant (0 for push box)
        quadrant_layouts: Phase -> agent-to-quadrant assignment; ``None`` means a
            fresh random permutation at every reset
        task_targets: Task -> candidate target positions (push box only)
        default_phase_episodes: Desk-scale episodes per training phase
    """

    domain: Domain
    num_agents: int
    num_landmarks: int = 0
    quadrant_layouts: Dict[Phase, Optional[Tuple[int, ...]]] = field(default_factory=dict)
    task_targets: Dict[Phase, Tuple[Tuple[float, float], ...]] = field(
        default_factory=dict
    )
    default_phase_episodes: int = 4000

    def __post_init__(self):
        """Validate configuration after initialization."""
        if self.num_agents < 1:
            raise ConfigurationError(f"{self.domain.value}: need at least one agent")
        for phase, layout in self.quadrant_layouts.items():
            if layout is not None and sorted(layout) != list(range(self.num_agents)):
                raise ConfigurationError(
                    f"{self.domain.value} phase {phase.value}: layout {layout} is not "
                    f"a permutation of {self.num_agents} quadrants"
                )

    @property
    def is_spread(self) -> bool:
        return self.domain.is_spread

    @property
    def obs_dim(self) -> int:
        """Observation width per agent.

        Own velocity and position, one offset per landmark (spread) or the box
        and target offsets (push box), then one offset per other agent.
        """
        entity_offsets = self.num_landmarks if self.is_spread else 2
        return 4 + 2 * entity_offsets + 2 * (self.num_agents - 1)


_TARGET_LEFT = (-PUSHBOX_TARGET_DISTANCE, 0.0)
_TARGET_RIGHT = (PUSHBOX_TARGET_DISTANCE, 0.0)
_TARGET_UP = (0.0, PUSHBOX_TARGET_DISTANCE)

DOMAIN_REGISTRY: Dict[Domain, DomainConfig] = {
    Domain.SPREAD2: DomainConfig(
        domain=Domain.SPREAD2,
        num_agents=2,
        num_landmarks=2,
        quadrant_layouts={Phase.I: (0, 1), Phase.II: (1, 0), Phase.III: None},
        default_phase_episodes=4000,
    ),
    Domain.SPREAD3: DomainConfig(
        domain=Domain.SPREAD3,
        num_agents=3,
        num_landmarks=3,
        quadrant_layouts={Phase.I: (0, 1, 2), Phase.II: (1, 2, 0), Phase.III: None},
        default_phase_episodes=8000,
    ),
    Domain.SPREAD4: DomainConfig(
        domain=Domain.SPREAD4,
        num_agents=4,
        num_landmarks=4,
        quadrant_layouts={Phase.I: (0, 1, 2, 3), Phase.II: None, Phase.III: None},
        default_phase_episodes=16000,
    ),
    Domain.PUSHBOX: DomainConfig(
        domain=Domain.PUSHBOX,
        num_agents=2,
        task_targets={
            Phase.I: (_TARGET_LEFT,),
            Phase.II: (_TARGET_RIGHT,),
            Phase.III: (_TARGET_LEFT, _TARGET_RIGHT, _TARGET_UP),
        },
        default_phase_episodes=4000,
    ),
}


def get_domain(domain: "Domain | str") -> DomainConfig:
    """Get the registered configuration for a domain.

    Args:
        domain: Domain enum or its string value

    Returns:
        DomainConfig

    Raises:
        ConfigurationError: If the domain is unknown
    """
    try:
        key = Domain(domain)
    except ValueError as e:
        raise ConfigurationError(f"Unknown domain: {domain}") from e
    return DOMAIN_REGISTRY[key]


def list_domains() -> list:
    """List all registered domain names."""
    return [d.value for d in DOMAIN_REGISTRY]
