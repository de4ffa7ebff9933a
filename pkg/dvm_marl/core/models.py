"""Shared domain enumerations and record models."""

from enum import Enum
from typing import List

from pydantic import BaseModel, Field


class Domain(str, Enum):
    """Particle domains."""

    SPREAD2 = "spread2"
    SPREAD3 = "spread3"
    SPREAD4 = "spread4"
    PUSHBOX = "pushbox"

    @property
    def is_spread(self) -> bool:
        return self is not Domain.PUSHBOX


class Phase(str, Enum):
    """Training phase (spread) or task (push box)."""

    I = "I"  # noqa: E741
    II = "II"
    III = "III"


class Algorithm(str, Enum):
    MADDPG_DISCRETE = "maddpg_discrete"
    MASAC = "masac"

    @property
    def is_discrete(self) -> bool:
        return self is Algorithm.MADDPG_DISCRETE


class Condition(str, Enum):
    """Knowledge-combination condition applied between phases."""

    NONE = "none"
    DISTILL = "distill"
    VALUE_MATCH = "value_match"
    DVM = "dvm"


class DvmMode(str, Enum):
    NONE = "none"
    DISTILL_ONLY = "distill_only"
    VALUE_MATCH_ONLY = "value_match_only"
    DVM = "dvm"

    @property
    def distills(self) -> bool:
        return self in (DvmMode.DISTILL_ONLY, DvmMode.DVM)

    @property
    def value_matches(self) -> bool:
        return self in (DvmMode.VALUE_MATCH_ONLY, DvmMode.DVM)

    @classmethod
    def for_condition(cls, condition: Condition) -> "DvmMode":
        return {
            Condition.NONE: cls.NONE,
            Condition.DISTILL: cls.DISTILL_ONLY,
            Condition.VALUE_MATCH: cls.VALUE_MATCH_ONLY,
            Condition.DVM: cls.DVM,
        }[condition]


class ActionMode(str, Enum):
    EXPLORE = "explore"
    EVALUATE = "evaluate"


class EvalRecord(BaseModel):
    """One evaluation point of one seed."""

    seed: int
    phase: Phase
    episode: int = Field(ge=0, description="Training episodes completed in this phase")
    mean_return: float
    actor_losses: List[float] = Field(default_factory=list)
    critic_losses: List[float] = Field(default_factory=list)
    wall_clock_s: float = Field(default=0.0, ge=0)

    @property
    def actor_loss(self) -> float:
        """Mean of the per-agent actor losses (0.0 before any update)."""
        return sum(self.actor_losses) / len(self.actor_losses) if self.actor_losses else 0.0

    @property
    def critic_loss(self) -> float:
        return (
            sum(self.critic_losses) / len(self.critic_losses) if self.critic_losses else 0.0
        )
