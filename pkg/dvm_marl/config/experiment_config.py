"""Experiment, algorithm and DVM configuration models.

Configs are pydantic models. Files use a flat ``key = value`` format with ``#``
comments; keys are routed to the experiment itself, to ``AlgoConfig`` (its field
names) or to ``DvmConfig`` (``dvm_`` + field name).
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from dvm_marl.config.domain_registry import get_domain
from dvm_marl.core.errors import ConfigurationError
from dvm_marl.core.models import Algorithm, Condition, Domain, DvmMode

logger = logging.getLogger(__name__)

# Learning rates per algorithm (MADDPG, MA-SAC)
DEFAULT_LEARNING_RATES = {
    Algorithm.MADDPG_DISCRETE: 0.01,
    Algorithm.MASAC: 3e-4,
}


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class AlgoConfig(BaseModel):
    """Hyperparameters of the centralized-critic learners."""

    model_config = ConfigDict(extra="forbid")

    algorithm: Algorithm = Algorithm.MADDPG_DISCRETE
    gamma: float = Field(default=0.95, ge=0.0, lt=1.0)
    actor_lr: Optional[float] = Field(default=None, gt=0.0)
    critic_lr: Optional[float] = Field(default=None, gt=0.0)
    batch_size: int = Field(default=1024, gt=0)
    hidden_sizes: Tuple[int, ...] = (256, 256)
    alpha: float = Field(default=0.1, gt=0.0, description="MA-SAC entropy coefficient")
    rho: float = Field(default=0.01, gt=0.0, le=1.0, description="Polyak target rate")
    gumbel_temperature: float = Field(default=1.0, gt=0.0)
    epsilon_start: float = Field(default=1.0, ge=0.0, le=1.0)
    epsilon_end: float = Field(default=0.05, ge=0.0, le=1.0)
    epsilon_decay_fraction: float = Field(default=0.2, gt=0.0, le=1.0)
    epsilon_reset_between_phases: bool = True
    updates_per_step: int = Field(default=1, ge=1)

    @field_validator("hidden_sizes", mode="before")
    @classmethod
    def parse_hidden_sizes(cls, v: Any) -> Any:
        return _split_csv(v)

    @field_validator("hidden_sizes")
    @classmethod
    def validate_hidden_sizes(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or any(width <= 0 for width in v):
            raise ValueError(f"hidden_sizes must be positive widths, got {v}")
        return v

    @model_validator(mode="after")
    def fill_learning_rates(self) -> "AlgoConfig":
        default = DEFAULT_LEARNING_RATES[self.algorithm]
        if self.actor_lr is None:
            self.actor_lr = default
        if self.critic_lr is None:
            self.critic_lr = default
        return self

    @property
    def discrete(self) -> bool:
        return self.algorithm.is_discrete


class DvmConfig(BaseModel):
    """Distillation / value-matching settings."""

    model_config = ConfigDict(extra="forbid")

    mode: DvmMode = DvmMode.DVM
    iterations: int = Field(default=2048, ge=0)
    batch_size: int = Field(default=1024, gt=0)
    temperature: float = Field(default=1.0, gt=0.0, description="Distillation softmax tau")
    learning_rate: Optional[float] = Field(
        default=None, gt=0.0, description="Defaults to the algorithm's critic rate"
    )
    warm_start: bool = False
    interleave: bool = True
    anneal: bool = Field(
        default=True, description="Cosine-decay the learning rate to zero over the iterations"
    )
    permutation_cap: int = Field(default=24, ge=1)

    @model_validator(mode="after")
    def validate_iterations(self) -> "DvmConfig":
        if self.mode is not DvmMode.NONE and self.iterations <= 0:
            raise ValueError(f"mode {self.mode.value} needs iterations > 0")
        return self

    def learning_rate_for(self, algo: AlgoConfig) -> float:
        """Explicit DVM rate, or the algorithm's critic rate."""
        return self.learning_rate or algo.critic_lr


class ExperimentConfig(BaseModel):
    """Everything one ``train`` invocation needs."""

    model_config = ConfigDict(extra="forbid")

    domain: Domain = Domain.SPREAD2
    condition: Condition = Condition.DVM
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    phase1_episodes: Optional[int] = Field(default=None, ge=0)
    phase2_episodes: Optional[int] = Field(default=None, ge=0)
    eval_interval: int = Field(default=10, gt=0)
    eval_episodes: int = Field(default=10, ge=1)
    episode_length: int = Field(default=25, gt=0)
    buffer_capacity: int = Field(default=1_000_000, gt=0)
    task3_learning: bool = True
    record_wall_clock: Optional[bool] = None
    output_dir: Optional[str] = None
    algo: AlgoConfig = Field(default_factory=AlgoConfig)
    dvm: DvmConfig = Field(default_factory=DvmConfig)

    @field_validator("seeds", mode="before")
    @classmethod
    def parse_seeds(cls, v: Any) -> Any:
        if isinstance(v, int):
            return [v]
        return _split_csv(v)

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v: List[int]) -> List[int]:
        if len(set(v)) != len(v):
            raise ValueError(f"duplicate seeds in {v}")
        return v

    @model_validator(mode="after")
    def sync_condition(self) -> "ExperimentConfig":
        mode = DvmMode.for_condition(self.condition)
        if mode is not DvmMode.NONE and self.dvm.iterations <= 0:
            raise ValueError(f"condition {self.condition.value} needs dvm_iterations > 0")
        if self.dvm.mode is not mode:
            self.dvm = self.dvm.model_copy(update={"mode": mode})
        default_episodes = get_domain(self.domain).default_phase_episodes
        if self.phase1_episodes is None:
            self.phase1_episodes = default_episodes
        if self.phase2_episodes is None:
            self.phase2_episodes = default_episodes
        return self

    @property
    def algorithm(self) -> Algorithm:
        return self.algo.algorithm


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines.

    Args:
        text: File contents
        source: Name used in error messages

    Returns:
        Mapping of keys to raw string values, in file order

    Raises:
        ConfigurationError: On a malformed or duplicated line
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build_experiment_config(values: Mapping[str, Any]) -> ExperimentConfig:
    """Route flat keys to the nested models and validate.

    Raises:
        ConfigurationError: On unknown keys or invalid values
    """
    top: Dict[str, Any] = {}
    algo: Dict[str, Any] = {}
    dvm: Dict[str, Any] = {}
    for key, value in values.items():
        if value is None:
            continue
        if key in ExperimentConfig.model_fields and key not in ("algo", "dvm"):
            top[key] = value
        elif key in AlgoConfig.model_fields:
            algo[key] = value
        elif key.startswith("dvm_") and key[4:] in DvmConfig.model_fields:
            dvm[key[4:]] = value
        else:
            raise ConfigurationError(f"Unknown configuration key: {key}")
    try:
        # the condition decides the DVM mode; set it before DvmConfig validates
        condition = Condition(top.get("condition", Condition.DVM))
        dvm.setdefault("mode", DvmMode.for_condition(condition))
        return ExperimentConfig(algo=AlgoConfig(**algo), dvm=DvmConfig(**dvm), **top)
    except (ValidationError, ValueError) as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Load a config file (if any) and apply overrides on top of it.

    Args:
        path: Optional ``key = value`` file
        overrides: Values that win over the file (e.g. CLI flags)

    Returns:
        Validated ExperimentConfig
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
        logger.info(f"Loaded {len(values)} configuration keys from {path}")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_experiment_config(values)
