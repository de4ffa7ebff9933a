"""Process-level settings."""

from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Settings loaded from ``DVM_*`` environment variables or a ``.env`` file."""

    model_config = SettingsConfigDict(
        env_prefix="DVM_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Added to every configured seed (batch-farm sweeps)
    seed_offset: int = 0

    log_level: str = "INFO"
    output_dir: str = "runs"

    # Wall-clock seconds in metrics break byte-identical reruns, so off by default
    record_wall_clock: bool = False


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create settings instance.

    Returns:
        Settings: Process settings
    """
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reload_settings() -> Settings:
    """Reload settings from environment.

    Returns:
        Settings: Fresh settings instance
    """
    global _settings
    _settings = Settings()
    return _settings
