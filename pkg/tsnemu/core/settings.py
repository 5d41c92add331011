"""
Environment configuration for the TSN emulation toolkit
Values come from the process environment, optionally seeded from a local .env file
"""
import logging
import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class Settings(BaseModel):
    """Process-wide defaults; CLI flags override every field"""
    output_dir: str = "./out"
    log_level: str = "INFO"
    default_seed: int = Field(default=42, ge=0)

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        level = value.upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"unknown log level {value!r}")
        return level


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """
    Build settings from the environment

    Returns:
        Settings with TSNEMU_* variables applied over the defaults
    """
    return Settings(
        output_dir=os.environ.get("TSNEMU_OUTPUT_DIR", "./out"),
        log_level=os.environ.get("TSNEMU_LOG_LEVEL", "INFO"),
        default_seed=int(os.environ.get("TSNEMU_DEFAULT_SEED", 42)),
    )


def configure_logging(level: str) -> None:
    """Configure root logging once, on stderr, in the project's format"""
    logging.basicConfig(level=level, format=LOG_FORMAT)
