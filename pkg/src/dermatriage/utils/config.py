"""
Run configuration for the batch commands.

Defaults come from the environment (a .env file is loaded first); command-line
flags override them. RunConfig validates itself on construction.
"""

import os
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()  # Load environment variables from .env file


class ConfigError(Exception):
    """Raised when a run configuration breaks its invariants."""
    pass


def _env_float(name, default):
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return float(raw)
    except ValueError as e:
        raise ConfigError(f"{name}={raw!r} is not a number") from e


def _env_int(name, default):
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{name}={raw!r} is not an integer") from e


def env_defaults():
    """Current environment defaults, read at call time so tests can monkeypatch them."""
    return {
        "tau": _env_float("DERMATRIAGE_TAU", 0.5),
        "green_threshold": _env_float("DERMATRIAGE_GREEN_THRESHOLD", 0.15),
        "red_threshold": _env_float("DERMATRIAGE_RED_THRESHOLD", 0.50),
        "confidence": _env_float("DERMATRIAGE_CONFIDENCE", 0.95),
        "jobs": _env_int("DERMATRIAGE_JOBS", 1),
        "residual_weight": _env_float("DERMATRIAGE_RESIDUAL_WEIGHT", 0.5),
        "rollout_target": _env_int("DERMATRIAGE_ROLLOUT_TARGET", 0),
    }


@dataclass(frozen=True)
class RunConfig:
    manifest: Path | None
    out_dir: Path
    tau: float = 0.5
    green_threshold: float = 0.15
    red_threshold: float = 0.50
    confidence: float = 0.95
    jobs: int = 1
    residual_weight: float = 0.5
    rollout_target: int = 0
    decision_date: date = field(default_factory=date.today)
    followup_date: date | None = None
    registry_path: Path | None = None
    maps_dir: Path | None = None
    paired_path: Path | None = None
    write_pgm: bool = False

    def __post_init__(self):
        if not 0.0 <= self.green_threshold < self.red_threshold <= 1.0:
            raise ConfigError(
                f"need 0 <= green < red <= 1, got green={self.green_threshold}, red={self.red_threshold}"
            )
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau {self.tau} outside [0, 1]")
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError(f"confidence {self.confidence} outside (0, 1)")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be at least 1, got {self.jobs}")
        if not 0.0 <= self.residual_weight <= 1.0:
            raise ConfigError(f"residual weight {self.residual_weight} outside [0, 1]")
        if self.rollout_target < 0:
            raise ConfigError(f"rollout target {self.rollout_target} is negative")

    @property
    def review_date(self):
        """Day the follow-up list is evaluated for; defaults to the decision date."""
        return self.followup_date or self.decision_date

    @property
    def registry_log(self):
        """Registry event log; defaults to registry.jsonl in the output directory."""
        return self.registry_path or self.out_dir / "registry.jsonl"

    @classmethod
    def from_env(cls, manifest, out_dir, **overrides):
        """Build a config from environment defaults; None-valued overrides are ignored."""
        values = env_defaults()
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(
            manifest=Path(manifest) if manifest is not None else None,
            out_dir=Path(out_dir),
            **values,
        )
