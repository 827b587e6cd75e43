"""
Run Configuration Module

One frozen RunConfig aggregating every component's settings:
- TOML file with optional [env], [reward], [policy], [schedule],
  [curriculum], [train], [loop] and [run] sections
- Environment variables MINIDROID_CONFIG / MINIDROID_OUT / MINIDROID_SEED
- Command-line overrides

Precedence: CLI flag > environment variable > config file > model default.
Without a --config flag or MINIDROID_CONFIG the shipped config/default.toml
is used.
"""

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .curriculum import CurriculumConfig, ScheduleConfig
from .environment import EnvConfig
from .planner import LoopConfig
from .policy import PolicyConfig
from .reward import RewardConfig
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

ENV_CONFIG = "MINIDROID_CONFIG"
ENV_OUT = "MINIDROID_OUT"
ENV_SEED = "MINIDROID_SEED"

DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "config" / "default.toml"
DEFAULT_OUTPUT_DIR = "runs"

SECTIONS = ("env", "reward", "policy", "schedule", "curriculum", "train", "loop")


class RunConfig(BaseModel):
    """Every knob of a run."""
    model_config = ConfigDict(frozen=True)

    env: EnvConfig = Field(default_factory=EnvConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    curriculum: CurriculumConfig = Field(default_factory=CurriculumConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loop: LoopConfig = Field(default_factory=LoopConfig)

    n_srlr: int = Field(default=3, ge=1)
    rounds: int = Field(default=4, ge=1)
    episodes_per_eval: int = Field(default=3, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    demos_per_template: int = Field(default=5, ge=1)
    phase_steps: int = Field(default=250, ge=1)
    templates: Optional[list[str]] = None
    output_dir: str = DEFAULT_OUTPUT_DIR

    @field_validator("seeds")
    @classmethod
    def _seeds_non_empty(cls, seeds: list[int]) -> list[int]:
        if not seeds:
            raise ValueError("seeds must not be empty")
        return seeds

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with the training seed replaced."""
        return self.model_copy(update={"train": self.train.model_copy(update={"seed": seed})})

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: str | Path) -> dict:
    """
    Parse a TOML config file into RunConfig field layout.

    Keys of the [run] section become top-level fields.

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: On TOML syntax errors or unknown sections
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ValueError(f"Invalid TOML in {path}: {e}")

    data: dict[str, Any] = {}
    for section, values in raw.items():
        if section == "run":
            data.update(values)
        elif section in SECTIONS:
            data[section] = values
        else:
            raise ValueError(f"Unknown config section [{section}] in {path}")
    return data


def load_config(
    path: Optional[str | Path] = None,
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    overrides: Optional[dict] = None,
) -> RunConfig:
    """
    Build the effective RunConfig.

    Args:
        path: Config file (falls back to MINIDROID_CONFIG, then config/default.toml)
        seed: Training seed from the command line
        output_dir: Output directory from the command line
        overrides: Extra nested overrides applied last

    Returns:
        Validated, frozen RunConfig

    Raises:
        FileNotFoundError: If an explicit config file is missing
        ValueError: If the merged settings fail validation
    """
    path = path or os.environ.get(ENV_CONFIG)
    if not path and DEFAULT_CONFIG_PATH.exists():
        path = DEFAULT_CONFIG_PATH
    data = read_config_file(path) if path else {}
    if path:
        logger.info("Loaded config from %s", path)

    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        data = _merge(data, {"train": {"seed": int(env_seed)}})
    env_out = os.environ.get(ENV_OUT)
    if env_out:
        data["output_dir"] = env_out

    if seed is not None:
        data = _merge(data, {"train": {"seed": seed}})
    if output_dir:
        data["output_dir"] = output_dir
    if overrides:
        data = _merge(data, overrides)

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ValueError(f"Invalid configuration: {e}")


if __name__ == "__main__":
    cfg = load_config(DEFAULT_CONFIG_PATH)
    print(f"Seed: {cfg.seed}  rounds: {cfg.rounds}  n_srlr: {cfg.n_srlr}")
    print(f"Learning rate: {cfg.train.learning_rate}  G: {cfg.train.G}")
    print(f"Replay ratios: {cfg.curriculum.ratios}")
