"""
Experiment configuration schema. Configs are JSON documents validated with
pydantic; unknown keys are rejected and ``schema_version`` must be 1.
"""

import json
import logging
import os
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.mpgpmd.core.pmd import THEOREM, PmdConfig
from src.mpgpmd.errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_OUTPUT_DIR = "outputs"


class GameSource(BaseModel):
    """Either a generator family with its sizes or a game file path."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    family: Optional[
        Literal["identical_interest", "weighted_identical_interest", "dummy_term", "congestion", "coordination"]
    ] = None
    path: Optional[str] = None
    num_players: int = Field(default=2, ge=1)
    num_states: int = Field(default=1, ge=1)
    num_actions: int = Field(default=2, ge=1)
    action_counts: Optional[list[int]] = None
    discount: float = Field(default=0.0, ge=0.0, lt=1.0)
    num_facilities: int = Field(default=2, ge=1)
    dummy_scale: float = Field(default=1.0, ge=0.0)
    lead_weight: float = Field(default=0.4, gt=0.0)
    follower_weight: float = Field(default=0.1, ge=0.0)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def one_source(self):
        if (self.family is None) == (self.path is None):
            raise ValueError("game needs exactly one of 'family' or 'path'")
        if self.action_counts is not None and len(self.action_counts) != self.num_players:
            raise ValueError("action_counts must list one count per player")
        return self

    def counts(self) -> list:
        if self.action_counts is not None:
            return list(self.action_counts)
        return [self.num_actions] * self.num_players


class AlgorithmConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    regularizer: Literal["euclidean", "kl"]
    step_size: Union[Literal["theorem"], float] = THEOREM
    advantage_form: bool = True
    initial_policy: Literal["uniform", "biased", "random"] = "uniform"
    bias: float = Field(default=0.1, ge=0.0, lt=1.0)
    bias_action: int = Field(default=0, ge=0)

    @field_validator("step_size")
    @classmethod
    def positive_step(cls, value):
        if value != THEOREM and not value > 0:
            raise ValueError("step_size must be positive or 'theorem'")
        return value

    @property
    def label(self) -> str:
        if self.regularizer == "kl":
            return "kl_adv" if self.advantage_form else "kl_q"
        return "euclidean"

    def to_pmd_config(self, num_iterations: int) -> PmdConfig:
        return PmdConfig(
            regularizer=self.regularizer,
            step_size=self.step_size,
            num_iterations=num_iterations,
            advantage_form=self.advantage_form,
            initial_policy=self.initial_policy,
            bias=self.bias,
            bias_action=self.bias_action,
        )


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    axis: Literal["num_players"] = "num_players"
    values: list[int] = Field(min_length=1)

    @field_validator("values")
    @classmethod
    def positive_values(cls, values):
        if any(v < 1 for v in values):
            raise ValueError("sweep values must be positive")
        return values


class CertificationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_policies: int = Field(default=3, ge=1)
    mc_trajectories: int = Field(default=100_000, ge=2)
    truncation_error: float = Field(default=1e-6, gt=0.0)
    fd_entries: int = Field(default=20, ge=0)
    fd_step: float = Field(default=1e-5, ge=1e-7, le=1e-3)
    projection_vectors: int = Field(default=200, ge=0)
    projection_max_dim: int = Field(default=8, ge=2, le=12)
    deviation_samples: int = Field(default=100, ge=0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1]
    name: str = Field(min_length=1)
    game: GameSource
    algorithms: list[AlgorithmConfig] = Field(min_length=1)
    num_iterations: int = Field(ge=1)
    epsilons: list[float] = Field(default=[0.05], min_length=1)
    sweep: Optional[SweepConfig] = None
    seeds: list[int] = Field(min_length=1)
    output_dir: Optional[str] = None
    format: Literal["csv", "json"] = "csv"
    bound_nu: list[Literal["rho", "uniform"]] = Field(default=["rho", "uniform"], min_length=1)
    trust_mpg: bool = False
    enumeration_cap: Optional[int] = Field(default=None, ge=1)
    certification: CertificationConfig = CertificationConfig()
    workers: int = Field(default=1, ge=1)

    @field_validator("epsilons")
    @classmethod
    def positive_epsilons(cls, values):
        if any(not e > 0 for e in values):
            raise ValueError("every epsilon must be positive")
        return values

    @model_validator(mode="after")
    def sweep_needs_generator(self):
        if self.sweep is not None and self.game.path is not None:
            raise ValueError("a num_players sweep needs a generator family, not a game file")
        return self

    def resolved_output_dir(self) -> str:
        return self.output_dir or os.getenv("MPGPMD_OUTPUT_DIR", DEFAULT_OUTPUT_DIR)


def parse_config(document: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {e}")


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not read config '{path}': {e}")
    config = parse_config(document)
    logger.info(f"Loaded experiment config '{config.name}' from {path}")
    return config


def apply_overrides(config: ExperimentConfig, out: str = None, seed: int = None, trust_mpg: bool = False, epsilon: float = None, output_format: str = None) -> ExperimentConfig:
    """Command-line flags take precedence over config values."""
    update = {}
    if out is not None:
        update["output_dir"] = out
    if seed is not None:
        update["seeds"] = [seed]
    if trust_mpg:
        update["trust_mpg"] = True
    if epsilon is not None:
        update["epsilons"] = [epsilon]
    if output_format is not None:
        update["format"] = output_format
    if not update:
        return config
    # Revalidate so overridden values pass the same checks as file values.
    return parse_config({**config.model_dump(), **update})
