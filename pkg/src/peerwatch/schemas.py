"""Pydantic models: the experiment config tree and the service wire types.

An ExperimentConfig bundles one scenario's simulator, pipeline, model,
training and detector settings. The request/response models below it are
the HTTP surface; the CLI talks in exactly these shapes.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .detector import DetectorConfig
from .netsim import SimConfig
from .nn import TrainConfig
from .pipeline import PipelineParams


class ModelSpec(BaseModel):
    """Architecture knobs a user picks; widths tied to the data (feature
    count, vocabulary size) are filled in at training time."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden_size: int = Field(ge=1)
    num_layers: int = Field(default=2, ge=1)
    num_directions: Literal[1, 2] = 2
    embedding_dim: Optional[int] = Field(default=None, ge=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(min_length=1)
    sim: SimConfig
    pipeline: PipelineParams = PipelineParams()
    model: ModelSpec
    train: TrainConfig
    detector: DetectorConfig

    @model_validator(mode="after")
    def _route_coherent(self) -> "ExperimentConfig":
        categorical = self.sim.scenario == "discovery-poisoning"
        if categorical:
            if self.detector.mode != "categorical":
                raise ValueError("discovery-poisoning uses the categorical detector")
            if self.train.loss != "cross_entropy":
                raise ValueError("discovery-poisoning trains with cross_entropy")
            if self.model.embedding_dim is None:
                raise ValueError("discovery-poisoning needs model.embedding_dim")
        else:
            if self.detector.mode != "numeric":
                raise ValueError(f"{self.sim.scenario} uses the numeric detector")
            if self.train.loss != "mse":
                raise ValueError(f"{self.sim.scenario} trains with mse")
        return self

    @property
    def route(self) -> str:
        return "categorical" if self.sim.scenario == "discovery-poisoning" else "numeric"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """One experiment seed drives both the simulator and training RNGs."""
        return self.model_copy(
            update={
                "sim": self.sim.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"random_seed": seed}),
            }
        )


# -- service wire types ----------------------------------------------------


class StageRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig
    out_dir: str = Field(min_length=1)
    seed: Optional[int] = None

    def effective_config(self) -> ExperimentConfig:
        return self.config if self.seed is None else self.config.with_seed(self.seed)


class StageResponse(BaseModel):
    stage: str
    out_dir: str
    summary: dict


class RunExperimentRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: Optional[str] = None
    config: Optional[ExperimentConfig] = None
    out_dir: str = Field(min_length=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _one_source(self) -> "RunExperimentRequest":
        if (self.preset is None) == (self.config is None):
            raise ValueError("give exactly one of preset or config")
        return self


class MetricsPayload(BaseModel):
    unit: str = "record"
    tp: int
    fp: int
    tn: int
    fn: int
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    accuracy: Optional[float]


class RunExperimentResponse(BaseModel):
    name: str
    out_dir: str
    stages: dict
    metrics: MetricsPayload


class PresetInfo(BaseModel):
    name: str
    scenario: str
    attackers: int
    victims: int
    detector_mode: str


class HealthResponse(BaseModel):
    status: str
    version: str
