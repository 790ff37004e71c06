"""Shared fixtures: small experiment configs that run in seconds."""

import pytest

from peerwatch.detector import DetectorConfig
from peerwatch.netsim import SimConfig
from peerwatch.nn import TrainConfig
from peerwatch.pipeline import PipelineParams
from peerwatch.schemas import ExperimentConfig, ModelSpec


@pytest.fixture()
def tiny_numeric_config() -> ExperimentConfig:
    return ExperimentConfig(
        name="tiny-eclipse",
        sim=SimConfig(
            scenario="eclipse-single-victim",
            seed=7,
            n_honest=10,
            n_attackers=6,
            n_victims=1,
            duration_ms=12_000,
            publish_rate_per_peer_per_s=1.0,
            mesh_degree=4,
            attack_start_ms=3_000,
        ),
        pipeline=PipelineParams(),
        model=ModelSpec(hidden_size=6, num_layers=2, num_directions=2),
        train=TrainConfig(epochs=3, batch_size=256, learning_rate=0.01, patience=2, loss="mse", random_seed=7),
        detector=DetectorConfig(mode="numeric", threshold_quantile=0.99),
    )


@pytest.fixture()
def tiny_categorical_config() -> ExperimentConfig:
    return ExperimentConfig(
        name="tiny-discovery",
        sim=SimConfig(
            scenario="discovery-poisoning",
            seed=9,
            n_honest=32,
            n_attackers=2,
            n_victims=1,
            duration_ms=40_000,
            attack_start_ms=20_000,
            honest_churn_hz=6.0,
            attack_churn_hz=8.0,
            fresh_ip_fraction=0.02,
            honest_ip_pool=16,
        ),
        pipeline=PipelineParams(),
        model=ModelSpec(hidden_size=8, num_layers=2, num_directions=2, embedding_dim=4),
        train=TrainConfig(
            epochs=3, batch_size=256, learning_rate=0.01, patience=2, loss="cross_entropy", random_seed=9
        ),
        detector=DetectorConfig(mode="categorical", top_k=3),
    )
