import pytest
from fastapi.testclient import TestClient

from chiller_horizon.core.config import (
    BenchConfig,
    EpisodeConfig,
    ForecastConfig,
    OracleConfig,
    PpoConfig,
    RewardSpec,
    RhConfig,
    TraceConfig,
    TrainingConfig,
    canonical_plant,
)
from chiller_horizon.core.forecast import synthetic_campus_load
from chiller_horizon.main import app


@pytest.fixture
def client():
    return TestClient(app)


@pytest.fixture
def plant():
    return canonical_plant()


@pytest.fixture
def campus_week():
    """Seven noisy synthetic days (336 half-hour steps)."""
    return synthetic_campus_load(7, seed=3)


@pytest.fixture
def bench_config():
    """A benchmark configuration small enough to train, evaluate and compare in seconds."""
    return BenchConfig(
        reward=RewardSpec(power_scale=None),
        oracle=OracleConfig(split_grid=11, flow_grid=11),
        ppo=PpoConfig(steps_per_batch=96, minibatch_size=48, update_epochs=2, hidden_sizes=(16, 16)),
        rh=RhConfig(forecaster="persistence"),
        forecast=ForecastConfig(window=96, horizon=48, lags=(1, 2, 48, 96)),
        episode=EpisodeConfig(
            trace=TraceConfig(days=6, history_days=0, seed=0),
            episode_length=48,
            forecast_window=4,
            history=96,
        ),
        training=TrainingConfig(total_steps=192, smoke_batches=1, calibration_days=2),
        eval_trace=TraceConfig(days=2, history_days=2, seed=1),
        forecast_train_trace=TraceConfig(days=10, history_days=0, seed=2),
    )
