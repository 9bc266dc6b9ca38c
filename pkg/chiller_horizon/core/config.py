"""
Configuration models for the plant, reward, learners, controllers and benchmarks.

Every block is a pydantic model whose validators enforce the invariants the rest of
the package relies on, so a loaded configuration is always physically consistent.
"""
import hashlib
import json
from functools import lru_cache
from importlib.resources import files
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from chiller_horizon.core.errors import ConfigError

SCHEMA_VERSION = 1
HARD_CONSTRAINT_IDS = ("energy_balance", "t_return_range")
SOFT_CONSTRAINT_IDS = ("plr_range", "min_flow", "cop_cap")
CONSTRAINT_IDS = HARD_CONSTRAINT_IDS + SOFT_CONSTRAINT_IDS
FORECASTER_IDS = ("perfect", "persistence", "seasonal_naive", "lag_regression", "mean_profile")


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ChillerSpec(_Frozen):
    """One chiller: rating, flow limits, COP cap and cubic power curve (kW vs PLR)."""
    id: int
    rated_capacity: float
    flow_min: float
    flow_max: float
    cop_max: float
    power_coeffs: Tuple[float, float, float, float]
    r_squared: Optional[float] = None

    @model_validator(mode="after")
    def _check_limits(self) -> "ChillerSpec":
        if not 0 < self.flow_min < self.flow_max:
            raise ValueError(f"chiller {self.id}: need 0 < flow_min < flow_max")
        if self.rated_capacity <= 0:
            raise ValueError(f"chiller {self.id}: rated_capacity must be positive")
        if self.cop_max <= 0:
            raise ValueError(f"chiller {self.id}: cop_max must be positive")
        return self


class PlantConfig(_Frozen):
    schema_version: int = SCHEMA_VERSION
    power_units: Literal["kW"] = "kW"
    chillers: Tuple[ChillerSpec, ...]
    t_supply: float = 6.0
    c_w: float = 4.186
    plr_min: float = 0.2
    plr_max: float = 10.0
    t_return_min: float = 6.56
    t_return_max: float = 14.0
    dt_hours: float = 0.5
    off_fraction: float = 0.5
    notes: Tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check_plant(self) -> "PlantConfig":
        if not self.chillers:
            raise ValueError("plant needs at least one chiller")
        ids = [c.id for c in self.chillers]
        if len(set(ids)) != len(ids):
            raise ValueError("chiller ids must be distinct")
        if not self.t_supply < self.t_return_min < self.t_return_max:
            raise ValueError("need t_supply < t_return_min < t_return_max")
        if not 0 < self.plr_min < self.plr_max:
            raise ValueError("need 0 < plr_min < plr_max")
        if self.c_w <= 0 or self.dt_hours <= 0:
            raise ValueError("c_w and dt_hours must be positive")
        if not 0 < self.off_fraction <= 1:
            raise ValueError("off_fraction must lie in (0, 1]")
        grid = np.linspace(self.plr_min, 1.0, 201)
        for c in self.chillers:
            a, b, g, p = c.power_coeffs
            if np.any(a + b * grid + g * grid ** 2 + p * grid ** 3 <= 0):
                raise ValueError(f"chiller {c.id}: power curve not positive on [plr_min, 1]")
        return self

    @property
    def n_chillers(self) -> int:
        return len(self.chillers)

    def index_of(self, chiller_id: int) -> int:
        for i, c in enumerate(self.chillers):
            if c.id == chiller_id:
                return i
        raise ConfigError(f"unknown chiller id {chiller_id}")


class ConstraintTolerances(_Frozen):
    energy_kw: float = 1.0
    temperature_c: float = 0.01
    plr: float = 1e-6
    flow: float = 1e-6
    cop: float = 1e-6

    @model_validator(mode="after")
    def _non_negative(self) -> "ConstraintTolerances":
        if min(self.energy_kw, self.temperature_c, self.plr, self.flow, self.cop) < 0:
            raise ValueError("tolerances must be non-negative")
        return self


class OracleConfig(_Frozen):
    split_grid: int = 51
    flow_grid: int = 101
    tie_break: Literal["min_total_flow"] = "min_total_flow"
    workers: int = 1
    # Grid splits per subset refined off the lattice; 0 keeps the pure grid search.
    refine_starts: int = 2
    refine_min_step: float = 1e-9
    # Only subsets whose best grid power is within this fraction of the overall best
    # grid power are refined.
    refine_margin: float = 0.1
    # The published chiller-4 curve sits above its COP cap at every PLR, so the
    # cap is reported but not enforced unless listed here.
    enforced: Tuple[str, ...] = ("energy_balance", "t_return_range", "plr_range", "min_flow")

    @field_validator("split_grid", "flow_grid")
    @classmethod
    def _grid_size(cls, v: int) -> int:
        if v < 2:
            raise ValueError("grids need at least 2 points")
        return v

    @field_validator("workers")
    @classmethod
    def _workers(cls, v: int) -> int:
        if v < 1:
            raise ValueError("workers must be >= 1")
        return v

    @field_validator("refine_starts")
    @classmethod
    def _refine_starts(cls, v: int) -> int:
        if v < 0:
            raise ValueError("refine_starts must be >= 0")
        return v

    @field_validator("refine_min_step")
    @classmethod
    def _refine_min_step(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("refine_min_step must lie in (0, 1)")
        return v

    @field_validator("refine_margin")
    @classmethod
    def _refine_margin(cls, v: float) -> float:
        if v < 0:
            raise ValueError("refine_margin must be non-negative")
        return v

    @field_validator("enforced")
    @classmethod
    def _enforced(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        unknown = [c for c in v if c not in CONSTRAINT_IDS]
        if unknown:
            raise ValueError(f"unknown constraint ids {unknown}")
        return v

    def doubled(self) -> "OracleConfig":
        """Twice the grid density: ``2*(g-1)+1`` points, a lattice containing this one."""
        return self.model_copy(update={
            "split_grid": 2 * (self.split_grid - 1) + 1,
            "flow_grid": 2 * (self.flow_grid - 1) + 1,
        })


def _default_soft_weights() -> Dict[str, float]:
    return {"plr_range": 0.5, "min_flow": 0.5, "cop_cap": 0.5, "switching": 0.2, "sparsity": 0.1}


class RewardSpec(_Frozen):
    """Priority map, penalty weights and soft weights of the prioritized reward."""
    hard_order: Tuple[str, ...] = HARD_CONSTRAINT_IDS
    lambdas: Dict[str, float] = Field(default_factory=lambda: {k: 10.0 for k in HARD_CONSTRAINT_IDS})
    hard_scales: Dict[str, float] = Field(
        default_factory=lambda: {"energy_balance": 1000.0, "t_return_range": 1.0}
    )
    soft_weights: Dict[str, float] = Field(default_factory=_default_soft_weights)
    # None means "calibrate against the rule-based controller".
    power_scale: Optional[float] = 1000.0
    # Feasible-step rewards saturate this fraction of the smallest hard lambda above
    # the hard-violation ceiling.
    feasible_margin: float = 0.05
    tolerances: ConstraintTolerances = ConstraintTolerances()

    @model_validator(mode="after")
    def _check_reward(self) -> "RewardSpec":
        if not self.hard_order:
            raise ValueError("hard_order must not be empty")
        if len(set(self.hard_order)) != len(self.hard_order):
            raise ValueError("hard_order ids must be distinct")
        for cid in self.hard_order:
            if cid not in CONSTRAINT_IDS:
                raise ValueError(f"unknown constraint id {cid!r}")
            if cid not in self.lambdas:
                raise ValueError(f"missing lambda for {cid!r}")
            if self.hard_scales.get(cid, 1.0) <= 0:
                raise ValueError(f"hard scale for {cid!r} must be positive")
        if any(v < 0 for v in self.lambdas.values()):
            raise ValueError("lambdas must be non-negative")
        if any(self.lambdas[cid] <= 0 for cid in self.hard_order):
            raise ValueError("lambdas of hard constraints must be positive")
        if not 0 < self.feasible_margin < 1:
            raise ValueError("feasible_margin must lie in (0, 1)")
        if any(v < 0 for v in self.soft_weights.values()):
            raise ValueError("soft weights must be non-negative")
        if self.power_scale is not None and self.power_scale <= 0:
            raise ValueError("power_scale must be positive")
        return self

    @property
    def feasible_floor(self) -> float:
        """Lowest reward a step without hard violations can receive."""
        return -min(self.lambdas[cid] for cid in self.hard_order) * (1.0 - self.feasible_margin)

    def with_power_scale(self, power_scale: float) -> "RewardSpec":
        return self.model_copy(update={"power_scale": float(power_scale)})


class PpoConfig(_Frozen):
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    pi_lr: float = 3e-4
    vf_lr: float = 1e-3
    update_epochs: int = 10
    minibatch_size: int = 256
    steps_per_batch: int = 4800
    entropy_coef: float = 0.001
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    target_kl: float = 0.01
    seed: int = 0
    init_log_std: float = -0.5
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: Literal["tanh", "relu"] = "tanh"
    checkpoint_every: int = 1

    @model_validator(mode="after")
    def _check_ppo(self) -> "PpoConfig":
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if not 0 < self.clip_ratio < 1:
            raise ValueError("clip_ratio must lie in (0, 1)")
        sizes = (self.update_epochs, self.minibatch_size, self.steps_per_batch, self.checkpoint_every)
        if min(sizes) <= 0 or min(self.hidden_sizes, default=1) <= 0:
            raise ValueError("sizes must be positive")
        if min(self.pi_lr, self.vf_lr, self.max_grad_norm, self.target_kl) <= 0:
            raise ValueError("step sizes, max_grad_norm and target_kl must be positive")
        return self


class RuleBasedConfig(_Frozen):
    staging_order: Tuple[int, ...] = (4, 1, 2, 3)
    stage_up: float = 0.9
    stage_down: float = 0.5
    reaction_lag: int = 1
    working_hours: Tuple[int, int] = (8, 18)
    hold_first_stage_in_working_hours: bool = False
    t_return_target: float = 12.0
    idle_load_kw: float = 1.0

    @model_validator(mode="after")
    def _check_rule(self) -> "RuleBasedConfig":
        if not (0 < self.stage_down < 1 and 0 < self.stage_up < 1):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.stage_down >= self.stage_up:
            raise ValueError("stage_down must be below stage_up (hysteresis)")
        if self.reaction_lag < 1:
            raise ValueError("reaction_lag must be >= 1")
        if len(set(self.staging_order)) != len(self.staging_order):
            raise ValueError("staging_order ids must be distinct")
        start, end = self.working_hours
        if not 0 <= start < end <= 24:
            raise ValueError("working_hours must satisfy 0 <= start < end <= 24")
        return self


class RhConfig(_Frozen):
    forecaster: str = "lag_regression"
    horizon: int = 48
    replan_interval: int = 1

    @model_validator(mode="after")
    def _check_rh(self) -> "RhConfig":
        if self.forecaster not in FORECASTER_IDS:
            raise ValueError(f"unknown forecaster {self.forecaster!r}")
        if not 1 <= self.replan_interval <= self.horizon:
            raise ValueError("need 1 <= replan_interval <= horizon")
        return self


class ForecastConfig(_Frozen):
    window: int = 336
    horizon: int = 48
    period: int = 48
    ridge_alpha: float = 1.0
    lags: Tuple[int, ...] = (1, 2, 48, 336)

    @model_validator(mode="after")
    def _check_forecast(self) -> "ForecastConfig":
        if min(self.window, self.horizon, self.period) <= 0:
            raise ValueError("window, horizon and period must be positive")
        if max(self.lags) > self.window:
            raise ValueError("lags cannot reach beyond the history window")
        if self.ridge_alpha < 0:
            raise ValueError("ridge_alpha must be non-negative")
        return self


class WeatherParams(_Frozen):
    """Shape of the synthetic campus: weather climate and the load it drives."""
    start: str = "2024-01-01T00:00:00"
    mean_temp_c: float = 24.0
    temp_amplitude_c: float = 5.0
    peak_ghi_wm2: float = 900.0
    mean_rh_pct: float = 65.0
    mean_wind_mps: float = 3.5
    base_load_kw: float = 700.0
    diurnal_amplitude_kw: float = 350.0
    occupancy_load_kw: float = 1100.0
    working_hours: Tuple[int, int] = (8, 18)
    temp_coeff_kw_per_c: float = 110.0
    temp_balance_c: float = 18.0
    ghi_coeff: float = 0.6
    noise: float = 1.0
    noise_kw: float = 60.0
    max_load_kw: float = 5500.0
    min_load_kw: float = 250.0

    @model_validator(mode="after")
    def _check_weather(self) -> "WeatherParams":
        if self.noise < 0 or self.noise_kw < 0:
            raise ValueError("noise amplitudes must be non-negative")
        if not 0 <= self.min_load_kw < self.max_load_kw:
            raise ValueError("need 0 <= min_load_kw < max_load_kw")
        return self


class TraceConfig(_Frozen):
    source: Literal["synthetic", "csv"] = "synthetic"
    path: Optional[str] = None
    days: int = 60
    history_days: int = 7
    seed: int = 0
    weather: WeatherParams = WeatherParams()

    @model_validator(mode="after")
    def _check_trace(self) -> "TraceConfig":
        if self.source == "csv" and not self.path:
            raise ValueError("csv traces need a path")
        if self.days < 1 or self.history_days < 0:
            raise ValueError("days must be >= 1 and history_days >= 0")
        return self


class EpisodeConfig(_Frozen):
    trace: TraceConfig = TraceConfig(days=120, seed=0)
    forecaster: str = "perfect"
    episode_length: int = 48
    forecast_window: int = 48
    perfect_foresight: bool = False
    random_start: bool = True
    history: int = 336
    seed: int = 0

    @model_validator(mode="after")
    def _check_episode(self) -> "EpisodeConfig":
        if self.forecaster not in FORECASTER_IDS:
            raise ValueError(f"unknown forecaster {self.forecaster!r}")
        if min(self.episode_length, self.forecast_window) <= 0 or self.history < 0:
            raise ValueError("episode_length and forecast_window must be positive")
        return self


class TrainingConfig(_Frozen):
    total_steps: int = 200_000
    smoke_batches: int = 2
    calibration_days: int = 14


class BenchConfig(_Frozen):
    schema_version: int = SCHEMA_VERSION
    plant: Optional[PlantConfig] = None
    plant_path: Optional[str] = None
    reward: RewardSpec = RewardSpec(power_scale=None)
    oracle: OracleConfig = OracleConfig()
    ppo: PpoConfig = PpoConfig()
    rule_based: RuleBasedConfig = RuleBasedConfig()
    rh: RhConfig = RhConfig()
    forecast: ForecastConfig = ForecastConfig()
    episode: EpisodeConfig = EpisodeConfig()
    training: TrainingConfig = TrainingConfig()
    eval_trace: TraceConfig = TraceConfig(days=60, seed=1)
    forecast_train_trace: TraceConfig = TraceConfig(days=60, seed=2)
    rh_checkpoint: Optional[str] = None
    one_step_checkpoint: Optional[str] = None

    @field_validator("schema_version")
    @classmethod
    def _schema(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {SCHEMA_VERSION}")
        return v

    def resolved_plant(self) -> PlantConfig:
        if self.plant is not None:
            return self.plant
        if self.plant_path:
            return load_plant_config(self.plant_path)
        return canonical_plant()


def _read_json(path: Union[str, Path]) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def load_plant_config(path: Union[str, Path]) -> PlantConfig:
    payload = _read_json(path)
    try:
        plant = PlantConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"invalid plant config {path}: {exc}") from exc
    if plant.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported plant schema_version {plant.schema_version}")
    return plant


@lru_cache()
def canonical_plant() -> PlantConfig:
    """The bundled four-chiller campus plant."""
    payload = json.loads(files("chiller_horizon").joinpath("data", "plant.json").read_text(encoding="utf-8"))
    return PlantConfig.model_validate(payload)


def load_bench_config(path: Optional[Union[str, Path]]) -> BenchConfig:
    if path is None:
        return BenchConfig()
    payload = _read_json(path)
    base = Path(path).parent
    # Relative paths inside the file resolve against the file's directory.
    for key in ("plant_path", "rh_checkpoint", "one_step_checkpoint"):
        if payload.get(key) and not Path(payload[key]).is_absolute():
            payload[key] = str(base / payload[key])
    try:
        return BenchConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"invalid bench config {path}: {exc}") from exc


def config_hash(model: BaseModel) -> str:
    canonical = json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def subset_plant(plant: PlantConfig, chiller_ids: List[int]) -> PlantConfig:
    """A copy of ``plant`` restricted to the given chillers, in the given order."""
    chillers = tuple(plant.chillers[plant.index_of(cid)] for cid in chiller_ids)
    return plant.model_copy(update={"chillers": chillers})
