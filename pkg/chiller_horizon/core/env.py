"""
Episodic control environment around the plant physics.

An episode walks a load trace one half-hour step at a time. Each step decodes an
action into chiller flows, dispatches the plant against the true load, scores the
result with the prioritized reward and emits the next observation (forecast window
plus plant channels).
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from chiller_horizon.core.config import EpisodeConfig, PlantConfig, RewardSpec
from chiller_horizon.core.errors import ConfigError, ContractError, InputError
from chiller_horizon.core.forecast import (
    ExogSeries,
    Forecaster,
    LoadSeries,
    PerfectForesightForecaster,
    make_request,
)
from chiller_horizon.core.plant import (
    ChillerAction,
    ConstraintReport,
    PlantTelemetry,
    check_constraints,
    decode_flows,
    steady_state_dispatch,
)

logger = logging.getLogger(__name__)

POWER_COMPONENT = "power"


@dataclass(frozen=True)
class ObservationScales:
    """Reference magnitudes that bring every observation channel to order one."""
    load_kw: float
    power_kw: float
    cop: float
    t_supply: float
    t_span: float

    @classmethod
    def from_plant(cls, plant: PlantConfig) -> "ObservationScales":
        rated_power = sum(max(sum(c.power_coeffs), 1.0) for c in plant.chillers)
        return cls(
            load_kw=sum(c.rated_capacity for c in plant.chillers),
            power_kw=rated_power,
            cop=max(c.cop_max for c in plant.chillers),
            t_supply=plant.t_supply,
            t_span=plant.t_return_max - plant.t_supply,
        )


@dataclass(frozen=True)
class Observation:
    forecast_window: Tuple[float, ...]
    cooling: Tuple[float, ...]
    plr: Tuple[float, ...]
    cop: Tuple[float, ...]
    power: Tuple[float, ...]
    t_return: float
    prev_on: Tuple[bool, ...]
    vector: np.ndarray = field(repr=False, compare=False)

    @property
    def dim(self) -> int:
        return int(self.vector.size)


def observation_dim(n_chillers: int, forecast_window: int) -> int:
    return forecast_window + 5 * n_chillers + 1


def assemble_observation(
    plant: PlantConfig,
    forecast_window: Sequence[float],
    telemetry: PlantTelemetry,
    prev_on: Sequence[bool],
    scales: Optional[ObservationScales] = None,
) -> Observation:
    """Normalised observation from a forecast window and the last plant telemetry."""
    scales = scales or ObservationScales.from_plant(plant)
    window = np.asarray(forecast_window, dtype=float)
    vector = np.concatenate([
        window / scales.load_kw,
        np.asarray(telemetry.cooling) / scales.load_kw,
        np.asarray(telemetry.plr),
        np.asarray(telemetry.cop) / scales.cop,
        np.asarray(telemetry.power) / scales.power_kw,
        [(telemetry.t_return - scales.t_supply) / scales.t_span],
        np.asarray(prev_on, dtype=float),
    ])
    if not np.all(np.isfinite(vector)):
        raise InputError("observation contains non-finite entries")
    return Observation(
        forecast_window=tuple(float(x) for x in window),
        cooling=tuple(telemetry.cooling),
        plr=tuple(telemetry.plr),
        cop=tuple(telemetry.cop),
        power=tuple(telemetry.power),
        t_return=telemetry.t_return,
        prev_on=tuple(bool(x) for x in prev_on),
        vector=vector,
    )


def idle_telemetry(plant: PlantConfig) -> PlantTelemetry:
    return steady_state_dispatch(plant, ChillerAction.all_off(plant.n_chillers), 0.0)


def raw_to_flows(plant: PlantConfig, raw: Sequence[float]) -> List[float]:
    """Affine map of a raw action in [-1, 1] per chiller onto [0, flow_max]."""
    values = np.asarray(raw, dtype=float).reshape(-1)
    if values.size != plant.n_chillers:
        raise ContractError(f"action must have {plant.n_chillers} entries, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise InputError("action contains non-finite entries")
    values = np.clip(values, -1.0, 1.0)
    return [float((a + 1.0) / 2.0 * c.flow_max) for a, c in zip(values, plant.chillers)]


def raw_to_action(plant: PlantConfig, raw: Sequence[float]) -> ChillerAction:
    return decode_flows(plant, raw_to_flows(plant, raw))


def flows_to_raw(plant: PlantConfig, flows: Sequence[float]) -> np.ndarray:
    return np.array([2.0 * f / c.flow_max - 1.0 for f, c in zip(flows, plant.chillers)])


def priority_reward(
    report: ConstraintReport,
    telemetry: PlantTelemetry,
    prev_on: Sequence[bool],
    spec: RewardSpec,
) -> Tuple[float, str]:
    """
    Prioritized reward: the first violated hard constraint alone sets a penalty,
    otherwise the normalised power saving minus weighted soft penalties, held at or
    above ``spec.feasible_floor`` so it stays above every hard-violation reward.
    """
    for cid in spec.hard_order:
        entry = report.entries.get(cid)
        if entry is None or entry.satisfied:
            continue
        scale = spec.hard_scales.get(cid, 1.0)
        return -spec.lambdas[cid] * (1.0 + entry.violation_magnitude / scale), cid

    if spec.power_scale is None:
        raise ConfigError("reward power_scale is unset; calibrate it before scoring")
    w = spec.soft_weights
    reward = (spec.power_scale - telemetry.total_power) / spec.power_scale
    for cid in ("plr_range", "min_flow", "cop_cap"):
        entry = report.entries.get(cid)
        if entry is not None:
            reward -= w.get(cid, 0.0) * entry.violation_magnitude
    n = len(telemetry.on_status)
    toggles = sum(1 for a, b in zip(prev_on, telemetry.on_status) if bool(a) != bool(b))
    reward -= w.get("switching", 0.0) * toggles
    reward -= w.get("sparsity", 0.0) * (sum(telemetry.on_status) / n if n else 0.0)
    return max(reward, spec.feasible_floor), POWER_COMPONENT


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    telemetry: PlantTelemetry
    constraint_report: ConstraintReport
    done: bool
    info: Dict[str, object]


@dataclass(frozen=True)
class StepRecord:
    index: int
    timestamp: Optional[pd.Timestamp]
    telemetry: PlantTelemetry
    report: ConstraintReport
    reward: float
    active_component: str

    @property
    def hard_violation(self) -> bool:
        return self.active_component != POWER_COMPONENT


@dataclass
class EpisodeLog:
    dt_hours: float
    records: List[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: StepRecord) -> None:
        self.records.append(record)

    @property
    def hard_violation_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.hard_violation for r in self.records) / len(self.records)

    def frame(self) -> pd.DataFrame:
        """One row per step: load, flows, PLRs, powers, return temperature, reward."""
        rows = []
        for r in self.records:
            t = r.telemetry
            row = {
                "step": r.index,
                "timestamp": r.timestamp.strftime("%Y-%m-%dT%H:%M:%S") if r.timestamp is not None else "",
                "load_kw": t.building_load,
            }
            for i, (f, plr, p, cop) in enumerate(zip(t.flows, t.plr, t.power, t.cop), start=1):
                row[f"flow_{i}"] = f
                row[f"plr_{i}"] = plr
                row[f"power_{i}"] = p
                row[f"cop_{i}"] = cop
            row.update({
                "total_power_kw": t.total_power,
                "t_return_c": t.t_return,
                "unmet_kw": t.unmet_load,
                "n_on": sum(t.on_status),
                "reward": r.reward,
                "active_component": r.active_component,
                "energy_kwh": t.total_power * self.dt_hours,
            })
            rows.append(row)
        return pd.DataFrame(rows)


def episode_energy(log: EpisodeLog) -> float:
    """kWh drawn over a completed episode."""
    return float(sum(r.telemetry.total_power for r in log.records) * log.dt_hours)


def write_episode_log(path: Union[str, Path], log: EpisodeLog) -> None:
    log.frame().to_csv(path, index=False, float_format="%.6f")


@dataclass(frozen=True)
class ControlContext:
    """What a controller sees when asked for the action at trace position ``index``."""
    index: int
    load: LoadSeries
    exog: Optional[ExogSeries]
    telemetry: PlantTelemetry
    prev_on: Tuple[bool, ...]

    @property
    def timestamp(self) -> pd.Timestamp:
        return self.load.timestamps[self.index]

    @property
    def recent_load(self) -> float:
        """Load observed at the previous step."""
        return float(self.load.load[self.index - 1]) if self.index > 0 else 0.0


class ChillerEnv:
    """
    Single-threaded environment over one load trace.

    Actions are raw vectors in [-1, 1] per chiller (``step``) or already decoded
    dispatches (``step_action``) for controllers that work in flow space.
    """

    def __init__(
        self,
        plant: PlantConfig,
        reward: RewardSpec,
        episode: EpisodeConfig,
        load: LoadSeries,
        exog: Optional[ExogSeries] = None,
        forecaster: Optional[Forecaster] = None,
    ):
        if reward.power_scale is None:
            raise ConfigError("reward power_scale is unset; calibrate it before building an environment")
        if episode.episode_length > len(load):
            raise ConfigError(
                f"episode length {episode.episode_length} exceeds trace length {len(load)}"
            )
        if len(load) - episode.episode_length < episode.history:
            raise ConfigError(
                f"trace of {len(load)} steps cannot hold {episode.history} steps of history "
                f"plus a {episode.episode_length}-step episode"
            )
        self.plant = plant
        self.reward_spec = reward
        self.episode = episode
        self.load = load
        self.exog = exog
        self.perfect = PerfectForesightForecaster(load)
        self.forecaster = None if episode.perfect_foresight or forecaster is None else forecaster
        self.scales = ObservationScales.from_plant(plant)
        self.rng = np.random.default_rng(episode.seed)
        self.obs_dim = observation_dim(plant.n_chillers, episode.forecast_window)
        self.act_dim = plant.n_chillers
        self._index = 0
        self._end = 0
        self._done = True
        self._telemetry = idle_telemetry(plant)
        self.log = EpisodeLog(plant.dt_hours)

    @property
    def index(self) -> int:
        return self._index

    @property
    def done(self) -> bool:
        return self._done

    def _start_range(self) -> Tuple[int, int]:
        return self.episode.history, len(self.load) - self.episode.episode_length

    def reset(self, seed: Optional[int] = None, start: Optional[int] = None) -> Observation:
        """Position at an episode start with every chiller OFF."""
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        lo, hi = self._start_range()
        if start is None:
            start = int(self.rng.integers(lo, hi + 1)) if self.episode.random_start else lo
        elif not lo <= start <= hi:
            raise ConfigError(f"episode start {start} outside [{lo}, {hi}]")
        self._index = start
        self._end = start + self.episode.episode_length
        self._done = False
        self._telemetry = idle_telemetry(self.plant)
        self.log = EpisodeLog(self.plant.dt_hours)
        return self._observe()

    def forecast_window(self) -> np.ndarray:
        k = self.episode.forecast_window
        if self.forecaster is None:
            return self.perfect.window(self._index, k)
        req = make_request(self.load, self.exog, self._index, max(self.forecaster.history, 1), k)
        return self.forecaster.predict(req).predicted

    def _observe(self) -> Observation:
        return assemble_observation(
            self.plant, self.forecast_window(), self._telemetry, self._telemetry.on_status, self.scales
        )

    def context(self) -> ControlContext:
        if self._done:
            raise ContractError("episode is done; call reset() first")
        return ControlContext(self._index, self.load, self.exog, self._telemetry, self._telemetry.on_status)

    def step(self, raw_action: Sequence[float]) -> StepResult:
        if self._done:
            raise ContractError("step() called after the episode finished; call reset() first")
        return self.step_action(raw_to_action(self.plant, raw_action))

    def step_action(self, action: ChillerAction) -> StepResult:
        if self._done:
            raise ContractError("step() called after the episode finished; call reset() first")
        load = float(self.load.load[self._index])
        prev_on = self._telemetry.on_status
        telemetry = steady_state_dispatch(self.plant, action, load)
        report = check_constraints(self.plant, telemetry, action, self.reward_spec.tolerances)
        reward, active = priority_reward(report, telemetry, prev_on, self.reward_spec)
        if not math.isfinite(reward):
            raise InputError(f"non-finite reward at step {self._index}")
        energy = telemetry.total_power * self.plant.dt_hours
        self.log.append(StepRecord(
            self._index, self.load.timestamps[self._index], telemetry, report, reward, active
        ))
        self._telemetry = telemetry
        self._index += 1
        self._done = self._index >= self._end
        observation = self._observe()
        return StepResult(
            observation=observation,
            reward=reward,
            telemetry=telemetry,
            constraint_report=report,
            done=self._done,
            info={"active_component": active, "energy_kwh": energy},
        )
