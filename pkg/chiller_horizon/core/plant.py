"""
Steady-state physics and constraint evaluation for a heterogeneous chiller bank.

Every function here is pure: the same inputs always give the same telemetry, and
nothing is cached or mutated, so calls are safe from any number of threads.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from chiller_horizon.core.config import (
    CONSTRAINT_IDS,
    ChillerSpec,
    ConstraintTolerances,
    PlantConfig,
)
from chiller_horizon.core.errors import CurveFitError, InputError, NoFlowError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChillerAction:
    """Decoded chilled-water flows (kg/s) and the ON/OFF pattern they imply."""
    flows: Tuple[float, ...]
    on_status: Tuple[bool, ...]

    @property
    def total_on_flow(self) -> float:
        return float(sum(f for f, on in zip(self.flows, self.on_status) if on))

    @property
    def n_on(self) -> int:
        return int(sum(self.on_status))

    @classmethod
    def all_off(cls, n: int) -> "ChillerAction":
        return cls(flows=(0.0,) * n, on_status=(False,) * n)


@dataclass(frozen=True)
class PlantTelemetry:
    building_load: float
    t_return: float
    flows: Tuple[float, ...]
    on_status: Tuple[bool, ...]
    cooling: Tuple[float, ...]
    plr: Tuple[float, ...]
    power: Tuple[float, ...]
    cop: Tuple[float, ...]
    total_power: float
    unmet_load: float
    capped: Tuple[bool, ...] = ()

    @property
    def total_cooling(self) -> float:
        return float(sum(self.cooling))


@dataclass(frozen=True)
class ConstraintEntry:
    id: str
    satisfied: bool
    violation_magnitude: float
    per_chiller: Tuple[float, ...] = ()


@dataclass(frozen=True)
class ConstraintReport:
    entries: Dict[str, ConstraintEntry] = field(default_factory=dict)

    def __getitem__(self, constraint_id: str) -> ConstraintEntry:
        return self.entries[constraint_id]

    @property
    def all_satisfied(self) -> bool:
        return all(e.satisfied for e in self.entries.values())

    def violated(self) -> List[str]:
        return [cid for cid in CONSTRAINT_IDS if cid in self.entries and not self.entries[cid].satisfied]


def power_from_plr(spec: ChillerSpec, plr: float) -> float:
    """Electrical power (kW) drawn by ``spec`` at part-load ratio ``plr``."""
    if not plr >= 0:
        raise InputError(f"part-load ratio must be non-negative, got {plr}")
    a, b, g, p = spec.power_coeffs
    return a + b * plr + g * plr ** 2 + p * plr ** 3


def power_curve(spec: ChillerSpec, plr: np.ndarray) -> np.ndarray:
    """Vectorized ``power_from_plr`` for grids of PLR values."""
    a, b, g, p = spec.power_coeffs
    plr = np.asarray(plr, dtype=float)
    return a + plr * (b + plr * (g + plr * p))


def part_load_ratio(cooling: float, rated: float) -> float:
    if not rated > 0:
        raise InputError(f"rated capacity must be positive, got {rated}")
    if not cooling >= 0:
        raise InputError(f"cooling must be non-negative, got {cooling}")
    return cooling / rated


def return_temperature(building_load: float, total_on_flow: float, config: PlantConfig) -> float:
    if total_on_flow <= 0:
        if building_load > 0:
            raise NoFlowError(f"no chilled-water flow under a {building_load:.3f} kW load")
        return config.t_supply
    return building_load / (total_on_flow * config.c_w) + config.t_supply


def decode_flows(config: PlantConfig, flows: Sequence[float]) -> ChillerAction:
    """
    Apply the OFF-threshold rule to requested flows.

    A flow below ``off_fraction * flow_min`` switches the chiller OFF; a flow between
    that threshold and ``flow_min`` is raised to ``flow_min``; flows above
    ``flow_max`` are clamped to it.
    """
    if len(flows) != config.n_chillers:
        raise InputError(f"expected {config.n_chillers} flows, got {len(flows)}")
    decoded: List[float] = []
    on: List[bool] = []
    for spec, flow in zip(config.chillers, flows):
        flow = float(flow)
        if not math.isfinite(flow) or flow < 0:
            raise InputError(f"flows must be finite and non-negative, got {flow}")
        if flow < config.off_fraction * spec.flow_min:
            decoded.append(0.0)
            on.append(False)
        else:
            decoded.append(min(max(flow, spec.flow_min), spec.flow_max))
            on.append(True)
    return ChillerAction(flows=tuple(decoded), on_status=tuple(on))


def _check_load(building_load: float) -> float:
    load = float(building_load)
    if math.isnan(load) or load < 0 or math.isinf(load):
        raise InputError(f"building load must be finite and non-negative, got {building_load}")
    return load


def steady_state_dispatch(config: PlantConfig, action: ChillerAction, building_load: float) -> PlantTelemetry:
    """
    Resolve one step of plant physics for a decoded action.

    The return temperature follows from the load and the total ON flow; each ON
    chiller then carries the load in proportion to its flow. Chillers pushed past
    ``plr_max`` are capped at ``plr_max * rated`` and the shortfall is reported as
    ``unmet_load``.
    """
    load = _check_load(building_load)
    n = config.n_chillers
    if len(action.flows) != n or len(action.on_status) != n:
        raise InputError(f"action must cover {n} chillers")

    total_flow = action.total_on_flow
    if total_flow <= 0:
        t_return = config.t_return_max if load > 0 else config.t_supply
        zeros = (0.0,) * n
        return PlantTelemetry(
            building_load=load,
            t_return=t_return,
            flows=(0.0,) * n,
            on_status=(False,) * n,
            cooling=zeros,
            plr=zeros,
            power=zeros,
            cop=zeros,
            total_power=0.0,
            unmet_load=load,
            capped=(False,) * n,
        )

    t_return = return_temperature(load, total_flow, config)
    cooling: List[float] = []
    capped: List[bool] = []
    for spec, flow, on in zip(config.chillers, action.flows, action.on_status):
        if not on:
            cooling.append(0.0)
            capped.append(False)
            continue
        share = load * (flow / total_flow)
        cap = config.plr_max * spec.rated_capacity
        capped.append(share > cap)
        cooling.append(min(share, cap))

    plr: List[float] = []
    power: List[float] = []
    cop: List[float] = []
    for spec, q, on in zip(config.chillers, cooling, action.on_status):
        if not on:
            plr.append(0.0)
            power.append(0.0)
            cop.append(0.0)
            continue
        ratio = part_load_ratio(q, spec.rated_capacity)
        p = power_from_plr(spec, ratio)
        plr.append(ratio)
        power.append(p)
        cop.append(q / p if p > 0 else 0.0)

    total_power = float(sum(power))
    telemetry = PlantTelemetry(
        building_load=load,
        t_return=t_return,
        flows=tuple(float(f) if on else 0.0 for f, on in zip(action.flows, action.on_status)),
        on_status=tuple(action.on_status),
        cooling=tuple(cooling),
        plr=tuple(plr),
        power=tuple(power),
        cop=tuple(cop),
        total_power=total_power,
        unmet_load=load - sum(cooling),
        capped=tuple(capped),
    )
    logger.debug("dispatch load=%.1f t_return=%.3f power=%.2f", load, t_return, total_power)
    return telemetry


def _range_excess(value: float, low: float, high: float) -> float:
    return max(0.0, low - value, value - high)


def check_constraints(
    config: PlantConfig,
    telemetry: PlantTelemetry,
    action: Optional[ChillerAction] = None,
    tolerances: Optional[ConstraintTolerances] = None,
) -> ConstraintReport:
    """Evaluate energy balance, return-temperature, PLR, min-flow and COP constraints."""
    tol = tolerances or ConstraintTolerances()
    on = action.on_status if action is not None else telemetry.on_status
    flows = action.flows if action is not None else telemetry.flows

    def entry(cid: str, magnitude: float, limit: float, per_chiller: Iterable[float] = ()) -> ConstraintEntry:
        return ConstraintEntry(cid, magnitude <= limit, magnitude, tuple(per_chiller))

    energy = abs(telemetry.unmet_load)
    if any(on):
        t_excess = _range_excess(telemetry.t_return, config.t_return_min, config.t_return_max)
    else:
        t_excess = 0.0

    plr_excess = []
    flow_excess = []
    cop_excess = []
    for spec, is_on, plr, flow, cop in zip(config.chillers, on, telemetry.plr, flows, telemetry.cop):
        if not is_on:
            plr_excess.append(0.0)
            flow_excess.append(0.0)
            cop_excess.append(0.0)
            continue
        plr_excess.append(_range_excess(plr, config.plr_min, config.plr_max))
        flow_excess.append(max(0.0, spec.flow_min - flow))
        cop_excess.append(max(0.0, cop - spec.cop_max))

    entries = {
        "energy_balance": entry("energy_balance", energy, tol.energy_kw),
        "t_return_range": entry("t_return_range", t_excess, tol.temperature_c),
        "plr_range": entry("plr_range", max(plr_excess), tol.plr, plr_excess),
        "min_flow": entry("min_flow", max(flow_excess), tol.flow, flow_excess),
        "cop_cap": entry("cop_cap", max(cop_excess), tol.cop, cop_excess),
    }
    return ConstraintReport(entries)


@dataclass(frozen=True)
class CurveFit:
    coeffs: Tuple[float, float, float, float]
    r_squared: float
    n_samples: int


def fit_power_curve(samples: Sequence[Tuple[float, float]]) -> CurveFit:
    """Least-squares cubic fit of power (kW) against PLR, with its R²."""
    data = np.asarray(samples, dtype=float).reshape(-1, 2)
    plr, power = data[:, 0], data[:, 1]
    if len(np.unique(plr)) < 4:
        raise CurveFitError(
            f"cubic fit needs at least 4 distinct PLR values, got {len(np.unique(plr))}"
        )
    if len(data) < 8 or plr.min() > 0.3 or plr.max() < 0.9:
        logger.warning(
            "curve fit on %d samples spanning PLR [%.2f, %.2f]; at least 8 samples over [0.3, 0.9] recommended",
            len(data), plr.min(), plr.max(),
        )
    design = np.vander(plr, 4, increasing=True)
    coeffs, _, rank, _ = np.linalg.lstsq(design, power, rcond=None)
    if rank < 4:
        raise CurveFitError(f"rank-deficient design matrix (rank {rank})")
    fitted = design @ coeffs
    ss_res = float(np.sum((power - fitted) ** 2))
    ss_tot = float(np.sum((power - power.mean()) ** 2))
    if ss_tot == 0:
        r_squared = 1.0 if ss_res == 0 else float("-inf")
    else:
        r_squared = 1.0 - ss_res / ss_tot
    return CurveFit(coeffs=tuple(float(c) for c in coeffs), r_squared=r_squared, n_samples=len(data))


def synthesize_curve_samples(
    spec: ChillerSpec,
    n: int = 20,
    sigma: float = 0.0,
    seed: int = 0,
    plr_range: Tuple[float, float] = (0.2, 1.0),
) -> List[Tuple[float, float]]:
    """(PLR, kW) samples drawn from a chiller's curve, optionally with Gaussian noise."""
    rng = np.random.default_rng(seed)
    plr = np.linspace(plr_range[0], plr_range[1], n)
    power = power_curve(spec, plr)
    if sigma > 0:
        power = power + rng.normal(0.0, sigma, size=n)
    return [(float(x), float(y)) for x, y in zip(plr, power)]
