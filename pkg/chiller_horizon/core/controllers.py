"""
Control policies compared by the benchmark: a reactive staging baseline, one-step
RL, receding-horizon RL and the per-step dispatch oracle.

The two RL controllers evaluate the policy through the same ``policy_action`` call;
they differ only in the forecast window they place in the observation.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np

from chiller_horizon.core.config import OracleConfig, PlantConfig, RhConfig, RuleBasedConfig
from chiller_horizon.core.env import (
    ChillerEnv,
    ControlContext,
    EpisodeLog,
    Observation,
    assemble_observation,
    observation_dim,
    raw_to_action,
)
from chiller_horizon.core.errors import ContractError
from chiller_horizon.core.forecast import Forecaster, make_request
from chiller_horizon.core.oracle import optimal_dispatch
from chiller_horizon.core.plant import ChillerAction, decode_flows
from chiller_horizon.core.ppo import ActorCritic, policy_forward

logger = logging.getLogger(__name__)


class Controller(Protocol):
    name: str
    fallback_steps: List[int]

    def reset(self) -> None:
        ...

    def act(self, ctx: ControlContext) -> ChillerAction:
        ...


def staging_indices(plant: PlantConfig, cfg: RuleBasedConfig) -> List[int]:
    """Plant indices in staging order; chillers missing from the order are staged last."""
    ids = [c.id for c in plant.chillers]
    order = [plant.index_of(cid) for cid in cfg.staging_order if cid in ids]
    order += [i for i in range(plant.n_chillers) if i not in order]
    return order


def rule_based_step(
    plant: PlantConfig,
    cfg: RuleBasedConfig,
    recent_load: float,
    staged: int,
    hour: Optional[float] = None,
) -> Tuple[ChillerAction, int]:
    """
    Stage chillers against ``recent_load`` and set ON flows to track it.

    Returns the action and the new number of staged chillers.
    """
    order = staging_indices(plant, cfg)
    rated = [plant.chillers[i].rated_capacity for i in order]
    capacity = np.concatenate([[0.0], np.cumsum(rated)])
    n_max = len(order)
    load = max(float(recent_load), 0.0)

    n = staged
    if load <= cfg.idle_load_kw:
        n = 0
    else:
        n = max(n, 1)
        while n < n_max and load > cfg.stage_up * capacity[n]:
            n += 1
        while n > 1 and load < cfg.stage_down * capacity[n - 1]:
            n -= 1
    if n == 0 and cfg.hold_first_stage_in_working_hours and hour is not None:
        start, end = cfg.working_hours
        if start <= hour < end:
            n = 1

    flows = [0.0] * plant.n_chillers
    if n > 0:
        on = order[:n]
        fmin = np.array([plant.chillers[i].flow_min for i in on])
        fmax = np.array([plant.chillers[i].flow_max for i in on])
        target = load / (plant.c_w * (cfg.t_return_target - plant.t_supply))
        theta = float(np.clip((target - fmin.sum()) / (fmax.sum() - fmin.sum()), 0.0, 1.0))
        for i, lo, hi in zip(on, fmin, fmax):
            flows[i] = float(lo + theta * (hi - lo))
    return decode_flows(plant, flows), n


class RuleBasedController:
    """Reactive staging baseline acting on the load observed ``reaction_lag`` steps ago."""
    name = "rule_based"

    def __init__(self, plant: PlantConfig, cfg: Optional[RuleBasedConfig] = None):
        self.plant = plant
        self.cfg = cfg or RuleBasedConfig()
        self.staged = 0
        self.fallback_steps: List[int] = []

    def reset(self) -> None:
        self.staged = 0

    def act(self, ctx: ControlContext) -> ChillerAction:
        lag = self.cfg.reaction_lag
        observed = float(ctx.load.load[ctx.index - lag]) if ctx.index >= lag else 0.0
        ts = ctx.timestamp
        hour = ts.hour + ts.minute / 60.0
        action, self.staged = rule_based_step(self.plant, self.cfg, observed, self.staged, hour)
        return action


class OracleController:
    """Per-step minimum-power dispatch with knowledge of the current load."""
    name = "oracle"

    def __init__(self, plant: PlantConfig, cfg: Optional[OracleConfig] = None):
        self.plant = plant
        self.cfg = cfg or OracleConfig()
        self.fallback_steps: List[int] = []
        self._cache: Dict[float, ChillerAction] = {}

    def reset(self) -> None:
        pass

    def act(self, ctx: ControlContext) -> ChillerAction:
        load = float(ctx.load.load[ctx.index])
        if load not in self._cache:
            self._cache[load] = optimal_dispatch(self.plant, self.cfg, load).action
        return self._cache[load]


def policy_forecast_window(plant: PlantConfig, policy: ActorCritic) -> int:
    k = policy.obs_dim - observation_dim(plant.n_chillers, 0)
    if k < 1:
        raise ContractError(f"policy input of {policy.obs_dim} cannot hold a {plant.n_chillers}-chiller observation")
    return k


def policy_action(plant: PlantConfig, policy: ActorCritic, observation: Observation) -> ChillerAction:
    """Deterministic (mean) policy action decoded into flows."""
    if observation.dim != policy.obs_dim:
        raise ContractError(f"observation has {observation.dim} entries, policy expects {policy.obs_dim}")
    out = policy_forward(policy, observation, deterministic=True)
    return raw_to_action(plant, out.action)


def one_step_rl(plant: PlantConfig, policy: ActorCritic, observation: Observation) -> ChillerAction:
    if len(observation.forecast_window) != 1:
        raise ContractError("one-step control expects a forecast window of length 1")
    return policy_action(plant, policy, observation)


class OneStepRlController:
    """Policy fed only the most recently observed load."""
    name = "one_step_rl"

    def __init__(self, plant: PlantConfig, policy: ActorCritic):
        if policy_forecast_window(plant, policy) != 1:
            raise ContractError("one-step controller needs a policy trained on a 1-step forecast window")
        self.plant = plant
        self.policy = policy
        self.fallback_steps: List[int] = []

    def reset(self) -> None:
        pass

    def observation(self, ctx: ControlContext) -> Observation:
        return assemble_observation(self.plant, [ctx.recent_load], ctx.telemetry, ctx.prev_on)

    def act(self, ctx: ControlContext) -> ChillerAction:
        return one_step_rl(self.plant, self.policy, self.observation(ctx))


class RecedingHorizonController:
    """
    Forecast the next ``horizon`` steps, act on the first, and replan every
    ``replan_interval`` steps; between replans the plan window slides forward.

    Until the forecaster has its history the rule-based baseline acts instead and the
    step index is recorded in ``fallback_steps``.
    """
    name = "receding_horizon"

    def __init__(
        self,
        plant: PlantConfig,
        policy: ActorCritic,
        forecaster: Forecaster,
        cfg: Optional[RhConfig] = None,
        fallback: Optional[RuleBasedController] = None,
    ):
        self.plant = plant
        self.policy = policy
        self.forecaster = forecaster
        self.cfg = cfg or RhConfig()
        self.window = policy_forecast_window(plant, policy)
        self.fallback = fallback or RuleBasedController(plant)
        self.fallback_steps: List[int] = []
        self.plans_issued = 0
        self._plan: Optional[np.ndarray] = None
        self._offset = 0

    def reset(self) -> None:
        self.fallback.reset()
        self.fallback_steps = []
        self.plans_issued = 0
        self._plan = None
        self._offset = 0

    def _replan(self, ctx: ControlContext) -> None:
        history = max(self.forecaster.history, 1)
        req = make_request(ctx.load, ctx.exog, ctx.index, history, self.cfg.horizon)
        self._plan = self.forecaster.predict(req).predicted
        self._offset = 0
        self.plans_issued += 1

    def plan_window(self) -> np.ndarray:
        assert self._plan is not None
        rows = np.minimum(np.arange(self._offset, self._offset + self.window), len(self._plan) - 1)
        return self._plan[rows]

    def observation(self, ctx: ControlContext) -> Observation:
        if self._plan is None or self._offset >= self.cfg.replan_interval:
            self._replan(ctx)
        obs = assemble_observation(self.plant, self.plan_window(), ctx.telemetry, ctx.prev_on)
        self._offset += 1
        return obs

    def act(self, ctx: ControlContext) -> ChillerAction:
        if ctx.index < self.forecaster.history:
            if not self.fallback_steps:
                logger.warning("forecaster needs %d steps of history; rule-based fallback at step %d",
                               self.forecaster.history, ctx.index)
            self.fallback_steps.append(ctx.index)
            self._plan = None
            return self.fallback.act(ctx)
        return policy_action(self.plant, self.policy, self.observation(ctx))


@dataclass
class EvalResult:
    name: str
    log: EpisodeLog
    fallback_steps: List[int] = field(default_factory=list)


def evaluate(controller: Controller, env: ChillerEnv, start: Optional[int] = None) -> EvalResult:
    """Run one controller closed-loop over a whole environment episode."""
    controller.reset()
    env.reset(start=start)
    while not env.done:
        env.step_action(controller.act(env.context()))
    logger.info("%s: %d steps, %.1f kWh", controller.name, len(env.log),
                sum(r.telemetry.total_power for r in env.log.records) * env.log.dt_hours)
    return EvalResult(controller.name, env.log, list(controller.fallback_steps))

