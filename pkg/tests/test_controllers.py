import numpy as np
import pandas as pd
import pytest

from chiller_horizon.core.config import (
    EpisodeConfig,
    OracleConfig,
    PpoConfig,
    RewardSpec,
    RhConfig,
    RuleBasedConfig,
    canonical_plant,
    subset_plant,
)
from chiller_horizon.core.controllers import (
    OneStepRlController,
    OracleController,
    RecedingHorizonController,
    RuleBasedController,
    evaluate,
    one_step_rl,
    policy_action,
    policy_forecast_window,
    rule_based_step,
    staging_indices,
)
from chiller_horizon.core.env import ChillerEnv, assemble_observation, idle_telemetry, observation_dim
from chiller_horizon.core.errors import ContractError
from chiller_horizon.core.forecast import LoadSeries, PersistenceForecaster, make_forecaster
from chiller_horizon.core.oracle import optimal_dispatch
from chiller_horizon.core.ppo import ActorCritic, train

REWARD = RewardSpec(power_scale=500.0)


def _series(values):
    values = np.asarray(values, dtype=float)
    return LoadSeries(pd.date_range("2024-01-01", periods=len(values), freq="30min"), values)


def _env(plant, load, length, history=0):
    episode = EpisodeConfig(
        episode_length=length, forecast_window=1, history=history, random_start=False, perfect_foresight=True
    )
    return ChillerEnv(plant, REWARD, episode, load)


def _policy(plant, window=1, seed=0):
    cfg = PpoConfig(hidden_sizes=(8,), seed=seed)
    return ActorCritic(observation_dim(plant.n_chillers, window), plant.n_chillers, cfg)


def test_rule_based_stages_smallest_chiller_first(plant):
    action, staged = rule_based_step(plant, RuleBasedConfig(), 300.0, 0)
    assert staged == 1
    assert action.on_status == (False, False, False, True)
    assert action.flows[3] == pytest.approx(plant.chillers[3].flow_min)


def test_rule_based_adds_second_stage(plant):
    action, staged = rule_based_step(plant, RuleBasedConfig(), 2000.0, 0)
    assert staged == 2
    assert action.on_status == (True, False, False, True)


def test_rule_based_idles_without_load(plant):
    action, staged = rule_based_step(plant, RuleBasedConfig(), 0.5, 3)
    assert staged == 0
    assert action.n_on == 0
    held = RuleBasedConfig(hold_first_stage_in_working_hours=True)
    action, staged = rule_based_step(plant, held, 0.0, 0, hour=10.5)
    assert staged == 1
    assert action.on_status[3]


def test_rule_based_staging_is_monotone_and_hysteretic(plant):
    cfg = RuleBasedConfig()
    staged, counts = 0, []
    for load in np.linspace(0.0, 5800.0, 60):
        _, staged = rule_based_step(plant, cfg, float(load), staged)
        counts.append(staged)
    assert counts == sorted(counts)
    assert counts[-1] == 4
    # Between the down and up thresholds the current stage holds.
    assert rule_based_step(plant, cfg, 400.0, 2)[1] == 2
    assert rule_based_step(plant, cfg, 400.0, 0)[1] == 1


def test_staging_order_skips_missing_chillers(plant):
    assert staging_indices(plant, RuleBasedConfig()) == [3, 0, 1, 2]
    assert staging_indices(subset_plant(plant, [2, 1]), RuleBasedConfig()) == [1, 0]


def test_reactive_baseline_lags_a_step_change(plant):
    env = _env(plant, _series([300.0] * 5 + [2000.0] * 5), length=10)
    log = evaluate(RuleBasedController(plant), env, start=0).log
    assert [sum(r.telemetry.on_status) for r in log.records] == [0, 1, 1, 1, 1, 1, 2, 2, 2, 2]
    assert log.records[5].hard_violation
    assert not log.records[7].hard_violation


def test_oracle_controller_matches_per_step_dispatch(plant):
    cfg = OracleConfig(split_grid=11, flow_grid=11)
    controller = OracleController(plant, cfg)
    result = evaluate(controller, _env(plant, _series([1200.0] * 6), length=4), start=0)
    expected = optimal_dispatch(plant, cfg, 1200.0).total_power
    assert [r.telemetry.total_power for r in result.log.records] == pytest.approx([expected] * 4)
    assert len(controller._cache) == 1


def test_policy_window_checks(plant):
    assert policy_forecast_window(plant, _policy(plant, window=3)) == 3
    with pytest.raises(ContractError):
        OneStepRlController(plant, _policy(plant, window=3))
    tiny = ActorCritic(10, 4, PpoConfig(hidden_sizes=(4,)))
    with pytest.raises(ContractError):
        policy_forecast_window(plant, tiny)


def test_one_step_rl_requires_unit_window(plant):
    policy = _policy(plant)
    obs = assemble_observation(plant, [400.0, 500.0], idle_telemetry(plant), (False,) * 4)
    with pytest.raises(ContractError):
        one_step_rl(plant, policy, obs)
    with pytest.raises(ContractError):
        policy_action(plant, policy, obs)


def test_policy_action_is_deterministic_and_within_bounds(plant):
    policy = _policy(plant, seed=3)
    obs = assemble_observation(plant, [900.0], idle_telemetry(plant), (False,) * 4)
    a = policy_action(plant, policy, obs)
    assert a == policy_action(plant, policy, obs)
    for flow, spec in zip(a.flows, plant.chillers):
        assert flow == 0.0 or spec.flow_min <= flow <= spec.flow_max


def test_receding_horizon_with_persistence_equals_one_step(plant, campus_week):
    load, _ = campus_week
    policy = _policy(plant, seed=1)
    rh = RecedingHorizonController(plant, policy, PersistenceForecaster(), RhConfig(forecaster="persistence"))
    one = OneStepRlController(plant, policy)
    rh_log = evaluate(rh, _env(plant, load, length=48, history=1)).log
    one_log = evaluate(one, _env(plant, load, length=48, history=1)).log
    assert rh.fallback_steps == []
    assert [r.telemetry.flows for r in rh_log.records] == [r.telemetry.flows for r in one_log.records]


def test_replan_interval_controls_plan_count(plant, campus_week):
    load, _ = campus_week
    cfg = RhConfig(forecaster="persistence", horizon=48, replan_interval=4)
    rh = RecedingHorizonController(plant, _policy(plant), PersistenceForecaster(), cfg)
    evaluate(rh, _env(plant, load, length=12, history=1))
    assert rh.plans_issued == 3


def test_cold_start_falls_back_to_rule_based(plant, campus_week):
    load, _ = campus_week
    forecaster = make_forecaster("seasonal_naive")
    rh = RecedingHorizonController(plant, _policy(plant), forecaster, RhConfig(forecaster="seasonal_naive"))
    result = evaluate(rh, _env(plant, load, length=60), start=0)
    assert result.fallback_steps == list(range(48))
    assert rh.plans_issued == 12
    assert len(result.log) == 60


def test_controller_reset_clears_plan_state(plant, campus_week):
    load, _ = campus_week
    rh = RecedingHorizonController(plant, _policy(plant), PersistenceForecaster(), RhConfig(forecaster="persistence"))
    env = _env(plant, load, length=6, history=1)
    evaluate(rh, env)
    evaluate(rh, env)
    assert rh.plans_issued == 6


def _step_trace(blocks, seed):
    """Alternating three-step blocks of zero load and a random load level."""
    rng = np.random.default_rng(seed)
    values = []
    for level in rng.uniform(300.0, 700.0, blocks):
        values += [0.0] * 3 + [float(level)] * 3
    return _series(values)


def _step_ups(trace):
    return [t for t in range(1, len(trace)) if trace.load[t - 1] == 0.0 and trace.load[t] > 0.0]


@pytest.fixture(scope="module")
def step_trained():
    """A small policy trained with perfect foresight on step-change loads."""
    plant = subset_plant(canonical_plant(), [1, 4])
    trace = _step_trace(40, seed=0)
    episode = EpisodeConfig(episode_length=24, forecast_window=1, history=0, perfect_foresight=True, seed=0)
    cfg = PpoConfig(
        gamma=0.5, pi_lr=1e-2, vf_lr=1e-2, target_kl=0.05, steps_per_batch=480, minibatch_size=120,
        hidden_sizes=(16,), init_log_std=0.0, seed=0,
    )
    result = train(lambda: ChillerEnv(plant, REWARD, episode, trace), cfg, total_steps=60 * cfg.steps_per_batch)
    return plant, result.policy


def _perfect_rh(plant, policy, trace):
    return RecedingHorizonController(
        plant, policy, make_forecaster("perfect", trace=trace), RhConfig(forecaster="perfect")
    )


def test_trained_policy_switches_everything_off_without_load(step_trained):
    plant, policy = step_trained
    trace = _step_trace(20, seed=1)
    log = evaluate(_perfect_rh(plant, policy, trace), _env(plant, trace, length=len(trace)), start=0).log
    idle = [r for r in log.records if r.telemetry.building_load == 0.0]
    assert len(idle) == 60
    assert sum(not any(r.telemetry.on_status) for r in idle) >= 0.95 * len(idle)


def test_foresight_raises_flow_before_the_reactive_baseline(step_trained):
    plant, policy = step_trained
    trace = _step_trace(20, seed=1)
    changes = _step_ups(trace)
    assert len(changes) == 20

    rh_log = evaluate(_perfect_rh(plant, policy, trace), _env(plant, trace, length=len(trace)), start=0).log
    flow = [sum(r.telemetry.flows) for r in rh_log.records]
    assert sum(flow[t] > flow[t - 1] for t in changes) >= 0.9 * len(changes)

    base_log = evaluate(RuleBasedController(plant), _env(plant, trace, length=len(trace)), start=0).log
    base = [sum(r.telemetry.flows) for r in base_log.records]
    assert all(base[t] == base[t - 1] == 0.0 for t in changes)
    assert all(base[t + 1] > 0.0 for t in changes)
