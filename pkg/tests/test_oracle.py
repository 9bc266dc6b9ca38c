import itertools

import numpy as np
import pytest

from chiller_horizon.core.config import OracleConfig, RuleBasedConfig, subset_plant
from chiller_horizon.core.controllers import rule_based_step
from chiller_horizon.core.env import raw_to_action
from chiller_horizon.core.errors import InputError
from chiller_horizon.core.oracle import (
    lower_bound_trajectory,
    optimal_dispatch,
    simplex_grid,
    trajectory_energy,
)
from chiller_horizon.core.plant import check_constraints, decode_flows, steady_state_dispatch

COARSE = OracleConfig(split_grid=11, flow_grid=21)


def test_simplex_grid_rows_sum_to_one():
    grid = simplex_grid(3, 11)
    assert np.allclose(grid.sum(axis=1), 1.0)
    assert np.all(grid > 0)
    assert len(grid) == 36
    assert simplex_grid(1, 11).tolist() == [[1.0]]


def test_zero_load_is_all_off(plant):
    solution = optimal_dispatch(plant, COARSE, 0.0)
    assert solution.feasible
    assert solution.total_power == 0.0
    assert solution.action.n_on == 0


def test_single_small_chiller_min_flow(plant):
    small = subset_plant(plant, [4])
    solution = optimal_dispatch(small, OracleConfig(), 355.0)
    assert solution.feasible
    assert solution.telemetry.plr[0] == pytest.approx(0.5)
    assert solution.total_power == pytest.approx(24.3344, abs=1e-6)
    assert solution.total_flow == pytest.approx(14.5)


def test_feasible_solution_satisfies_enforced_constraints(plant):
    solution = optimal_dispatch(plant, COARSE, 2600.0)
    assert solution.feasible
    report = check_constraints(plant, solution.telemetry, solution.action)
    for cid in COARSE.enforced:
        assert report[cid].satisfied


def test_enforcing_cop_cap_drops_the_small_chiller(plant):
    strict = COARSE.model_copy(update={"enforced": COARSE.enforced + ("cop_cap",)})
    relaxed = optimal_dispatch(plant, COARSE, 600.0)
    capped = optimal_dispatch(plant, strict, 600.0)
    assert relaxed.action.on_status[3]
    assert capped.feasible
    assert not capped.action.on_status[3]
    assert capped.report["cop_cap"].satisfied
    assert capped.total_power >= relaxed.total_power


def test_no_feasible_dispatch_reports_best_violation(plant):
    solution = optimal_dispatch(plant, COARSE, 50_000.0)
    assert not solution.feasible
    assert not solution.report["energy_balance"].satisfied or not solution.report["t_return_range"].satisfied


def test_oracle_beats_every_candidate_on_a_ten_times_finer_grid(plant):
    load = 500.0
    cfg = OracleConfig()
    solution = optimal_dispatch(plant, cfg, load)
    assert solution.feasible
    # Three or more ON chillers cannot all sit on the PLR floor at this load.
    assert plant.plr_min * sum(sorted(c.rated_capacity for c in plant.chillers)[:3]) > load
    fine_splits = 10 * (cfg.split_grid - 1) + 1
    fine_flows = 10 * (cfg.flow_grid - 1) + 1
    checked = 0
    for k in (1, 2):
        for subset in itertools.combinations(range(plant.n_chillers), k):
            fmin = np.array([plant.chillers[i].flow_min for i in subset])
            fmax = np.array([plant.chillers[i].flow_max for i in subset])
            totals = np.linspace(fmin.sum(), fmax.sum(), fine_flows)
            t_return = load / (totals * plant.c_w) + plant.t_supply
            in_band = (t_return >= plant.t_return_min) & (t_return <= plant.t_return_max)
            for w in simplex_grid(k, fine_splits):
                per_chiller = np.outer(totals, w)
                usable = in_band & np.all((per_chiller >= fmin) & (per_chiller <= fmax), axis=1)
                if not usable.any():
                    continue
                # Power depends on the split only, so the smallest usable total stands for all.
                flows = np.zeros(plant.n_chillers)
                flows[list(subset)] = totals[usable][0] * w
                action = decode_flows(plant, flows)
                tel = steady_state_dispatch(plant, action, load)
                report = check_constraints(plant, tel, action)
                if all(report[cid].satisfied for cid in cfg.enforced):
                    checked += 1
                    assert solution.total_power <= tel.total_power + 1e-6, (subset, w)
    assert checked > 40


def test_oracle_beats_random_feasible_actions(plant):
    rng = np.random.default_rng(4)
    cfg = OracleConfig()
    loads = 0
    compared = 0
    while loads < 200:
        load = float(rng.uniform(50.0, 5500.0))
        best = optimal_dispatch(plant, cfg, load)
        if not best.feasible:
            continue
        loads += 1
        for raw in rng.uniform(-1.0, 1.0, size=(1000, plant.n_chillers)):
            action = raw_to_action(plant, raw)
            tel = steady_state_dispatch(plant, action, load)
            report = check_constraints(plant, tel, action)
            if all(report[cid].satisfied for cid in cfg.enforced):
                compared += 1
                assert best.total_power <= tel.total_power + 1e-6, (load, action.flows)
    assert compared > 10_000


def test_refinement_leaves_the_split_lattice(plant):
    grid_only = optimal_dispatch(plant, OracleConfig(refine_starts=0), 1653.69)
    refined = optimal_dispatch(plant, OracleConfig(), 1653.69)
    assert refined.total_power <= grid_only.total_power
    assert refined.total_power <= 165.3736
    assert refined.feasible


def test_doubled_lattice_contains_the_coarse_one():
    cfg = OracleConfig(split_grid=11)
    assert cfg.doubled().split_grid == 21
    coarse = {tuple(row) for row in np.round(simplex_grid(3, cfg.split_grid), 12)}
    fine = {tuple(row) for row in np.round(simplex_grid(3, cfg.doubled().split_grid), 12)}
    assert coarse <= fine


@pytest.mark.parametrize("load", [800.0, 1900.0, 3300.0])
def test_doubling_the_grid_never_increases_power(plant, load):
    grid_only = OracleConfig(split_grid=11, flow_grid=11, refine_starts=0)
    coarse = optimal_dispatch(plant, grid_only, load)
    fine = optimal_dispatch(plant, grid_only.doubled(), load)
    refined = optimal_dispatch(plant, grid_only.model_copy(update={"refine_starts": 2}), load)
    assert coarse.feasible and fine.feasible and refined.feasible
    assert fine.total_power <= coarse.total_power + 1e-9
    assert refined.total_power <= coarse.total_power + 1e-9


def test_identical_chillers_are_interchangeable(plant):
    a = optimal_dispatch(subset_plant(plant, [1, 2, 3, 4]), COARSE, 1500.0)
    b = optimal_dispatch(subset_plant(plant, [2, 1, 3, 4]), COARSE, 1500.0)
    assert a.total_power == pytest.approx(b.total_power, rel=1e-9)


def test_parallel_workers_match_serial(plant):
    serial = optimal_dispatch(plant, COARSE, 2100.0)
    parallel = optimal_dispatch(plant, COARSE.model_copy(update={"workers": 4}), 2100.0)
    assert parallel.action == serial.action
    assert parallel.total_power == serial.total_power


def test_oracle_rejects_negative_load(plant):
    with pytest.raises(InputError):
        optimal_dispatch(plant, COARSE, -1.0)


def test_trajectory_zero_and_constant(plant):
    zeros = lower_bound_trajectory(plant, COARSE, [0.0] * 5)
    assert trajectory_energy(zeros, plant.dt_hours) == 0.0
    constant = lower_bound_trajectory(plant, COARSE, [1200.0] * 4)
    assert len({s.action for s in constant}) == 1
    assert trajectory_energy(constant, 0.5) == pytest.approx(2.0 * constant[0].total_power)


def test_oracle_never_draws_more_than_feasible_rule_based_steps(plant, campus_week):
    rule_cfg = RuleBasedConfig()
    day = campus_week[0].load[:48]
    # Scaled so the baseline stays on its first stage.
    loads = day * (600.0 / day.max())
    solutions = lower_bound_trajectory(plant, COARSE, loads)
    staged = 0
    checked = 0
    for t, load in enumerate(loads):
        observed = loads[t - 1] if t else 0.0
        action, staged = rule_based_step(plant, rule_cfg, observed, staged)
        tel = steady_state_dispatch(plant, action, load)
        report = check_constraints(plant, tel, action)
        if action.n_on == 1 and all(report[cid].satisfied for cid in COARSE.enforced):
            checked += 1
            assert solutions[t].total_power <= tel.total_power + 1e-9
    assert checked > 0
