from dataclasses import replace

import numpy as np
import pytest

from chiller_horizon.core.config import subset_plant
from chiller_horizon.core.errors import CurveFitError, InputError, NoFlowError
from chiller_horizon.core.plant import (
    check_constraints,
    decode_flows,
    fit_power_curve,
    part_load_ratio,
    power_from_plr,
    power_curve,
    return_temperature,
    steady_state_dispatch,
    synthesize_curve_samples,
)


def test_power_from_plr_table_rows(plant):
    c1, c4 = plant.chillers[0], plant.chillers[3]
    assert power_from_plr(c1, 0.0) == pytest.approx(33.3469)
    assert power_from_plr(c1, 1.0) == pytest.approx(199.4694, abs=1e-9)
    assert power_from_plr(c4, 0.5) == pytest.approx(24.3344, abs=1e-9)


def test_power_from_plr_rejects_negative(plant):
    with pytest.raises(InputError, match="non-negative"):
        power_from_plr(plant.chillers[0], -0.1)


def test_power_curves_increase_over_operating_range(plant):
    grid = np.arange(0.30, 1.0 + 1e-9, 1e-3)
    for spec in plant.chillers:
        _, b, g, p = spec.power_coeffs
        assert np.all(b + 2 * g * grid + 3 * p * grid ** 2 > 0), spec.id
        assert np.all(np.diff(power_curve(spec, grid)) > 0), spec.id


def test_part_load_ratio():
    assert part_load_ratio(850, 1700) == 0.5
    assert part_load_ratio(0, 1700) == 0.0
    assert part_load_ratio(710, 710) == 1.0
    with pytest.raises(InputError):
        part_load_ratio(100, 0)


def test_return_temperature(plant):
    assert return_temperature(1000, 50, plant) == pytest.approx(10.7778, abs=1e-4)
    assert return_temperature(0, 50, plant) == 6.0
    assert return_temperature(355, 14.5, plant) == pytest.approx(11.849, abs=1e-3)
    with pytest.raises(NoFlowError, match="no chilled-water flow"):
        return_temperature(100, 0, plant)


def test_return_temperature_decreases_with_flow(plant):
    temps = [return_temperature(800, f, plant) for f in np.linspace(10, 150, 50)]
    assert np.all(np.diff(temps) < 0)


def test_decode_flows_off_threshold(plant):
    action = decode_flows(plant, [5.0, 10.0, 60.0, 7.25])
    assert action.on_status == (False, True, True, True)
    assert action.flows == (0.0, 14.5, 50.8, 14.5)
    with pytest.raises(InputError):
        decode_flows(plant, [1.0, 2.0])
    with pytest.raises(InputError):
        decode_flows(plant, [-1.0, 0.0, 0.0, 0.0])


def test_dispatch_two_chillers(plant):
    action = decode_flows(plant, [30.0, 30.0, 0.0, 0.0])
    tel = steady_state_dispatch(plant, action, 1000.0)
    assert tel.t_return == pytest.approx(9.9815, abs=1e-4)
    assert tel.plr[0] == pytest.approx(0.2941, abs=1e-4)
    assert tel.plr[1] == pytest.approx(0.2941, abs=1e-4)
    assert tel.cooling[:2] == pytest.approx((500.0, 500.0))
    assert tel.unmet_load == pytest.approx(0.0, abs=1e-9)
    assert tel.power[0] == pytest.approx(59.09, abs=0.01)
    assert tel.total_power == sum(tel.power)


def test_dispatch_idle_and_unserved(plant):
    off = decode_flows(plant, [0.0] * 4)
    idle = steady_state_dispatch(plant, off, 0.0)
    assert idle.total_power == 0.0
    assert idle.unmet_load == 0.0
    assert idle.t_return == plant.t_supply

    unserved = steady_state_dispatch(plant, off, 1000.0)
    assert unserved.unmet_load == 1000.0
    assert unserved.t_return == plant.t_return_max


def test_dispatch_smallest_chiller(plant):
    action = decode_flows(plant, [0.0, 0.0, 0.0, 14.5])
    tel = steady_state_dispatch(plant, action, 355.0)
    assert tel.plr[3] == pytest.approx(0.5)
    assert tel.power[3] == pytest.approx(24.3344, abs=1e-6)
    assert tel.power[:3] == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("load", [float("nan"), -5.0, float("inf")])
def test_dispatch_rejects_bad_load(plant, load):
    with pytest.raises(InputError):
        steady_state_dispatch(plant, decode_flows(plant, [20.0, 0.0, 0.0, 0.0]), load)


def test_energy_balance_and_proportional_split(plant):
    rng = np.random.default_rng(7)
    for _ in range(200):
        on = rng.random(4) < 0.6
        if not on.any():
            continue
        flows = [rng.uniform(c.flow_min, c.flow_max) if o else 0.0 for c, o in zip(plant.chillers, on)]
        load = float(rng.uniform(1.0, 4000.0))
        action = decode_flows(plant, flows)
        tel = steady_state_dispatch(plant, action, load)
        assert not any(tel.capped)
        assert tel.total_cooling == pytest.approx(load, rel=1e-9)
        total = action.total_on_flow
        for q, f, is_on in zip(tel.cooling, action.flows, action.on_status):
            if is_on:
                assert q / load == pytest.approx(f / total, abs=1e-12)
            else:
                assert q == 0.0


def test_constraints_interior_point(plant):
    action = decode_flows(plant, [30.0, 30.0, 0.0, 0.0])
    tel = steady_state_dispatch(plant, action, 1000.0)
    report = check_constraints(plant, tel, action)
    assert report.all_satisfied
    assert report.violated() == []


def test_constraints_return_temperature_violation(plant):
    action = decode_flows(plant, [30.0, 30.0, 0.0, 0.0])
    tel = replace(steady_state_dispatch(plant, action, 1000.0), t_return=14.5)
    report = check_constraints(plant, tel, action)
    assert not report["t_return_range"].satisfied
    assert report["t_return_range"].violation_magnitude == pytest.approx(0.5)


def test_constraints_cop_cap_at_full_load(plant):
    action = decode_flows(plant, [50.8, 0.0, 0.0, 0.0])
    tel = steady_state_dispatch(plant, action, 1700.0)
    assert tel.cop[0] == pytest.approx(8.523, abs=1e-3)
    report = check_constraints(plant, tel, action)
    assert report["cop_cap"].satisfied
    assert report.all_satisfied


def test_constraints_flag_low_part_load(plant):
    action = decode_flows(plant, [14.5, 14.5, 0.0, 0.0])
    tel = steady_state_dispatch(plant, action, 400.0)
    report = check_constraints(plant, tel, action)
    assert not report["plr_range"].satisfied
    assert report["plr_range"].violation_magnitude == pytest.approx(0.2 - 200.0 / 1700.0)
    assert report["energy_balance"].satisfied


def test_constraints_independent_of_chiller_order(plant):
    order = [3, 1, 4, 2]
    permuted = subset_plant(plant, order)
    flows = {1: 30.0, 2: 0.0, 3: 40.0, 4: 15.0}
    base_action = decode_flows(plant, [flows[c.id] for c in plant.chillers])
    perm_action = decode_flows(permuted, [flows[c] for c in order])
    base = check_constraints(plant, steady_state_dispatch(plant, base_action, 2500.0), base_action)
    perm = check_constraints(permuted, steady_state_dispatch(permuted, perm_action, 2500.0), perm_action)
    for cid, entry in base.entries.items():
        assert perm[cid].satisfied == entry.satisfied
        assert perm[cid].violation_magnitude == pytest.approx(entry.violation_magnitude, abs=1e-9)
        if entry.per_chiller:
            by_id = dict(zip([c.id for c in plant.chillers], entry.per_chiller))
            assert perm[cid].per_chiller == pytest.approx([by_id[c] for c in order], abs=1e-9)


def test_fit_recovers_noiseless_curve(plant):
    spec = plant.chillers[0]
    fit = fit_power_curve(synthesize_curve_samples(spec, n=20))
    assert fit.coeffs == pytest.approx(spec.power_coeffs, abs=1e-6)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.n_samples == 20


def test_fit_noisy_samples_keeps_high_r_squared(plant):
    spec = plant.chillers[0]
    scores = [fit_power_curve(synthesize_curve_samples(spec, 20, sigma=10.0, seed=s)).r_squared for s in range(20)]
    assert np.mean(scores) >= 0.90
    assert max(scores) <= 1.0


def test_fit_interpolates_four_points(plant):
    spec = plant.chillers[2]
    samples = [(x, power_from_plr(spec, x)) for x in (0.2, 0.45, 0.7, 0.95)]
    assert fit_power_curve(samples).r_squared == pytest.approx(1.0)


def test_fit_rejects_degenerate_designs():
    with pytest.raises(CurveFitError, match="distinct"):
        fit_power_curve([(0.5, 10.0)] * 10)
    with pytest.raises(CurveFitError):
        fit_power_curve([(0.3, 10.0), (0.6, 20.0), (0.9, 30.0)])
