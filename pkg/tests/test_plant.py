"""AC plant: sweep solver, output measurement, finite-difference oracle."""

import math

import numpy as np
import pytest

from dercoord.net import Bus, Line, FeederModel
from dercoord.plant import (
    AcPlant,
    LinearPlant,
    LoadProfile,
    ReactiveLimitError,
    fd_sensitivity,
    measure_output,
    solve_power_flow,
)
from oracles import newton_power_flow, random_tree


def lossless_two_bus():
    f = FeederModel(
        buses=[Bus(0, "substation"), Bus(1, "der_unity_pf", 100.0, 0.0)],
        lines=[Line(1, 0, 1, 0.0, 0.0, np.inf)],
        der_buses=[1], der_p_min=[0.0], der_p_max=[200.0],
    )
    return f, LoadProfile(np.array([100.0]), np.array([0.0]))


def test_lossless_import_equals_load():
    f, pi = lossless_two_bus()
    op = solve_power_flow(f, np.array([0.0]), pi)
    assert op.y == pytest.approx(-100.0, abs=1e-9)
    assert np.allclose(op.v_mag, 1.0)
    assert measure_output(op) == op.y


def test_two_bus_analytic_loss():
    # one line r=0.01 pu, pure active 1.0 pu load: V solves V^2 - V + r P = 0
    f = FeederModel(
        buses=[Bus(0, "substation"), Bus(1, "load", 1000.0, 0.0)],
        lines=[Line(1, 0, 1, 0.01, 0.0, np.inf)],
        der_buses=[], der_p_min=[], der_p_max=[],
    )
    pi = LoadProfile(np.array([1000.0]), np.array([0.0]))
    op = solve_power_flow(f, np.zeros(0), pi)
    v1 = (1 + math.sqrt(1 - 4 * 0.01)) / 2
    loss_pu = (1.0 / v1) ** 2 * 0.01
    assert op.v_mag[1] == pytest.approx(v1, abs=1e-9)
    assert op.y == pytest.approx(-(1000.0 + loss_pu * 1000.0), abs=1e-6)
    assert op.line_p[0] == pytest.approx(1000.0 + loss_pu * 1000.0, abs=1e-6)


def test_bundled_feeder_losses_bounded(feeder123):
    pi = LoadProfile(feeder123.p_loads(), feeder123.q_loads())
    op = solve_power_flow(feeder123, np.zeros(9), pi)
    losses = -op.y - 3000.0
    assert 0.0 < losses < 0.2 * 3000.0


def test_case1_initial_output(case1):
    cfg, feeder, loads = case1
    y0 = solve_power_flow(feeder, np.zeros(9), loads).y
    assert y0 == pytest.approx(-3110.0, abs=5.0)


def test_case2_initial_output(case2):
    cfg, feeder, loads = case2
    y0 = solve_power_flow(feeder, np.zeros(9), loads).y
    assert y0 == pytest.approx(1000.0, abs=5.0)


def test_fd_lossless_all_ones():
    f, pi = lossless_two_bus()
    phi = fd_sensitivity(f, np.array([50.0]), pi)
    assert np.allclose(phi, 1.0, atol=1e-9)


def test_fd_respects_power_box():
    f, pi = lossless_two_bus()
    with pytest.raises(ValueError, match="box"):
        fd_sensitivity(f, np.array([0.0]), pi)  # 0 - h leaves the box


def test_power_balance_closes(feeder123, case1):
    _, _, loads = case1
    rng = np.random.default_rng(2)
    for _ in range(3):
        u = rng.uniform(0, 100, 9)
        op = solve_power_flow(feeder123, u, loads)
        v = op.v_mag * np.exp(1j * op.v_ang)
        loss = 0.0
        for l in feeder123.lines:
            z = complex(l.r, l.x)
            i_line = (v[l.from_bus] - v[l.to_bus]) / z
            loss += (abs(i_line) ** 2 * l.r) * feeder123.s_base_kva
        gen = u.sum() - loads.p_d.sum()
        # y = generation - loss (all in kW); closes to < 1e-6 pu of base
        assert abs(op.y - (gen - loss)) < 1e-6 * feeder123.s_base_kva


def test_zero_resistance_exact_balance():
    rng = np.random.default_rng(3)
    n = 6
    buses = [Bus(0, "substation")]
    der = [2, 5]
    for b in range(1, n + 1):
        kind = "der_unity_pf" if b in der else "load"
        buses.append(Bus(b, kind, float(rng.uniform(10, 60)), float(rng.uniform(0, 20))))
    lines = [Line(b, int(rng.integers(0, b)), b, 0.0, float(rng.uniform(1e-4, 1e-2)), np.inf)
             for b in range(1, n + 1)]
    f = FeederModel(buses=buses, lines=lines, der_buses=der,
                    der_p_min=[0, 0], der_p_max=[100, 100])
    pi = LoadProfile(f.p_loads(), f.q_loads())
    u = np.array([30.0, 55.0])
    op = solve_power_flow(f, u, pi)
    assert op.y == pytest.approx(u.sum() - pi.p_d.sum(), abs=1e-7)


def test_sweep_matches_newton_oracle():
    rng = np.random.default_rng(4)
    for trial in range(8):
        n = int(rng.integers(3, 16))
        f = random_tree(rng, n)
        pi = LoadProfile(f.p_loads(), f.q_loads())
        u = rng.uniform(0, 60, f.n_der)
        op = solve_power_flow(f, u, pi)
        vm, _, y, _ = newton_power_flow(f, u, pi)
        assert np.abs(op.v_mag - vm).max() < 1e-7
        assert abs(op.y - y) < 1e-4  # kW


def test_sweep_matches_newton_with_voltage_holding():
    buses = [Bus(0, "substation"), Bus(1, "load", 300, 120), Bus(2, "load", 250, 90),
             Bus(3, "der_const_voltage", 200, 80, 0.97), Bus(4, "load", 150, 60),
             Bus(5, "der_unity_pf", 100, 30)]
    lines = [Line(b, b - 1, b, 0.004, 0.006, np.inf) for b in range(1, 6)]
    f = FeederModel(buses=buses, lines=lines, der_buses=[3, 5],
                    der_p_min=[0, 0], der_p_max=[500, 500],
                    der_q_min=[-3000, 0], der_q_max=[3000, 0])
    pi = LoadProfile(f.p_loads(), f.q_loads())
    u = np.array([120.0, 80.0])
    op = solve_power_flow(f, u, pi)
    vm, _, y, q_der = newton_power_flow(f, u, pi)
    assert op.v_mag[3] == pytest.approx(0.97, abs=1e-9)
    assert np.abs(op.v_mag - vm).max() < 1e-7
    assert abs(op.y - y) < 1e-4
    assert abs(op.q_der[0] - q_der[0]) < 1e-2  # kVAr


def test_reactive_limit_violation_raises():
    buses = [Bus(0, "substation"), Bus(1, "load", 800, 300),
             Bus(2, "der_const_voltage", 0, 0, 1.05)]
    lines = [Line(1, 0, 1, 0.01, 0.02, np.inf), Line(2, 1, 2, 0.01, 0.02, np.inf)]
    f = FeederModel(buses=buses, lines=lines, der_buses=[2],
                    der_p_min=[0], der_p_max=[100],
                    der_q_min=[-5], der_q_max=[5])  # far too narrow to lift V to 1.05
    pi = LoadProfile(f.p_loads(), f.q_loads())
    with pytest.raises(ReactiveLimitError):
        solve_power_flow(f, np.array([0.0]), pi)


def test_warm_start_agrees_with_cold(feeder123, case1):
    _, _, loads = case1
    u1 = np.full(9, 20.0)
    u2 = np.full(9, 22.0)
    cold = solve_power_flow(feeder123, u2, loads)
    warm = solve_power_flow(feeder123, u2, loads, warm=solve_power_flow(feeder123, u1, loads))
    assert abs(cold.y - warm.y) < 1e-6
    assert np.abs(cold.v_mag - warm.v_mag).max() < 1e-9


def test_ac_plant_wrapper(feeder123, case1):
    _, _, loads = case1
    plant = AcPlant(feeder123, loads)
    y = plant(np.zeros(9))
    assert plant.last_op is not None and plant.n_solves == 1
    assert y == plant.last_op.y
    phi = plant.true_sensitivity(np.zeros(9))  # nudged inside the box
    assert phi.shape == (9,)


def test_linear_plant():
    p = LinearPlant(np.array([1.0, 0.9]), offset=-50.0)
    assert p(np.array([10.0, 10.0])) == pytest.approx(-31.0)
    assert np.array_equal(p.true_sensitivity(np.zeros(2)), [1.0, 0.9])


def test_load_profile_validation():
    with pytest.raises(ValueError):
        LoadProfile(np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        solve_power_flow(
            FeederModel(
                buses=[Bus(0, "substation"), Bus(1, "load", 1, 0)],
                lines=[Line(1, 0, 1, 0.01, 0.01)],
                der_buses=[], der_p_min=[], der_p_max=[],
            ),
            np.zeros(1),  # wrong length
            LoadProfile(np.array([1.0]), np.array([0.0])),
        )
