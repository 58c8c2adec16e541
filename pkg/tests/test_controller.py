"""Tracking controller, step-size intervals, and the dispatch QP."""

import numpy as np
import pytest

from dercoord.controller import (
    ControlState,
    DispatchCost,
    DispatchProblem,
    OdcpInfeasibleError,
    beta_bounds,
    beta_bounds_estimation,
    sample_mask,
    solve_odcp,
    tracking_step,
)
from dercoord.estimator import SensitivityEstimate
from dercoord.net import Bus, Line, FeederModel
from dercoord.rng import substream
from dercoord.verify import (
    brute_force_qp,
    check_corollary1,
    qp_oracle_batch,
    random_dispatch_instance,
    trichotomy_batch,
)


# -- masks -------------------------------------------------------------------------


def test_mask_seeded_determinism():
    a = [sample_mask(substream(5, "mask"), 4) for _ in range(3)]
    b = [sample_mask(substream(5, "mask"), 4) for _ in range(3)]
    # fresh generator, same seed: identical sequence
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_mask_is_fair():
    rng = substream(11, "mask")
    draws = np.array([sample_mask(rng, 6) for _ in range(100_000)])
    means = draws.mean(axis=0)
    assert np.all(means > 0.49) and np.all(means < 0.51)


def test_mask_empty():
    assert sample_mask(substream(1, "mask"), 0).shape == (0,)


# -- tracking step -----------------------------------------------------------------


def bounds(n, lo=0.0, hi=100.0):
    return np.full(n, lo), np.full(n, hi)


def test_tracking_step_hand_value():
    st = ControlState(u=np.array([10.0, 10.0]), y=0.0, e=-5.0)
    est = SensitivityEstimate(np.array([1.0, 1.0]), 0.8, 1.2)
    new = tracking_step(st, est, np.array([1.0, 0.0]), beta=0.02, bounds=bounds(2))
    assert np.allclose(new.u, [10.1, 10.0])
    assert new.k == st.k + 1 and np.array_equal(new.u_prev, st.u)


def test_tracking_step_zero_error_fixed():
    st = ControlState(u=np.array([10.0, 20.0]), y=0.0, e=0.0)
    est = SensitivityEstimate(np.array([1.0, 1.0]), 0.8, 1.2)
    for mask in (np.ones(2), np.zeros(2), np.array([1.0, 0.0])):
        assert np.array_equal(tracking_step(st, est, mask, 0.02, bounds(2)).u, st.u)


def test_tracking_step_pinned_at_lower_bound():
    st = ControlState(u=np.zeros(2), y=0.0, e=50.0)  # positive error pushes down
    est = SensitivityEstimate(np.array([1.0, 1.2]), 0.8, 1.2)
    new = tracking_step(st, est, np.ones(2), 0.05, bounds(2))
    assert np.array_equal(new.u, np.zeros(2))


# -- admissible step intervals --------------------------------------------------------


def test_controller_config_validation():
    from dercoord.controller import ControllerConfig

    cfg = ControllerConfig(beta=0.02, epsilon=0.01, delta=1.0)
    assert cfg.randomized
    with pytest.raises(ValueError):
        ControllerConfig(beta=-0.1)
    with pytest.raises(ValueError):
        ControllerConfig(delta=0.0)


def test_beta_bounds_formula():
    lo, hi = beta_bounds(9, 0.8, 1.2, 0.01)
    assert lo == pytest.approx(0.01 / 0.64)
    assert hi == pytest.approx(1.0 / (9 * 1.44))


def test_beta_bounds_trivial():
    assert beta_bounds(1, 1.0, 1.0, 0.5) == pytest.approx((0.5, 1.0))


def test_beta_bounds_lower_from_epsilon():
    lo, _ = beta_bounds(2, 0.8, 1.2, 0.01)
    assert lo == pytest.approx(0.015625)


def test_beta_bounds_epsilon_range():
    with pytest.raises(ValueError):
        beta_bounds(9, 0.8, 1.2, 0.1)  # above b_lo^2/(n b_hi^2)
    with pytest.raises(ValueError):
        beta_bounds(9, 0.8, 1.2, 0.0)


def test_beta_bounds_estimation_variant():
    lo, hi = beta_bounds_estimation(9, 0.8, 1.2, 0.1)
    assert lo == pytest.approx(0.1 / (9 * 0.64))
    assert hi == pytest.approx(1.0 / (9 * 1.44))
    with pytest.raises(ValueError):
        beta_bounds_estimation(9, 0.8, 1.2, 0.5)  # above b_lo^2/b_hi^2


# -- dispatch QP -----------------------------------------------------------------


def star_feeder(n=2, p_max=10.0):
    buses = [Bus(0, "substation")] + [Bus(b, "der_unity_pf", 0.0, 0.0) for b in range(1, n + 1)]
    lines = [Line(b, 0, b, 1e-3, 1e-3, np.inf) for b in range(1, n + 1)]
    return FeederModel(buses=buses, lines=lines, der_buses=list(range(1, n + 1)),
                       der_p_min=np.zeros(n), der_p_max=np.full(n, p_max))


def test_odcp_minimum_norm_analytic():
    f = star_feeder()
    prob = DispatchProblem(y_now=0.0, p_tilde=np.zeros(2), phi_hat=np.ones(2),
                           y_star=1.0, p_d=np.zeros(2))
    res = solve_odcp(prob, f)
    assert np.allclose(res.p_g, [0.5, 0.5], atol=1e-9)
    assert res.kkt_residual <= 1e-6 and res.max_violation <= 1e-6


def test_odcp_flow_cap_redistributes():
    f = star_feeder()
    prob = DispatchProblem(y_now=0.0, p_tilde=np.zeros(2), phi_hat=np.ones(2),
                           y_star=1.0, p_d=np.zeros(2),
                           flow_limits=np.array([0.2, np.inf]))
    res = solve_odcp(prob, f)
    assert np.allclose(res.p_g, [0.2, 0.8], atol=1e-8)
    oracle = brute_force_qp(prob, f, grid_step=1e-3)
    assert oracle is not None and abs(res.objective - oracle[1]) <= 1e-3


def test_odcp_infeasible_box_certificate():
    f = star_feeder()
    prob = DispatchProblem(y_now=0.0, p_tilde=np.zeros(2), phi_hat=np.ones(2),
                           y_star=100.0, p_d=np.zeros(2))
    with pytest.raises(OdcpInfeasibleError, match="power box"):
        solve_odcp(prob, f)
    assert brute_force_qp(prob, f, grid_step=1e-2) is None


def test_odcp_infeasible_flow_certificate():
    f = star_feeder()
    prob = DispatchProblem(y_now=0.0, p_tilde=np.zeros(2), phi_hat=np.ones(2),
                           y_star=10.0, p_d=np.zeros(2),
                           flow_limits=np.array([1.0, 1.0]))
    with pytest.raises(OdcpInfeasibleError, match="flow"):
        solve_odcp(prob, f)


def test_odcp_cost_scaling_invariance():
    rng = np.random.default_rng(21)
    prob, f = random_dispatch_instance(rng, 3)
    base = solve_odcp(prob, f)
    scaled = DispatchProblem(
        y_now=prob.y_now, p_tilde=prob.p_tilde, phi_hat=prob.phi_hat,
        y_star=prob.y_star, p_d=prob.p_d, flow_limits=prob.flow_limits,
        cost=DispatchCost(quad=np.full(3, 7.0), lin=-2.0 * 7.0 * prob.p_tilde),
    )
    res = solve_odcp(scaled, f)
    assert np.allclose(res.p_g, base.p_g, atol=1e-7)


def test_odcp_rejects_nonconvex_cost():
    with pytest.raises(ValueError):
        DispatchCost(quad=np.array([1.0, 0.0]), lin=np.zeros(2))


def test_odcp_matches_grid_on_random_instances():
    rep = qp_oracle_batch(master_seed=7, n_instances=24)
    assert rep.verdict == "pass", rep.to_json()


# -- theorem-level behavior ----------------------------------------------------------


def test_trichotomy_small_batch():
    rep = trichotomy_batch(123, n_scenarios=30)
    assert rep.verdict == "pass", rep.to_json()
    assert set(rep.details["counts"]) == {"tracking", "saturated_low", "saturated_high"}


def test_corollary1_small():
    rep = check_corollary1(99, n_seeds=10, epsilon=0.1)
    assert rep.verdict == "pass", rep.to_json()
