"""Feeder model, incidence matrix and tree-flow computation."""

import numpy as np
import pytest
import sympy

from dercoord.net import (
    Bus,
    FeederError,
    FeederModel,
    Line,
    incidence_matrix,
    line_flows_approx,
    load_feeder,
    map_injections,
)
from oracles import random_tree, subtree_flows

TWO_BUS_FILE = """
[buses]
0 substation 0 0
1 load 100 0
[lines]
1 0 1 0.01 0.02 inf
[ders]
"""

TRIANGLE_FILE = """
[buses]
0 substation 0 0
1 load 10 0
2 load 10 0
[lines]
1 0 1 0.01 0.01 inf
2 1 2 0.01 0.01 inf
3 2 0 0.01 0.01 inf
[ders]
"""


def test_two_bus_file(tmp_path):
    p = tmp_path / "two.txt"
    p.write_text(TWO_BUS_FILE)
    f = load_feeder(p)
    assert f.n_buses == 1 and f.n_lines == 1
    assert f.buses[1].p_load == 100.0


def test_triangle_rejected(tmp_path):
    p = tmp_path / "tri.txt"
    p.write_text(TRIANGLE_FILE)
    with pytest.raises(FeederError, match="not radial"):
        load_feeder(p)


def test_bundled_feeder_aggregates(feeder123):
    f = feeder123
    assert f.n_buses == 122 and f.n_lines == 122
    assert abs(f.p_loads().sum() - 3000.0) < 1e-6
    assert abs(f.q_loads().sum() - 1575.0) < 1e-6
    assert f.der_buses == [19, 26, 38, 49, 56, 64, 78, 89, 99]
    assert np.all(f.der_p_min == 0.0) and np.all(f.der_p_max == 100.0)
    # the congestion-study leaf: zero load behind line (55,56)
    assert f.buses[56].p_load == 0.0 and f.parent[56] == 55
    for b in (78, 89):
        assert f.buses[b].kind == "der_const_voltage" and f.buses[b].v_set == 0.95


def test_incidence_single_line():
    f = FeederModel(
        buses=[Bus(0, "substation"), Bus(1, "load", 1, 0)],
        lines=[Line(1, 0, 1, 0.01, 0.01)],
        der_buses=[], der_p_min=[], der_p_max=[],
    )
    assert incidence_matrix(f).tolist() == [[-1.0]]


def test_incidence_chain(chain3):
    assert incidence_matrix(chain3).tolist() == [[-1.0, 1.0], [0.0, -1.0]]


def test_incidence_123_unimodular(feeder123):
    m = sympy.Matrix(incidence_matrix(feeder123).astype(int))
    assert abs(m.det(method="bareiss")) == 1


def test_map_injections_basic(two_bus):
    f, _ = two_bus
    p = map_injections(f, np.array([50.0]), np.array([100.0]))
    assert p.tolist() == [-50.0]


def test_map_injections_zero_gen(chain3):
    p_d = np.array([100.0, 50.0])
    assert np.array_equal(map_injections(chain3, np.zeros(0), p_d), -p_d)


def test_map_injections_123_total(feeder123):
    p = map_injections(feeder123, np.full(9, 100.0), feeder123.p_loads())
    assert abs(p.sum() - (900.0 - 3000.0)) < 1e-9


def test_map_injections_dimension_error(chain3):
    with pytest.raises(ValueError):
        map_injections(chain3, np.zeros(1), np.zeros(2))


def test_flows_single_line():
    f = FeederModel(
        buses=[Bus(0, "substation"), Bus(1, "load", 100, 0)],
        lines=[Line(1, 0, 1, 0.01, 0.01)],
        der_buses=[], der_p_min=[], der_p_max=[],
    )
    assert np.allclose(line_flows_approx(f, np.array([-100.0])), [100.0])


def test_flows_chain(chain3):
    f = line_flows_approx(chain3, np.array([-100.0, -50.0]))
    assert np.allclose(f, [150.0, 50.0])


def test_flow_conservation_at_root(chain3):
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = rng.normal(size=2) * 100
        f = line_flows_approx(chain3, p)
        assert abs(f[0] + p.sum()) < 1e-9


def test_flows_solve_incidence_system():
    rng = np.random.default_rng(11)
    for _ in range(40):
        f = random_tree(rng, int(rng.integers(2, 30)))
        p = rng.normal(size=f.n_buses) * 100
        flows = line_flows_approx(f, p)
        resid = incidence_matrix(f) @ flows - p
        assert np.abs(resid).max() <= 1e-10 * max(1.0, np.abs(p).max())


def test_flows_match_subtree_oracle():
    rng = np.random.default_rng(13)
    for n in (2, 7, 33, 120, 200):
        f = random_tree(rng, n)
        p = rng.normal(size=n) * 80
        assert np.allclose(line_flows_approx(f, p), subtree_flows(f, p), atol=1e-9)


def test_unimodular_random_trees():
    rng = np.random.default_rng(17)
    for _ in range(100):
        f = random_tree(rng, int(rng.integers(2, 40)))
        det = np.linalg.det(incidence_matrix(f))
        assert abs(abs(det) - 1.0) < 1e-8


def test_map_injections_linearity(feeder123):
    rng = np.random.default_rng(19)
    p_d = feeder123.p_loads()
    a, b = 2.5, -1.25
    g1 = rng.uniform(0, 100, 9)
    g2 = rng.uniform(0, 100, 9)
    zero = np.zeros(feeder123.n_buses)
    lhs = map_injections(feeder123, a * g1 + b * g2, p_d)
    rhs = a * map_injections(feeder123, g1, zero) + b * map_injections(feeder123, g2, zero) - p_d
    assert np.allclose(lhs, rhs, atol=1e-9)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b, l, d: (b, l[:-1], d), "not radial"),
        (lambda b, l, d: (b, l, d + [2]), "duplicate"),
        (lambda b, l, d: (b, l, [0]), "substation cannot host"),
    ],
)
def test_validation_errors(mutate, message):
    buses = [Bus(0, "substation"), Bus(1, "load", 10, 0), Bus(2, "der_unity_pf", 10, 0)]
    lines = [Line(1, 0, 1, 0.01, 0.01), Line(2, 1, 2, 0.01, 0.01)]
    ders = [2]
    buses, lines, ders = mutate(buses, lines, ders)
    with pytest.raises(FeederError, match=message):
        FeederModel(buses=buses, lines=lines, der_buses=ders,
                    der_p_min=[0.0] * len(ders), der_p_max=[10.0] * len(ders))


def test_disconnected_rejected():
    buses = [Bus(0, "substation"), Bus(1, "load", 10, 0), Bus(2, "load", 10, 0)]
    lines = [Line(1, 0, 1, 0.01, 0.01), Line(2, 0, 1, 0.01, 0.01)]
    with pytest.raises(FeederError, match="not radial"):
        FeederModel(buses=buses, lines=lines, der_buses=[], der_p_min=[], der_p_max=[])


def test_bad_line_parameters():
    with pytest.raises(FeederError, match="negative resistance"):
        FeederModel(
            buses=[Bus(0, "substation"), Bus(1, "load", 1, 0)],
            lines=[Line(1, 0, 1, -0.01, 0.01)],
            der_buses=[], der_p_min=[], der_p_max=[],
        )
    with pytest.raises(FeederError, match="f_max"):
        FeederModel(
            buses=[Bus(0, "substation"), Bus(1, "load", 1, 0)],
            lines=[Line(1, 0, 1, 0.01, 0.01, 0.0)],
            der_buses=[], der_p_min=[], der_p_max=[],
        )


def test_const_voltage_needs_setpoint():
    with pytest.raises(FeederError, match="setpoint"):
        FeederModel(
            buses=[Bus(0, "substation"), Bus(1, "der_const_voltage", 1, 0)],
            lines=[Line(1, 0, 1, 0.01, 0.01)],
            der_buses=[1], der_p_min=[0], der_p_max=[10],
        )
