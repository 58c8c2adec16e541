import copy

import numpy as np
import pytest

from dercoord.net import Bus, Line, FeederModel
from dercoord.plant import LoadProfile
from dercoord.sim import bundled_path, load_scenario


@pytest.fixture(scope="session")
def _scenario_cache():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = load_scenario(bundled_path(name))
        return cache[name]

    return get


def _fresh(cached):
    """Feeder and loads are shared read-only; the config is a per-test copy."""
    cfg, feeder, loads = cached
    out = copy.deepcopy(cfg)
    object.__setattr__(out, "_feeder_hash", getattr(cfg, "_feeder_hash", ""))
    return out, feeder, loads


@pytest.fixture()
def case1(_scenario_cache):
    """Bundled importing scenario: (config, feeder, effective loads)."""
    return _fresh(_scenario_cache("case1.toml"))


@pytest.fixture()
def case2(_scenario_cache):
    return _fresh(_scenario_cache("case2.toml"))


@pytest.fixture()
def case3(_scenario_cache):
    return _fresh(_scenario_cache("case3.toml"))


@pytest.fixture()
def feeder123(_scenario_cache):
    return _scenario_cache("case1.toml")[1]


@pytest.fixture()
def two_bus():
    """Smallest feeder: one line, one load+unit bus."""
    f = FeederModel(
        buses=[Bus(0, "substation"), Bus(1, "der_unity_pf", 100.0, 0.0)],
        lines=[Line(1, 0, 1, 0.0, 0.001, np.inf)],
        der_buses=[1],
        der_p_min=[0.0],
        der_p_max=[200.0],
    )
    return f, LoadProfile(np.array([100.0]), np.array([0.0]))


@pytest.fixture()
def chain3():
    """0 -> 1 -> 2 chain, loads only."""
    return FeederModel(
        buses=[Bus(0, "substation"), Bus(1, "load", 100.0, 0.0), Bus(2, "load", 50.0, 0.0)],
        lines=[Line(1, 0, 1, 1e-3, 1e-3, np.inf), Line(2, 1, 2, 1e-3, 1e-3, np.inf)],
        der_buses=[],
        der_p_min=[],
        der_p_max=[],
    )
