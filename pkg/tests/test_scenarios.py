import numpy as np
import pytest

from ecstore import scenarios
from ecstore.model import validate_scenario
from ecstore.scenarios import random_scenario


def test_testbed_nodes():
    nodes = scenarios.testbed_nodes()
    assert len(nodes) == 12 and [n.id for n in nodes] == list(range(1, 13))
    # first site runs at the measured mean and spread
    assert 1 / nodes[0].mu == pytest.approx(13.9)
    assert nodes[0].sigma2 == pytest.approx(4.3**2)
    assert 1 / nodes[11].mu > 1 / nodes[4].mu > 1 / nodes[0].mu


@pytest.mark.parametrize("r", [1000, 30, 7])
def test_rates_sum_to_aggregate(r):
    rates = scenarios.testbed_rates(r)
    assert rates.sum() == pytest.approx(0.118 * r / 1000)
    assert np.all(rates > 0)


def test_rate_groups():
    rates = scenarios.testbed_rates(1000)
    assert rates[0] == pytest.approx(1.25 / 9000) and rates[1] == pytest.approx(1.25 / 10000)
    assert len(set(np.round(rates[:3], 12))) == 3


def test_testbed_quarters_and_round_trip():
    sc = scenarios.testbed_scenario(r=100)
    assert list(sc.k[[0, 25, 50, 75]]) == [6, 7, 6, 4]
    assert np.max(sc.lam @ (np.outer(sc.k, np.ones(12)) / 12) / sc.mu) < 1
    again = validate_scenario(sc.to_dict())
    assert again.to_dict() == sc.to_dict()


@pytest.mark.parametrize("family", ["exponential", "shifted_exponential", "mixed"])
def test_random_scenario_load(family):
    sc = random_scenario(np.random.default_rng(1), m=8, r=5, load=0.6, family=family)
    assert sc.lam @ sc.k / sc.mu.sum() == pytest.approx(0.6)
    assert all(1 <= k <= 4 for k in sc.k)


def test_random_scenario_family():
    with pytest.raises(ValueError):
        random_scenario(np.random.default_rng(1), family="pareto")
