import numpy as np
import pytest

from conftest import random_small_network, single_bus_network, two_bus_network
from evcosim.power import (
    DispatchInfeasibleError,
    Line,
    PowerNetwork,
    compute_ptdf,
    economic_dispatch,
    generator_best_response,
    validate_feasibility,
)
from oracles import active_set_dispatch_oracle


def three_bus_ring(limits=(5.0, 5.0, 5.0), b=10.0):
    return PowerNetwork(
        buses=("n1", "n2", "n3"),
        lines=(
            Line("l12", "n1", "n2", susceptance=b, limit_fwd=limits[0], limit_rev=limits[0]),
            Line("l23", "n2", "n3", susceptance=b, limit_fwd=limits[1], limit_rev=limits[1]),
            Line("l31", "n3", "n1", susceptance=b, limit_fwd=limits[2], limit_rev=limits[2]),
        ),
        cost_a=np.array([1.0, 2.0, 3.0]),
        cost_b=np.array([5.0, 4.0, 3.0]),
        g_min=np.zeros(3),
        g_max=np.full(3, 50.0),
        baseload=np.zeros(3),
        slack="n1",
    )


def test_ptdf_two_bus():
    net = two_bus_network()
    H = compute_ptdf(net)
    # withdrawal at n2 flows fully over the single line, both direction rows
    assert H[0, 1] == pytest.approx(1.0)
    assert H[1, 1] == pytest.approx(-1.0)
    assert H[:, 0] == pytest.approx(np.zeros(2))


def test_ptdf_slack_injection_no_flow():
    net = two_bus_network()
    H = compute_ptdf(net)
    eta = np.array([2.5, 0.0])
    assert H @ eta == pytest.approx(np.zeros(2))


def test_ptdf_three_bus_ring_split():
    net = three_bus_ring()
    H = compute_ptdf(net)
    # unit injection at n2 (negative withdrawal), slack n1 absorbing:
    # 2/3 flows over the direct line, 1/3 over the two-hop path
    eta = np.array([0.0, -1.0, 0.0])
    flows = H @ eta
    assert abs(flows[0]) == pytest.approx(2.0 / 3.0)  # l12
    assert abs(flows[1]) == pytest.approx(1.0 / 3.0)  # l23
    assert abs(flows[2]) == pytest.approx(1.0 / 3.0)  # l31


def test_ptdf_disconnected_raises():
    with pytest.raises(ValueError):
        PowerNetwork(
            buses=("n1", "n2"),
            lines=(),
            cost_a=np.ones(2),
            cost_b=np.zeros(2),
            g_min=np.zeros(2),
            g_max=np.ones(2),
            baseload=np.zeros(2),
            slack="n1",
        )


def test_dispatch_uncongested_uniform_prices():
    net = two_bus_network(limit=100.0, a=(1.0, 2.0), b=(3.0, 4.0))
    res = economic_dispatch(net, np.array([0.0, 5.0]))
    assert np.all(res.mu == 0)
    assert res.prices.max() - res.prices.min() <= 1e-8
    assert res.kkt_residual <= 1e-6


def test_dispatch_accepts_bus_keyed_demand(corridor):
    by_bus = {"b5": 0.2, "b6": 0.1}
    vec = np.zeros(9)
    vec[4], vec[5] = 0.2, 0.1
    a = economic_dispatch(corridor.network, by_bus)
    b = economic_dispatch(corridor.network, vec)
    np.testing.assert_allclose(a.g, b.g, atol=1e-12)
    np.testing.assert_allclose(a.prices, b.prices, atol=1e-12)


def test_dispatch_single_bus_marginal_price():
    net = single_bus_network(a=2.0, b=7.0, u=1.0)
    res = economic_dispatch(net, np.array([3.0]))
    assert res.g[0] == pytest.approx(4.0)
    assert res.gamma_bal == pytest.approx(2 * 2.0 * 4.0 + 7.0)


def test_dispatch_binding_line_price_separation():
    net = two_bus_network(limit=1.0, a=(1.0, 1.0), b=(5.0, 20.0))
    # cheap generation at n1, all demand at n2, line capped at 1
    res = economic_dispatch(net, np.array([0.0, 3.0]))
    assert res.prices[1] > res.prices[0] + 1e-6
    oracle = active_set_dispatch_oracle(net, np.array([0.0, 3.0]))
    g, gamma, mu, prices, _ = oracle
    np.testing.assert_allclose(res.g, g, atol=1e-8)
    np.testing.assert_allclose(res.prices, prices, atol=1e-8)


def test_dispatch_matches_oracle_random_networks():
    rng = np.random.default_rng(42)
    done = 0
    while done < 12:
        net = random_small_network(rng)
        d = rng.uniform(0.0, 1.0, size=net.n_buses)
        try:
            res = economic_dispatch(net, d)
        except DispatchInfeasibleError:
            continue
        oracle = active_set_dispatch_oracle(net, d)
        assert oracle is not None
        g, gamma, mu, prices, obj = oracle
        np.testing.assert_allclose(res.g, g, atol=1e-8)
        np.testing.assert_allclose(res.gamma_bal, gamma, atol=1e-8)
        np.testing.assert_allclose(res.mu, mu, atol=1e-8)
        np.testing.assert_allclose(res.prices, prices, atol=1e-8)
        done += 1


def test_dispatch_price_identity():
    net = three_bus_ring(limits=(0.4, 5.0, 5.0))
    res = economic_dispatch(net, np.array([0.0, 1.5, 1.5]))
    H = compute_ptdf(net)
    np.testing.assert_allclose(res.prices, res.gamma_bal + H.T @ res.mu, atol=1e-12)


def test_dispatch_cost_monotone_in_demand():
    net = three_bus_ring()
    base = np.array([0.2, 0.4, 0.1])
    costs = []
    for scale in (0.5, 1.0, 2.0, 4.0):
        costs.append(economic_dispatch(net, scale * base).objective)
    assert all(a <= b + 1e-12 for a, b in zip(costs, costs[1:]))


def test_dispatch_slack_invariance(corridor):
    net = corridor.network
    d = corridor.d_max * 0.5
    res1 = economic_dispatch(net, d, H=compute_ptdf(net, slack="b1"))
    res2 = economic_dispatch(net, d, H=compute_ptdf(net, slack="b5"))
    np.testing.assert_allclose(res1.g, res2.g, atol=1e-7)
    np.testing.assert_allclose(res1.prices, res2.prices, atol=1e-7)


def test_generator_best_response_examples():
    net = single_bus_network(a=1.0, b=10.0, g_min=0.0, g_max=100.0)
    assert generator_best_response(net, np.array([10.0]))[0] == pytest.approx(0.0)
    assert generator_best_response(net, np.array([1e9]))[0] == pytest.approx(100.0)
    assert generator_best_response(net, np.array([30.0]))[0] == pytest.approx(10.0)


def test_dispatch_infeasible_total_capacity():
    net = single_bus_network(g_max=2.0)
    with pytest.raises(DispatchInfeasibleError) as exc:
        economic_dispatch(net, np.array([5.0]))
    assert exc.value.max_violation > 0


def test_validate_feasibility_reports():
    net = two_bus_network(limit=100.0, g_max=(5.0, 5.0))
    ok = validate_feasibility(net, np.zeros(2), np.array([2.0, 2.0]))
    assert ok.ok
    bad = validate_feasibility(net, np.zeros(2), np.array([20.0, 20.0]))
    assert not bad.ok
    assert bad.failures


def test_validate_feasibility_bundled_box(corridor):
    report = validate_feasibility(corridor.network, corridor.d_min, corridor.d_max)
    assert report.ok
