"""Property-based checks of pricing, utilities, projection, the oracle and tree routing."""

import networkx as nx
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mechanism.learning import build_price_set, project_onto_price_set
from mechanism.mech_central import radial_pricing
from mechanism.mech_dist import nearest_via, neighborhood_slice, spanning_tree, tax_dist
from mechanism.messages import DistMessageProfile
from mechanism.model import Quadratic, ScaledLog, make_instance, social_welfare
from mechanism.oracle import solve_centralized

from projection_reference import dykstra_projection, grid_best_welfare, slsqp_optimum

finite = dict(allow_nan=False, allow_infinity=False)


@st.composite
def trees(draw, min_size=2, max_size=30):
    n = draw(st.integers(min_size, max_size))
    edges = [(draw(st.integers(0, k - 1)), k) for k in range(1, n)]
    return n, edges


class TestRadialPricingProperties:
    @given(s=arrays(float, st.integers(1, 6), elements=st.floats(0, 100, **finite)),
           p0=st.floats(0, 10, **finite), seed=st.integers(0, 2 ** 16))
    @settings(max_examples=200, deadline=None)
    def test_nonnegative_and_sums_to_peak_price(self, s, p0, seed):
        y = np.random.default_rng(seed).normal(size=s.size)
        out = radial_pricing(s, y, p0)
        assert np.all(out >= 0)
        assert out.sum() == pytest.approx(p0, abs=1e-12 * max(1.0, p0))

    @given(s=arrays(float, 4, elements=st.floats(0.01, 100, **finite)), p0=st.floats(0.01, 10, **finite))
    @settings(max_examples=100, deadline=None)
    def test_proportional_to_suggestions(self, s, p0):
        out = radial_pricing(s, np.zeros(4), p0)
        np.testing.assert_allclose(out, p0 * s / s.sum(), rtol=1e-9, atol=1e-12 * p0)


class TestUtilityProperties:
    @given(c=st.floats(0.1, 10), d=st.floats(1.5, 5), x=st.floats(-0.9, 6.9))
    @settings(max_examples=100, deadline=None)
    def test_scaled_log_derivative_matches_difference(self, c, d, x):
        u = ScaledLog(c, d, -1.0, 7.0)
        h = 1e-5
        numeric = (u.value(x + h) - u.value(x - h)) / (2 * h)
        assert u.derivative(x) == pytest.approx(numeric, rel=1e-6)

    @given(a=st.floats(-3, 3), b=st.floats(0.1, 5), x1=st.floats(-5, 5), x2=st.floats(-5, 5))
    @settings(max_examples=100, deadline=None)
    def test_quadratic_marginal_utility_decreases(self, a, b, x1, x2):
        u = Quadratic(a, b, -5.0, 5.0)
        lo, hi = sorted((x1, x2))
        assert u.derivative(lo) >= u.derivative(hi)

    @given(c=st.floats(0.1, 10), x=st.floats(-0.9, 6.9))
    @settings(max_examples=100, deadline=None)
    def test_inverse_derivative_round_trip(self, c, x):
        u = ScaledLog(c, 2.0, -1.0, 7.0)
        assert u.inverse_derivative(u.derivative(x)) == pytest.approx(x, abs=1e-9)


class TestProjectionProperties:
    @given(z=arrays(float, 9, elements=st.floats(-2, 3, **finite)))
    @settings(max_examples=10, deadline=None)
    def test_matches_alternating_projections(self, scenario, z):
        P = build_price_set(scenario.instance, scenario.learning.r_lo, scenario.learning.r_hi)
        ours = project_onto_price_set(P, z)
        reference = dykstra_projection(P.G, P.h, P.E, P.e, z)
        np.testing.assert_allclose(ours, reference, atol=1e-7)

    @given(z=arrays(float, 9, elements=st.floats(-2, 3, **finite)))
    @settings(max_examples=30, deadline=None)
    def test_projection_is_member(self, scenario, z):
        P = build_price_set(scenario.instance, scenario.learning.r_lo, scenario.learning.r_hi)
        assert P.membership(project_onto_price_set(P, z))


class TestOracleAgainstSearch:
    @given(a=arrays(float, 4, elements=st.floats(1, 2)), b=arrays(float, 4, elements=st.floats(1, 2)),
           prices=arrays(float, 2, elements=st.floats(0, 0.5)), p0=st.floats(0, 0.5),
           rhs=st.floats(0.5, 3))
    @settings(max_examples=20, deadline=None)
    def test_two_by_two_instances(self, a, b, prices, p0, rhs):
        utilities = [[Quadratic(a[2 * i + t], b[2 * i + t], -1.0, 3.0) for t in range(2)] for i in range(2)]
        inst = make_instance(utilities, prices, p0, np.ones((1, 4)), [rhs])
        x = solve_centralized(inst).x
        welfare = social_welfare(inst, x)
        grid = grid_best_welfare(a, b, prices, p0, rhs, -1.0, 3.0)
        reference_x, reference_welfare = slsqp_optimum(a, b, prices, p0, rhs, -1.0, 3.0)
        assert welfare >= grid - 1e-7
        assert welfare == pytest.approx(reference_welfare, abs=1e-6)
        np.testing.assert_allclose(x, reference_x, atol=5e-3)


class TestTreeProperties:
    @given(tree=trees())
    @settings(max_examples=50, deadline=None)
    def test_next_hop_partitions_users(self, tree):
        n, edges = tree
        net = spanning_tree(n, edges)
        graph = nx.Graph(list(net.edges))
        for i in range(n):
            for j in net.neighbors[i]:
                behind = {k for k in range(n) if nearest_via(net, i, k) == j}
                cut = graph.copy()
                cut.remove_edge(i, j)
                assert behind == nx.node_connected_component(cut, j)
            assert {k for k in range(n) if nearest_via(net, i, k) == i} == {i}

    @given(tree=trees(min_size=4, max_size=10), seed=st.integers(0, 2 ** 16), data=st.data())
    @settings(max_examples=30, deadline=None)
    def test_tax_ignores_users_beyond_neighbors(self, tree, seed, data):
        n, edges = tree
        net = spanning_tree(n, edges)
        hops = dict(nx.all_pairs_shortest_path_length(nx.Graph(list(net.edges))))
        far = [(i, k) for i in range(n) for k in range(n) if hops[i][k] >= 2]
        assume(far)
        i, k = data.draw(st.sampled_from(far))

        u = Quadratic(1.0, 1.0, -2.0, 2.0)
        inst = make_instance([[u, u]] * n, [0.1, 0.2], 0.05, np.ones((1, 2 * n)), [5.0])
        rng = np.random.default_rng(seed)

        def profile(rng):
            return dict(
                y=rng.uniform(-1, 1, (n, 2)), q=rng.uniform(0, 1, (n, 1)), s=rng.uniform(0, 1, (n, 2)),
                beta={key: rng.normal(size=2) for key in net.beta_pairs()},
                n_summary={key: rng.normal(size=1) for key in net.summary_pairs()},
                nu_summary={key: rng.normal(size=2) for key in net.summary_pairs()},
            )

        base = profile(rng)
        noise = profile(np.random.default_rng(seed + 1))
        changed = dict(base)
        for name in ('y', 'q', 's'):
            changed[name] = base[name].copy()
            changed[name][k] = noise[name][k]
        for name in ('beta', 'n_summary', 'nu_summary'):
            changed[name] = {key: (noise[name][key] if key[0] == k else vec) for key, vec in base[name].items()}

        before = tax_dist(inst, net, neighborhood_slice(net, DistMessageProfile(**base), i))
        after = tax_dist(inst, net, neighborhood_slice(net, DistMessageProfile(**changed), i))
        assert after.as_row() == before.as_row()
