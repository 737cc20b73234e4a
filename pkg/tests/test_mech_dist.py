"""Tests for the distributed mechanism on the three-user path network."""

import numpy as np
import pytest

from mechanism.errors import Disconnected, DimensionMismatch, InvalidHelper, MissingSummary
from mechanism.mech_central import NeConfig, construct_ne, tax
from mechanism.mech_dist import (
    HelperPolicy,
    TreeNetwork,
    assign_helpers,
    budget_report_dist,
    check_ir_dist,
    check_profile_keys,
    check_summary_consistency,
    construct_ne_dist,
    nearest_via,
    neighborhood_slice,
    payoff_dist,
    rebate_tax_dist,
    spanning_tree,
    tax_dist,
    verify_ne_dist,
)
from mechanism.messages import DistMessageProfile
from mechanism.model import Quadratic, make_instance, user_utility
from mechanism.oracle import solve_centralized

QUICK = NeConfig(deviation_samples=200)


@pytest.fixture(scope='module')
def dist_ne(inst, network, solution):
    return construct_ne_dist(inst, network, solution)


@pytest.fixture(scope='module')
def dist_report(inst, network, dist_ne):
    return verify_ne_dist(inst, network, dist_ne, NeConfig(deviation_samples=10000))


def _tax(inst, net, m, i):
    return tax_dist(inst, net, neighborhood_slice(net, m, i)).total


class TestTopology:
    def test_path_is_its_own_tree(self, network):
        assert network.edges == ((0, 1), (1, 2))
        assert network.neighbors == ((1,), (0, 2), (1,))

    def test_triangle_keeps_edges_from_root(self):
        net = spanning_tree(3, [(0, 1), (1, 2), (0, 2)])
        assert set(net.edges) == {(0, 1), (0, 2)}

    def test_edge_order_does_not_matter(self):
        a = spanning_tree(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)])
        b = spanning_tree(4, [(0, 2), (3, 0), (2, 3), (1, 2), (0, 1)])
        assert a.edges == b.edges

    def test_disconnected_graph(self):
        with pytest.raises(Disconnected):
            spanning_tree(4, [(0, 1), (2, 3)])

    def test_cycle_is_not_a_tree(self):
        with pytest.raises(Disconnected):
            TreeNetwork(n_users=3, edges=((0, 1), (1, 2), (0, 2)), phi=(1, 0, 1))

    def test_nearest_via_on_path(self, network):
        assert nearest_via(network, 0, 2) == 1
        assert nearest_via(network, 2, 0) == 1
        assert nearest_via(network, 1, 1) == 1
        assert nearest_via(network, 1, 2) == 2

    def test_single_user(self):
        net = spanning_tree(1, [])
        assert net.phi == (0,)
        assert nearest_via(net, 0, 0) == 0


class TestHelpers:
    def test_fixture_uses_explicit_map(self, network):
        assert network.phi == (1, 0, 1)

    def test_lowest_index_policy(self, network):
        assert assign_helpers(network, HelperPolicy.lowest_index()) == (1, 0, 1)

    def test_explicit_policy_accepted(self, network):
        assert assign_helpers(network, HelperPolicy.explicit({0: 1, 1: 2, 2: 1})) == (1, 2, 1)

    def test_helper_must_be_neighbor(self, network):
        with pytest.raises(InvalidHelper):
            assign_helpers(network, HelperPolicy.explicit({0: 1, 1: 0, 2: 0}))

    def test_explicit_map_must_be_total(self, network):
        with pytest.raises(InvalidHelper):
            assign_helpers(network, HelperPolicy.explicit({0: 1, 1: 0}))

    def test_with_phi_validates(self, network):
        with pytest.raises(InvalidHelper):
            network.with_phi((2, 0, 1))


class TestConstruction:
    def test_leaf_summary_seen_from_center(self, dist_ne, solution):
        np.testing.assert_allclose(dist_ne.nu_summary[(1, 0)], solution.x[0], atol=0)

    def test_subtree_summary_seen_from_leaf(self, dist_ne, solution):
        np.testing.assert_allclose(dist_ne.nu_summary[(0, 1)], solution.x[1] + solution.x[2], atol=1e-15)

    def test_leaf_constraint_summary(self, inst, dist_ne, solution):
        np.testing.assert_allclose(dist_ne.n_summary[(1, 2)], inst.user_block(2) @ solution.x[2], atol=1e-15)

    def test_sum_row_summary(self, dist_ne, exact):
        assert dist_ne.n_summary[(1, 0)][6] == pytest.approx(exact.x[0].sum(), abs=1e-6)
        assert dist_ne.n_summary[(1, 0)][6] == pytest.approx(-1.52458, abs=1e-5)

    def test_helpers_predict_exactly(self, dist_ne, network, solution):
        assert set(dist_ne.beta) == {(1, 0), (0, 1), (1, 2)}
        for (h, j), vec in dist_ne.beta.items():
            np.testing.assert_array_equal(vec, solution.x[j])

    def test_keys_match_network(self, network, dist_ne):
        check_profile_keys(network, dist_ne)


class TestTaxDist:
    def test_leaf_aggregates(self, inst, network, dist_ne, solution):
        # User 3 sees user 2's prices only and the load of users 1 and 2
        view = neighborhood_slice(network, dist_ne, 2)
        assert view.neighbors == (1,)
        assert set(view.nu_in) == {(1, 0)}
        part = tax_dist(inst, network, view)
        expected_cost = float((inst.unit_prices + solution.mu) @ solution.x[2]) \
            - solution.lam[4] * solution.x[2, 0] - solution.lam[5] * solution.x[2, 1] \
            + solution.lam[6] * solution.x[2].sum()
        assert part.cost == pytest.approx(expected_cost, abs=1e-9)

    def test_sum_row_slack_through_summary(self, inst, network, dist_ne, solution):
        view = neighborhood_slice(network, dist_ne, 2)
        slack = 2.0 - (view.y[1].sum() + view.n_in[(1, 0)][6]) - view.beta_in.sum()
        assert slack == pytest.approx(2.0 - solution.x.sum(), abs=1e-12)

    def test_taxes_match_centralized(self, inst, network, dist_ne, solution):
        central = construct_ne(inst, solution)
        for i in range(3):
            assert _tax(inst, network, dist_ne, i) == pytest.approx(tax(inst, central, i), abs=1e-9)

    def test_penalties_vanish(self, inst, network, dist_ne):
        for i in range(3):
            part = tax_dist(inst, network, neighborhood_slice(network, dist_ne, i))
            assert part.pr_n == 0.0 and part.pr_nu == 0.0 and part.pr_beta == 0.0

    def test_non_neighbor_messages_are_ignored(self, inst, network, dist_ne):
        before = tax_dist(inst, network, neighborhood_slice(network, dist_ne, 2))
        m = dist_ne.with_entry('y', (0, 0), 3.0).with_entry('q', (0, 6), 9.0).with_entry('s', (0, 1), 4.0)
        after = tax_dist(inst, network, neighborhood_slice(network, m, 2))
        assert after.as_row() == before.as_row()

    def test_missing_summary(self, inst, network, dist_ne):
        table = dict(dist_ne.nu_summary)
        del table[(1, 0)]
        m = DistMessageProfile(y=dist_ne.y, q=dist_ne.q, s=dist_ne.s, beta=dist_ne.beta,
                               n_summary=dist_ne.n_summary, nu_summary=table)
        with pytest.raises(MissingSummary):
            neighborhood_slice(network, m, 2)
        with pytest.raises(MissingSummary):
            check_profile_keys(network, m)

    def test_extra_summary(self, network, dist_ne):
        table = dict(dist_ne.n_summary)
        table[(0, 2)] = np.zeros(7)
        m = DistMessageProfile(y=dist_ne.y, q=dist_ne.q, s=dist_ne.s, beta=dist_ne.beta,
                               n_summary=table, nu_summary=dist_ne.nu_summary)
        with pytest.raises(DimensionMismatch):
            check_profile_keys(network, m)

    def test_payoff_plus_tax_is_utility(self, inst, network, dist_ne):
        view = neighborhood_slice(network, dist_ne, 1)
        assert payoff_dist(inst, network, view) + tax_dist(inst, network, view).total == pytest.approx(
            user_utility(inst, 1, dist_ne.y[1]), abs=1e-12)


class TestVerifyNeDist:
    def test_equilibrium_passes(self, dist_report):
        assert dist_report.passed
        assert dist_report.max_improvement <= 1e-7

    def test_coordinates_cover_summaries(self, dist_report):
        labels = {c.label for c in dist_report.coordinates}
        assert {'beta_2_1_2', 'n_2_1_7', 'nu_2_3_1', 'nu_1_2_2'} <= labels

    def test_allocation_is_optimal(self, dist_ne, exact):
        np.testing.assert_allclose(dist_ne.y, exact.x, atol=1e-6)

    def test_perturbed_summary_is_restored(self, inst, network, dist_ne, solution):
        m = dist_ne.with_entry('nu_summary', ((1, 0), 1), dist_ne.nu_summary[(1, 0)][1] + 0.2)
        report = verify_ne_dist(inst, network, m, QUICK)
        assert not report.passed
        assert report.best_response['nu_2_1_2'] == pytest.approx(solution.x[0, 1], abs=1e-9)


class TestSummaryConsistency:
    def test_equilibrium_residuals(self, inst, network, dist_ne, solution):
        report = check_summary_consistency(inst, network, dist_ne, solution.x)
        assert report.passed
        assert report.max_residual <= 1e-10

    def test_injected_noise_shows_in_recursion(self, inst, network, dist_ne, solution):
        m = dist_ne.with_entry('n_summary', ((1, 2), 6), dist_ne.n_summary[(1, 2)][6] + 0.125)
        report = check_summary_consistency(inst, network, m, solution.x)
        assert report.recursion_n == pytest.approx(0.125, abs=1e-12)
        assert not report.passed

    def test_single_edge(self):
        u = Quadratic(a=1.0, b=1.0, domain_lo=-2, domain_hi=2)
        A = np.array([[1.0, 2.0]])
        inst = make_instance([[u], [u]], [0.1], 0.0, A, [1.0])
        net = spanning_tree(2, [(0, 1)])
        sol = solve_centralized(inst)
        m = construct_ne_dist(inst, net, sol)
        np.testing.assert_allclose(m.n_summary[(0, 1)], [2.0 * sol.x[1, 0]])
        assert check_summary_consistency(inst, net, m, sol.x).passed


class TestDistAudits:
    def test_rebated_budget_balances(self, inst, network, dist_ne):
        assert abs(budget_report_dist(inst, network, dist_ne).rebated) <= 1e-9

    def test_rebate_uses_neighborhood_prices(self, inst, network, dist_ne, solution):
        view = neighborhood_slice(network, dist_ne, 0)
        share = float(solution.lam @ inst.constraint_rhs) / 3
        assert rebate_tax_dist(inst, network, view) == pytest.approx(
            tax_dist(inst, network, view).total - share, abs=1e-12)

    def test_individually_rational(self, inst, network, dist_ne):
        assert check_ir_dist(inst, network, dist_ne).passed
