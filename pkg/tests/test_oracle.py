"""Tests for the centralized solver and the KKT report."""

import time
from dataclasses import replace

import numpy as np
import pytest

from mechanism.errors import DimensionMismatch, NotConverged
from mechanism.model import Quadratic, make_instance, social_welfare
from mechanism.oracle import (
    CentralSolution,
    OracleConfig,
    check_kkt,
    epigraph_objective,
    lift_to_epigraph,
    solve_centralized,
)

from conftest import LAMBDA_SUM

ROUNDED_X = np.array([[-1.0, -0.5246], [-0.3410, 0.9508], [0.4885, 2.4263]])


class TestSolveCentralized:
    def test_demand_matches_worked_example(self, solution):
        np.testing.assert_allclose(solution.x, ROUNDED_X, atol=1e-3)

    def test_multipliers(self, solution):
        assert solution.lam[0] == pytest.approx(0.2056, abs=1e-3)
        assert solution.lam[6] == pytest.approx(1.1056, abs=1e-3)
        np.testing.assert_allclose(solution.lam[1:6], 0.0, atol=1e-8)
        np.testing.assert_allclose(solution.mu, [0.0, 0.05], atol=1e-6)

    def test_sum_multiplier_closed_form(self, solution):
        assert solution.lam[6] == pytest.approx(LAMBDA_SUM, abs=1e-8)

    def test_matches_exact_solution(self, solution, exact):
        np.testing.assert_allclose(solution.x, exact.x, atol=1e-8)

    def test_report_attached(self, solution):
        assert solution.report.passed
        assert solution.report.max_residual <= 1e-11

    def test_default_tolerance(self, inst):
        sol = solve_centralized(inst)
        assert check_kkt(inst, sol, 1e-8).passed

    def test_iteration_cap(self, inst):
        with pytest.raises(NotConverged) as info:
            solve_centralized(inst, OracleConfig(tol=1e-14, max_iters=0))
        assert info.value.best is not None
        assert info.value.report.max_residual > 1e-14

    @pytest.mark.parametrize('tol', [1e-8, 1e-11])
    def test_fixture_converges_quickly(self, inst, tol):
        # x11 = -1 sits on its row and on its domain bound at the optimum
        start = time.perf_counter()
        sol = solve_centralized(inst, OracleConfig(tol=tol))
        assert time.perf_counter() - start < 5.0
        assert sol.report.passed
        assert sol.report.max_residual <= tol
        np.testing.assert_allclose(sol.x, ROUNDED_X, atol=1e-3)

    def test_bound_and_row_active_together(self):
        # x >= -1 binds and the price p - lam equals v'(-1) = 2
        u = Quadratic(a=1.0, b=1.0, domain_lo=-1, domain_hi=3)
        inst = make_instance([[u]], [2.5], 0.0, [[-1.0]], [1.0])
        sol = solve_centralized(inst, OracleConfig(tol=1e-11))
        assert sol.x[0, 0] == pytest.approx(-1.0, abs=1e-11)
        assert sol.lam[0] == pytest.approx(0.5, abs=1e-10)

    def test_unconstrained_quadratic(self):
        # Optimum of a - x per slot with p = 0.5 and p0 = 0 is x = a - 0.5
        u = Quadratic(a=1.0, b=1.0, domain_lo=-3, domain_hi=3)
        inst = make_instance([[u, u]], [0.5, 0.5], 0.0)
        sol = solve_centralized(inst)
        np.testing.assert_allclose(sol.x, [[0.5, 0.5]], atol=1e-8)


class TestCheckKkt:
    def test_exact_solution_passes(self, inst, exact):
        assert check_kkt(inst, exact, 1e-6).passed

    def test_removed_multiplier_shows_in_stationarity(self, inst, exact):
        lam = exact.lam.copy()
        lam[6] = 0.0
        report = check_kkt(inst, replace(exact, lam=lam), 1e-6)
        assert not report.passed
        assert report.stationarity_residual == pytest.approx(LAMBDA_SUM, abs=1e-6)

    @pytest.mark.parametrize('index', range(9))
    def test_any_multiplier_perturbation_fails(self, inst, solution, index):
        prices = solution.prices.copy()
        prices[index] += 1e-2
        sol = replace(solution, lam=prices[:7], mu=prices[7:])
        assert not check_kkt(inst, sol, 1e-6).passed

    def test_stationary_zero_point(self):
        # v'(0) = 1 = p + mu with all of p0 on slot 1
        u = Quadratic(a=1.0, b=1.0, domain_lo=-2, domain_hi=2)
        inst = make_instance([[u]], [0.75], 0.25)
        sol = CentralSolution(x=np.zeros((1, 1)), w=0.0, lam=np.zeros(0), mu=np.array([0.25]))
        assert check_kkt(inst, sol, 1e-12).passed

    def test_dimension_mismatch(self, inst, exact):
        with pytest.raises(DimensionMismatch):
            check_kkt(inst, replace(exact, mu=np.zeros(3)), 1e-6)

    def test_report_frame(self, inst, exact):
        frame = check_kkt(inst, exact, 1e-6).to_frame()
        assert list(frame['check']) == ['primal_residual', 'dual_residual', 'comp_slackness',
                                        'stationarity_residual']
        assert frame['passed'].all()


class TestEpigraph:
    def test_peak_of_optimum(self, exact):
        _, w = lift_to_epigraph(exact.x)
        assert w == pytest.approx(2.8525, abs=1e-4)

    def test_zero_demand(self):
        _, w = lift_to_epigraph(np.zeros((2, 3)))
        assert w == 0.0

    def test_objective_equals_welfare(self, inst, solution):
        x, w = lift_to_epigraph(solution.x)
        assert epigraph_objective(inst, x, w) == pytest.approx(social_welfare(inst, x), abs=1e-12)

    def test_raising_peak_lowers_objective(self, inst, solution):
        x, w = lift_to_epigraph(solution.x)
        assert epigraph_objective(inst, x, w + 0.1) < epigraph_objective(inst, x, w)

    def test_lowering_peak_breaks_feasibility(self, inst, solution):
        x, w = lift_to_epigraph(solution.x)
        report = check_kkt(inst, replace(solution, w=w - 0.1), 1e-6)
        assert report.primal_residual == pytest.approx(0.1, abs=1e-9)

    def test_solution_frame_labels(self, solution):
        frame = solution.to_frame()
        assert 'x_3_2' in set(frame['label'])
        assert 'lambda_7' in set(frame['label'])
        assert len(frame) == 6 + 1 + 7 + 2
