"""
Ground-truth solver for the community problem in epigraph form:

    max  sum_i v^i(x^i) - sum_t p_t sum_i x_t^i - p0 * w
    s.t. Ax <= b,  sum_i x_t^i <= w  for all t.

The solver minimizes the dual over the proper-price set with projected
gradient steps (the same kernels the learning algorithm uses) and recovers the
primal demand from the prices. Near the optimum the active face is fixed and
its KKT equations are solved by Newton's method; the solver stops once the
KKT conditions verify.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from mechanism.errors import DimensionMismatch, NotConverged
from mechanism.learning import PriceSet, _dual_terms, _project, build_price_set
from mechanism.model import Instance, total_utility
from mechanism.utils import get_settings, label, logger

MAX_BACKTRACKS = 60
# Newton polish of the active face, tried once the gradient phase is close
POLISH_FROM = 1e-3
POLISH_EVERY = 25
POLISH_SELECT = (1e1, 1e3)
NEWTON_ITERS = 50
NEWTON_TOL = 1e-15


@dataclass(frozen=True)
class OracleConfig:
    tol: float = 1e-8
    max_iters: int = 200000
    initial_step: float = 1.0

    @classmethod
    def from_settings(cls) -> 'OracleConfig':
        settings = get_settings()
        return cls(tol=settings.oracle_tol, max_iters=settings.oracle_max_iters)


@dataclass
class KktReport:
    primal_residual: float
    dual_residual: float
    comp_slackness: float
    stationarity_residual: float
    tol: float
    passed: bool

    @property
    def max_residual(self) -> float:
        return max(self.primal_residual, self.dual_residual, self.comp_slackness, self.stationarity_residual)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'check': ['primal_residual', 'dual_residual', 'comp_slackness', 'stationarity_residual'],
            'residual': [self.primal_residual, self.dual_residual, self.comp_slackness,
                         self.stationarity_residual],
            'tol': self.tol,
            'passed': [self.primal_residual <= self.tol, self.dual_residual <= self.tol,
                       self.comp_slackness <= self.tol, self.stationarity_residual <= self.tol],
        })


@dataclass
class CentralSolution:
    """Primal demand x (N x T), peak w, constraint prices lam (L) and peak prices mu (T)."""
    x: np.ndarray
    w: float
    lam: np.ndarray
    mu: np.ndarray
    iterations: int = 0
    report: Optional[KktReport] = None

    @property
    def prices(self) -> np.ndarray:
        return np.concatenate([self.lam, self.mu])

    def to_frame(self) -> pd.DataFrame:
        rows = []
        n_users, horizon = self.x.shape
        for i in range(n_users):
            for t in range(horizon):
                rows.append(('x', label('x', i, t), self.x[i, t]))
        rows.append(('w', 'w', self.w))
        for l, value in enumerate(self.lam):
            rows.append(('lambda', label('lambda', l), value))
        for t, value in enumerate(self.mu):
            rows.append(('mu', label('mu', t), value))
        return pd.DataFrame(rows, columns=['quantity', 'label', 'value'])


def lift_to_epigraph(x) -> Tuple[np.ndarray, float]:
    """Pair a demand matrix with its peak load w = max_t sum_i x_t^i."""
    x = np.asarray(x, dtype=float)
    return x, float(x.sum(axis=0).max())


def epigraph_objective(inst: Instance, x, w: float) -> float:
    """Objective of the epigraph problem at (x, w)."""
    x = inst.as_demand(x)
    return total_utility(inst, x) - float(inst.unit_prices @ x.sum(axis=0)) - inst.peak_price * w


def check_kkt(inst: Instance, sol: CentralSolution, tol: float) -> KktReport:
    """
    Residuals of the KKT system of the epigraph problem.

    Args:
        inst: Instance
        sol: Candidate primal/dual solution
        tol: Pass threshold applied to every residual group

    Returns:
        KktReport
    """
    x = np.asarray(sol.x, dtype=float)
    lam = np.asarray(sol.lam, dtype=float).ravel()
    mu = np.asarray(sol.mu, dtype=float).ravel()
    if x.shape != (inst.n_users, inst.horizon) or lam.size != inst.n_constraints or mu.size != inst.horizon:
        raise DimensionMismatch("Solution dimensions do not match the instance")

    load = x.sum(axis=0)
    row_slack = inst.constraint_rhs - inst.constraint_matrix @ x.ravel()
    peak_slack = sol.w - load

    primal = max(0.0, -row_slack.min(initial=0.0), -peak_slack.min())
    dual = max(0.0, -lam.min(initial=0.0), -mu.min())
    comp = max(np.abs(lam * row_slack).max(initial=0.0), np.abs(mu * peak_slack).max())

    slopes = np.array([[u.raw_derivative(x[i, t]) for t, u in enumerate(row)]
                       for i, row in enumerate(inst.utilities)])
    constraint_price = (inst.constraint_matrix.T @ lam).reshape(inst.n_users, inst.horizon)
    stationarity = np.abs(slopes - inst.unit_prices - constraint_price - mu).max()
    stationarity = max(float(stationarity), abs(inst.peak_price - mu.sum()))
    if math.isnan(stationarity):
        stationarity = math.inf

    passed = max(primal, dual, comp, stationarity) <= tol
    return KktReport(primal_residual=float(primal), dual_residual=float(dual),
                     comp_slackness=float(comp), stationarity_residual=float(stationarity),
                     tol=tol, passed=bool(passed))


def _recover(inst: Instance, lam_tilde: np.ndarray, x: np.ndarray) -> CentralSolution:
    L = inst.n_constraints
    _, w = lift_to_epigraph(x)
    return CentralSolution(x=x, w=w, lam=lam_tilde[:L].copy(), mu=lam_tilde[L:].copy())


def _polish(inst: Instance, sol: CentralSolution, select_tol: float) -> Optional[CentralSolution]:
    """
    Newton's method on the KKT equations of the active face.

    Rows with lam > select_tol or slack <= select_tol are held at equality,
    as are the slots with mu > select_tol or load within select_tol of the
    peak. Unknowns are (x, lam_W, mu_S, w). Returns None when the Jacobian is
    singular or the iterate leaves the utility domains; the caller decides
    with check_kkt whether the result is a KKT point.
    """
    N, T = inst.n_users, inst.horizon
    A, b = inst.constraint_matrix, inst.constraint_rhs
    n = N * T
    x0 = np.asarray(sol.x, dtype=float).ravel()
    load = sol.x.sum(axis=0)
    W = np.flatnonzero((sol.lam > select_tol) | (b - A @ x0 <= select_tol))
    S = np.flatnonzero((sol.mu > select_tol) | (load >= load.max() - select_tol))
    A_W = A[W]
    B_S = np.kron(np.ones((1, N)), np.eye(T))[S]
    k_w, k_s = W.size, S.size
    unit = np.tile(inst.unit_prices, N)
    utilities = [u for row in inst.utilities for u in row]

    def residual(z):
        x, lam_w, mu_s, w = z[:n], z[n:n + k_w], z[n + k_w:n + k_w + k_s], z[-1]
        slopes = np.array([u.raw_derivative(v) for u, v in zip(utilities, x)])
        return np.concatenate([
            slopes - unit - A_W.T @ lam_w - B_S.T @ mu_s,
            A_W @ x - b[W],
            B_S @ x - w,
            [mu_s.sum() - inst.peak_price],
        ])

    def jacobian(z):
        curvature = np.array([u.raw_second_derivative(v) for u, v in zip(utilities, z[:n])])
        J = np.zeros((n + k_w + k_s + 1, n + k_w + k_s + 1))
        J[:n, :n] = np.diag(curvature)
        J[:n, n:n + k_w] = -A_W.T
        J[:n, n + k_w:n + k_w + k_s] = -B_S.T
        J[n:n + k_w, :n] = A_W
        J[n + k_w:n + k_w + k_s, :n] = B_S
        J[n + k_w:n + k_w + k_s, -1] = -1.0
        J[-1, n + k_w:n + k_w + k_s] = 1.0
        return J

    z = np.concatenate([x0, sol.lam[W], sol.mu[S], [float(load.max())]])
    r = residual(z)
    norm = float(np.abs(r).max())
    if not math.isfinite(norm):
        return None
    for _ in range(NEWTON_ITERS):
        if norm <= NEWTON_TOL:
            break
        try:
            dz = np.linalg.solve(jacobian(z), -r)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(dz)):
            return None
        t = 1.0
        while t >= 1e-4:
            trial = z + t * dz
            r_trial = residual(trial)
            n_trial = float(np.abs(r_trial).max())
            if math.isfinite(n_trial) and n_trial < norm:
                break
            t /= 2.0
        else:
            break
        z, r, norm = trial, r_trial, n_trial

    x = z[:n].reshape(N, T)
    lo = np.array([[u.domain_lo for u in row] for row in inst.utilities])
    hi = np.array([[u.domain_hi for u in row] for row in inst.utilities])
    margin = 1e-9 * (1.0 + np.abs(x))
    if np.any(x < lo - margin) or np.any(x > hi + margin):
        return None
    x = np.clip(x, lo, hi)
    lam = np.zeros(inst.n_constraints)
    lam[W] = z[n:n + k_w]
    mu = np.zeros(T)
    mu[S] = z[n + k_w:n + k_w + k_s]
    _, w = lift_to_epigraph(x)
    return CentralSolution(x=x, w=w, lam=lam, mu=mu)


def _try_polish(inst: Instance, sol: CentralSolution, tol: float) -> Optional[CentralSolution]:
    for factor in POLISH_SELECT:
        polished = _polish(inst, sol, factor * sol.report.max_residual)
        if polished is None:
            continue
        polished.report = check_kkt(inst, polished, tol)
        polished.iterations = sol.iterations
        if polished.report.passed:
            return polished
    return None


def solve_centralized(inst: Instance, cfg: OracleConfig = OracleConfig(),
                      P: Optional[PriceSet] = None) -> CentralSolution:
    """
    Solve the community problem to KKT tolerance cfg.tol.

    Projected gradient on the dual with a backtracking step: a trial step is
    accepted when the dual value stays below its quadratic upper model; the
    step doubles after every accepted iteration. Once the max KKT residual is
    below POLISH_FROM, every POLISH_EVERY iterations the active face is
    polished by Newton. Gradient steps alone stall on degenerate faces, where
    a price bound and a constraint row are active together.

    Args:
        inst: Instance
        cfg: Tolerance and iteration cap
        P: Price set (default: built from the utility domains)

    Returns:
        CentralSolution passing check_kkt at cfg.tol
    """
    P = build_price_set(inst) if P is None else P
    lam, working = _project(P, np.zeros(P.dimension))
    value, grad, x = _dual_terms(inst, lam, P)
    step = cfg.initial_step
    best: Optional[CentralSolution] = None
    logger.info(f"Solving community problem: N={inst.n_users}, T={inst.horizon}, "
                f"L={inst.n_constraints}, tol={cfg.tol:g}")

    for it in range(cfg.max_iters + 1):
        sol = _recover(inst, lam, x)
        report = check_kkt(inst, sol, cfg.tol)
        sol.iterations, sol.report = it, report
        if best is None or report.max_residual < best.report.max_residual:
            best = sol
        if report.passed:
            logger.info(f"Converged after {it} iterations (max KKT residual {report.max_residual:.2e})")
            return sol
        if report.max_residual <= POLISH_FROM and it % POLISH_EVERY == 0:
            polished = _try_polish(inst, sol, cfg.tol)
            if polished is not None:
                logger.info(f"Converged after {it} iterations and a Newton polish "
                            f"(max KKT residual {polished.report.max_residual:.2e})")
                return polished
        if it == cfg.max_iters:
            break

        for _ in range(MAX_BACKTRACKS):
            trial, trial_working = _project(P, lam - step * grad, start=lam, working=working)
            delta = trial - lam
            trial_value, trial_grad, trial_x = _dual_terms(inst, trial, P)
            bound = value + grad @ delta + (delta @ delta) / (2.0 * step) + 1e-12 * (1.0 + abs(value))
            if trial_value <= bound:
                break
            step /= 2.0
        lam, working = trial, trial_working
        value, grad, x = trial_value, trial_grad, trial_x
        step *= 2.0
        if it % 1000 == 0:
            logger.debug(f"iteration {it}: dual={value:.12g}, max residual={report.max_residual:.2e}")

    if best.report.max_residual <= POLISH_FROM:
        polished = _try_polish(inst, best, cfg.tol)
        if polished is not None:
            logger.info(f"Converged by Newton polish of the best iterate "
                        f"(max KKT residual {polished.report.max_residual:.2e})")
            return polished
    logger.error(f"Oracle did not converge in {cfg.max_iters} iterations "
                 f"(best max residual {best.report.max_residual:.2e})")
    raise NotConverged(f"No KKT point within tol {cfg.tol:g} after {cfg.max_iters} iterations",
                       best=best, report=best.report)

