"""
Dual learning of the centralized mechanism's equilibrium.

Users iterate projected gradient steps on the dual of the community problem
over the set of proper prices

    P = {lt >= 0 : r_lo <= At' lt + pt <= r_hi, sum(mu) = p0},

with lt = (lambda, mu), At = [A; 1' (x) I_T] and pt = 1_N (x) p. Each user
recovers its own demand from the prices by inverting its marginal utility.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linprog

from mechanism.errors import (
    BoundViolation,
    DimensionMismatch,
    Infeasible,
    InvalidParameter,
    MaxActiveSetIters,
    NotStronglyConcave,
    ProjectionFailed,
    StepSizeTooLarge,
)
from mechanism.messages import CentralMessageProfile
from mechanism.model import (
    DOMAIN_TOL,
    Instance,
    demand_at_prices,
    sample_feasible_points,
    total_utility,
)
from mechanism.utils import label, logger

MAX_ACTIVE_SET_ITERS = 500
PROJECTION_KKT_TOL = 1e-10
MEMBERSHIP_TOL = 1e-9


def stacked_constraint_matrix(inst: Instance) -> np.ndarray:
    """At = [A; 1_N' (x) I_T], shape (L+T, N*T)."""
    peak_rows = np.kron(np.ones((1, inst.n_users)), np.eye(inst.horizon))
    return np.vstack([inst.constraint_matrix, peak_rows])


@dataclass(frozen=True, eq=False)
class PriceSet:
    """
    Polytope of proper prices (lambda, mu).

    The projection works on the description G z <= h, E z = e, built once
    here. `anchor` is a member found by linear programming at construction.
    """
    A_tilde: np.ndarray
    p_tilde: np.ndarray
    r_lo: np.ndarray
    r_hi: np.ndarray
    p0: float
    n_rows: int
    horizon: int
    G: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    E: np.ndarray = field(repr=False)
    e: np.ndarray = field(repr=False)
    anchor: np.ndarray = field(repr=False)

    @property
    def dimension(self) -> int:
        return self.n_rows + self.horizon

    def split(self, point) -> Tuple[np.ndarray, np.ndarray]:
        point = np.asarray(point, dtype=float)
        return point[:self.n_rows], point[self.n_rows:]

    def membership(self, point, tol: float = MEMBERSHIP_TOL) -> bool:
        point = np.asarray(point, dtype=float)
        if point.size != self.dimension:
            raise DimensionMismatch(f"Price vector has {point.size} entries, expected {self.dimension}")
        if np.any(point < -tol):
            return False
        prices = self.A_tilde.T @ point + self.p_tilde
        if np.any(prices < self.r_lo - tol) or np.any(prices > self.r_hi + tol):
            return False
        return abs(point[self.n_rows:].sum() - self.p0) <= tol


def build_price_set(inst: Instance, r_lo=None, r_hi=None) -> PriceSet:
    """
    Build the proper-price polytope of an instance.

    Args:
        inst: Instance
        r_lo: Lower marginal-utility bounds, N x T (default: v'(domain_hi))
        r_hi: Upper marginal-utility bounds, N x T (default: v'(domain_lo))

    Returns:
        Nonempty PriceSet
    """
    N, T, L = inst.n_users, inst.horizon, inst.n_constraints
    ranges = np.array([[u.price_range() for u in row] for row in inst.utilities])
    r_lo = ranges[:, :, 0].ravel() if r_lo is None else np.asarray(r_lo, dtype=float).ravel()
    r_hi = ranges[:, :, 1].ravel() if r_hi is None else np.asarray(r_hi, dtype=float).ravel()
    if r_lo.size != N * T or r_hi.size != N * T:
        raise DimensionMismatch(f"Derivative bounds need {N * T} entries")
    if not (np.all(np.isfinite(r_lo)) and np.all(np.isfinite(r_hi))):
        raise InvalidParameter("Derivative bounds must be finite")
    if np.any(r_lo > r_hi):
        raise InvalidParameter("Lower derivative bound exceeds upper bound")

    A_tilde = stacked_constraint_matrix(inst)
    p_tilde = np.tile(inst.unit_prices, N)
    dim = L + T
    G = np.vstack([-np.eye(dim), A_tilde.T, -A_tilde.T])
    h = np.concatenate([np.zeros(dim), r_hi - p_tilde, p_tilde - r_lo])
    E = np.concatenate([np.zeros(L), np.ones(T)]).reshape(1, dim)
    e = np.array([inst.peak_price])

    res = linprog(np.zeros(dim), A_ub=G[dim:], b_ub=h[dim:], A_eq=E, b_eq=e,
                  bounds=[(0, None)] * dim, method='highs',
                  options={'primal_feasibility_tolerance': 1e-10})
    if res.status != 0:
        raise Infeasible(f"Price set is empty for the given derivative bounds ({res.message})")

    logger.debug(f"Price set built: {dim} prices, {G.shape[0]} inequalities")
    return PriceSet(A_tilde=A_tilde, p_tilde=p_tilde, r_lo=r_lo, r_hi=r_hi, p0=inst.peak_price,
                    n_rows=L, horizon=T, G=G, h=h, E=E, e=e, anchor=np.asarray(res.x, dtype=float))


def _solve_kkt(C: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    n = C.shape[1]
    m = C.shape[0]
    K = np.block([[np.eye(n), C.T], [C, np.zeros((m, m))]])
    try:
        return np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(K, rhs, rcond=None)[0]


def _active_set_projection(P: PriceSet, z: np.ndarray, start: np.ndarray,
                           working: Sequence[int]) -> Tuple[np.ndarray, List[int], np.ndarray, np.ndarray]:
    """Primal active-set method for min 0.5||x - z||^2 s.t. Gx <= h, Ex = e."""
    G, h, E, e = P.G, P.h, P.E, P.e
    n, m_eq = z.size, E.shape[0]
    x = start.copy()
    W = [j for j in working if h[j] - G[j] @ x <= 1e-12 * (1.0 + abs(h[j]))]
    scale = 1.0 + max(np.abs(z).max(initial=0.0), np.abs(x).max(initial=0.0))

    for _ in range(MAX_ACTIVE_SET_ITERS):
        C = np.vstack([E, G[W]]) if W else E
        d = np.concatenate([e, h[W]])
        sol = _solve_kkt(C, np.concatenate([z - x, d - C @ x]))
        p, nu = sol[:n], sol[n:]
        mult = nu[m_eq:]

        if np.abs(p).max() <= 1e-13 * scale:
            if not W or mult.min() >= -1e-12 * scale:
                lam = np.zeros(G.shape[0])
                lam[W] = mult
                return x, W, lam, nu[:m_eq]
            W.pop(int(np.argmin(mult)))
            continue

        Gp = G @ p
        slack = np.maximum(h - G @ x, 0.0)
        in_w = set(W)
        step, blocking = 1.0, None
        threshold = 1e-14 * np.abs(p).max()
        for j in np.flatnonzero(Gp > threshold):
            if j in in_w:
                continue
            ratio = slack[j] / Gp[j]
            if ratio < step:
                step, blocking = ratio, int(j)
        x = x + step * p
        if blocking is not None:
            W.append(blocking)

    raise MaxActiveSetIters(f"Projection did not settle within {MAX_ACTIVE_SET_ITERS} active-set iterations")


def _verify_projection(P: PriceSet, z, x, lam, nu_eq) -> float:
    """Largest KKT residual of a computed projection."""
    slack = P.h - P.G @ x
    residuals = [
        max(0.0, -slack.min()),
        np.abs(P.E @ x - P.e).max(),
        max(0.0, -lam.min(initial=0.0)),
        np.abs(x - z + P.G.T @ lam + P.E.T @ nu_eq).max(),
        np.abs(lam * slack).max(initial=0.0),
    ]
    return float(max(residuals))


def _project(P: PriceSet, point: np.ndarray, start: Optional[np.ndarray] = None,
             working: Sequence[int] = ()) -> Tuple[np.ndarray, List[int]]:
    z = np.asarray(point, dtype=float)
    if z.size != P.dimension:
        raise DimensionMismatch(f"Price vector has {z.size} entries, expected {P.dimension}")
    if P.membership(z, tol=1e-12):
        return z.copy(), list(working)
    start = P.anchor if start is None else np.asarray(start, dtype=float)
    x, W, lam, nu_eq = _active_set_projection(P, z, start, working)
    tol = PROJECTION_KKT_TOL * (1.0 + np.abs(z).max())
    residual = _verify_projection(P, z, x, lam, nu_eq)
    if residual > tol:
        raise ProjectionFailed(f"Projection KKT residual {residual:.3e} exceeds {tol:.3e}")
    return x, W


def project_onto_price_set(P: PriceSet, point, start=None) -> np.ndarray:
    """
    Euclidean projection onto the price set.

    Args:
        P: PriceSet
        point: Vector (lambda, mu) of length L+T
        start: Optional feasible warm start (default: P.anchor)

    Returns:
        Projected vector
    """
    return _project(P, point, start)[0]


def effective_prices(inst: Instance, lam_tilde, P: Optional[PriceSet] = None) -> np.ndarray:
    """pi = pt + At' lt as an N x T matrix."""
    A_tilde = P.A_tilde if P is not None else stacked_constraint_matrix(inst)
    p_tilde = P.p_tilde if P is not None else np.tile(inst.unit_prices, inst.n_users)
    lam_tilde = np.asarray(lam_tilde, dtype=float)
    if lam_tilde.size != A_tilde.shape[0]:
        raise DimensionMismatch(f"Price vector has {lam_tilde.size} entries, expected {A_tilde.shape[0]}")
    return (p_tilde + A_tilde.T @ lam_tilde).reshape(inst.n_users, inst.horizon)


def demand_response(inst: Instance, lam_tilde, P: Optional[PriceSet] = None) -> np.ndarray:
    """Demand x_t^i = (v_t^i')^{-1}(pi_t^i) at prices lt."""
    return demand_at_prices(inst, effective_prices(inst, lam_tilde, P))


def _dual_terms(inst: Instance, lam_tilde, P: Optional[PriceSet]) -> Tuple[float, np.ndarray, np.ndarray]:
    lam_tilde = np.asarray(lam_tilde, dtype=float)
    prices = effective_prices(inst, lam_tilde, P)
    x = demand_at_prices(inst, prices)
    L = inst.n_constraints
    value = float(inst.constraint_rhs @ lam_tilde[:L] + total_utility(inst, x) - np.sum(prices * x))
    gradient = np.concatenate([inst.constraint_rhs - inst.constraint_matrix @ x.ravel(), -x.sum(axis=0)])
    return value, gradient, x


def dual_value(inst: Instance, lam_tilde, P: Optional[PriceSet] = None) -> float:
    """D(lt) = b'lambda + sum over (i,t) of [v(x) - pi x] at the demand response x."""
    return _dual_terms(inst, lam_tilde, P)[0]


def dual_gradient(inst: Instance, lam_tilde, P: Optional[PriceSet] = None) -> np.ndarray:
    """Gradient of D: (b - Ax, -sum_i x_t)."""
    return _dual_terms(inst, lam_tilde, P)[1]


def spectral_norm(M, tol: float = 1e-10, max_iters: int = 10000) -> float:
    """Largest singular value by power iteration on M'M."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0 or not np.any(M):
        return 0.0
    v = np.random.default_rng(0).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iters):
        w = M.T @ (M @ v)
        norm_w = np.linalg.norm(w)
        v = w / norm_w
        estimate = math.sqrt(norm_w)
        if abs(estimate - sigma) <= tol * max(1.0, estimate):
            break
        sigma = estimate
    return float(np.linalg.norm(M @ v))


def strong_concavity_parameter(inst: Instance) -> float:
    """
    Strong-concavity constant of the separable community objective: the
    smallest curvature floor over all (user, slot) utilities.
    """
    floors = [u.curvature_floor() for row in inst.utilities for u in row]
    delta = float(min(floors))
    if not delta > 0:
        raise NotStronglyConcave("Some utility has zero curvature on its domain")
    return delta


def step_size_bounds(inst: Instance, P: Optional[PriceSet] = None) -> Tuple[float, float]:
    """(delta'/||At||, 2 delta'/||At||): strict and loose step-size limits."""
    A_tilde = P.A_tilde if P is not None else stacked_constraint_matrix(inst)
    strict = strong_concavity_parameter(inst) / spectral_norm(A_tilde)
    return strict, 2.0 * strict


@dataclass
class DerivativeBoundsReport:
    passed: bool
    samples_checked: int
    min_margin: float


def _violation(inst: Instance, x: np.ndarray, r_lo: np.ndarray, r_hi: np.ndarray):
    for i, row in enumerate(inst.utilities):
        for t, u in enumerate(row):
            slope = u.derivative(x[i, t])
            k = inst.flat_index(i, t)
            tol = DOMAIN_TOL * (1.0 + abs(slope))
            if slope < r_lo[k] - tol or slope > r_hi[k] + tol:
                return i, t, slope
    return None


def validate_derivative_bounds(inst: Instance, r_lo, r_hi, samples: int = 1000,
                               seed: int = 0) -> DerivativeBoundsReport:
    """
    Check that [r_lo, r_hi] brackets every feasible marginal utility and that
    every price in it is a marginal utility of some demand in the domain.

    Feasible extremes come from linear programs per coordinate; sampled
    feasible points are checked as well.

    Args:
        inst: Instance
        r_lo: Lower bounds, N x T
        r_hi: Upper bounds, N x T
        samples: Number of sampled feasible points
        seed: Sampler seed

    Returns:
        DerivativeBoundsReport (raises BoundViolation with a witness on failure)
    """
    N, T = inst.n_users, inst.horizon
    r_lo = np.asarray(r_lo, dtype=float).ravel()
    r_hi = np.asarray(r_hi, dtype=float).ravel()
    if r_lo.size != N * T or r_hi.size != N * T:
        raise DimensionMismatch(f"Derivative bounds need {N * T} entries")
    if not (np.all(np.isfinite(r_lo)) and np.all(np.isfinite(r_hi))):
        raise InvalidParameter("Derivative bounds must be finite")

    dom_lo, dom_hi = inst.domain_bounds()
    n = N * T
    extremes = []
    for k in range(n):
        for sign in (1.0, -1.0):
            c = np.zeros(n)
            c[k] = sign
            if inst.n_constraints:
                res = linprog(c, A_ub=inst.constraint_matrix, b_ub=inst.constraint_rhs,
                              bounds=list(zip(dom_lo.ravel(), dom_hi.ravel())), method='highs')
                if res.status == 3:
                    continue
                if res.status != 0:
                    raise Infeasible(f"Feasible region LP failed: {res.message}")
                point = res.x
            else:
                point = np.where(c > 0, dom_lo.ravel(), dom_hi.ravel())
            extremes.append(np.clip(point, dom_lo.ravel(), dom_hi.ravel()).reshape(N, T))

    checked = 0
    candidates = extremes
    if samples > 0:
        candidates = extremes + list(sample_feasible_points(inst, samples, np.random.default_rng(seed)).reshape(-1, N, T))
    for x in candidates:
        hit = _violation(inst, x, r_lo, r_hi)
        checked += 1
        if hit is not None:
            i, t, slope = hit
            raise BoundViolation(
                f"Marginal utility {slope:.6g} of {label('v', i, t)} at demand {x[i, t]:.6g} "
                f"is outside [{r_lo[inst.flat_index(i, t)]:.6g}, {r_hi[inst.flat_index(i, t)]:.6g}]",
                witness=x, user=i, slot=t)

    margins = []
    for i, row in enumerate(inst.utilities):
        for t, u in enumerate(row):
            k = inst.flat_index(i, t)
            p_lo, p_hi = u.price_range()
            tol = DOMAIN_TOL * (1.0 + max(abs(p_lo), abs(p_hi)))
            if r_lo[k] < p_lo - tol or r_hi[k] > p_hi + tol:
                raise BoundViolation(
                    f"Prices [{r_lo[k]:.6g}, {r_hi[k]:.6g}] for {label('v', i, t)} are not all "
                    f"marginal utilities on its domain [{u.domain_lo}, {u.domain_hi}]",
                    user=i, slot=t)
            margins.extend([r_lo[k] - p_lo, p_hi - r_hi[k]])

    logger.info(f"Derivative bounds hold on {checked} feasible points")
    return DerivativeBoundsReport(passed=True, samples_checked=checked, min_margin=float(min(margins)))


@dataclass(frozen=True)
class LearningConfig:
    alpha: Optional[float] = None
    max_iters: int = 100
    stop_tol: float = 0.0


@dataclass
class LearningTrace:
    """Per-iteration record of the learning run, k = 0 .. termination."""
    alpha: float
    n_users: int
    horizon: int
    n_constraints: int
    q: List[np.ndarray] = field(default_factory=list)
    s: List[np.ndarray] = field(default_factory=list)
    y: List[np.ndarray] = field(default_factory=list)
    dist_to_opt: List[float] = field(default_factory=list)
    dual_value: List[float] = field(default_factory=list)
    price_spread: List[float] = field(default_factory=list)
    stop_reason: str = ''

    def __len__(self) -> int:
        return len(self.q)

    def to_frame(self) -> pd.DataFrame:
        """Columns: k, q_l, s_t, y_i_t, dist_to_opt, dual_value (1-based labels)."""
        data = {'k': np.arange(len(self.q))}
        q = np.array(self.q).reshape(len(self.q), self.n_constraints)
        s = np.array(self.s).reshape(len(self.s), self.horizon)
        y = np.array(self.y).reshape(len(self.y), self.n_users, self.horizon)
        for l in range(self.n_constraints):
            data[label('q', l)] = q[:, l]
        for t in range(self.horizon):
            data[label('s', t)] = s[:, t]
        for i in range(self.n_users):
            for t in range(self.horizon):
                data[label('y', i, t)] = y[:, i, t]
        data['dist_to_opt'] = self.dist_to_opt
        data['dual_value'] = self.dual_value
        return pd.DataFrame(data)


def learn(inst: Instance, P: PriceSet, cfg: LearningConfig = LearningConfig(),
          start=None, reference=None) -> Tuple[CentralMessageProfile, LearningTrace]:
    """
    Run the dual learning algorithm.

    Every user keeps its own copy of the prices (q^i, s^i) and applies the
    same update: a gradient step on the dual function followed by projection
    onto P, then a demand update from its own prices. On exit each user's
    proxy is set to the demand of the next user.

    Args:
        inst: Instance
        P: Price set of the instance
        cfg: Step size (default delta'/||At||), iteration cap, stop tolerance
        start: Initial prices (default: projection of the origin)
        reference: Optional CentralSolution for the distance-to-optimum column

    Returns:
        (final message profile, LearningTrace)
    """
    strict, loose = step_size_bounds(inst, P)
    alpha = strict if cfg.alpha is None else float(cfg.alpha)
    if not alpha > 0:
        raise InvalidParameter(f"Step size must be positive, got {alpha}")
    if cfg.max_iters < 0:
        raise InvalidParameter(f"Iteration count must be nonnegative, got {cfg.max_iters}")
    if alpha > loose:
        warnings.warn(StepSizeTooLarge(
            f"Step size {alpha:g} exceeds 2*delta'/||At|| = {loose:.4g}; convergence is not guaranteed"))
    elif alpha > strict:
        logger.warning(f"Step size {alpha:g} exceeds delta'/||At|| = {strict:.4g}")

    N, L = inst.n_users, inst.n_constraints
    A, b = inst.constraint_matrix, inst.constraint_rhs
    origin = np.zeros(P.dimension) if start is None else np.asarray(start, dtype=float)
    initial, initial_w = _project(P, origin)
    prices = [initial.copy() for _ in range(N)]
    working = [list(initial_w) for _ in range(N)]
    target = None
    if reference is not None:
        target = np.concatenate([reference.lam, reference.mu])

    def user_demands(price_list):
        return np.vstack([demand_response(inst, price_list[i], P)[i] for i in range(N)])

    trace = LearningTrace(alpha=alpha, n_users=N, horizon=inst.horizon, n_constraints=L)

    def record(y):
        lead = prices[0]
        trace.q.append(lead[:L].copy())
        trace.s.append(lead[L:].copy())
        trace.y.append(y.copy())
        trace.dist_to_opt.append(float(np.linalg.norm(lead - target)) if target is not None else math.nan)
        trace.dual_value.append(dual_value(inst, lead, P))
        trace.price_spread.append(float(max(np.abs(p - lead).max(initial=0.0) for p in prices)))

    y = user_demands(prices)
    record(y)
    logger.info(f"Learning: alpha={alpha:g}, K={cfg.max_iters}, N={N}, L={L}, T={inst.horizon}")

    trace.stop_reason = 'max_iters'
    for k in range(1, cfg.max_iters + 1):
        load_gap = b - A @ y.ravel()
        slot_load = y.sum(axis=0)
        updated = []
        for i in range(N):
            stepped = np.concatenate([prices[i][:L] - alpha * load_gap, prices[i][L:] + alpha * slot_load])
            proj, working[i] = _project(P, stepped, start=prices[i], working=working[i])
            updated.append(proj)
        y_next = user_demands(updated)
        change = math.sqrt(sum(float(np.sum((u - p) ** 2)) for u, p in zip(updated, prices))
                           + float(np.sum((y_next - y) ** 2)))
        prices, y = updated, y_next
        record(y)
        logger.debug(f"k={k}: change={change:.3e}, dual={trace.dual_value[-1]:.10g}")
        if change <= cfg.stop_tol:
            trace.stop_reason = 'stalled'
            break

    logger.info(f"Learning stopped after {len(trace) - 1} iterations ({trace.stop_reason}); "
                f"dual value {trace.dual_value[-1]:.10g}")
    profile = CentralMessageProfile(
        y=y,
        q=np.vstack([p[:L] for p in prices]).reshape(N, L),
        s=np.vstack([p[L:] for p in prices]),
        beta=np.roll(y, -1, axis=0),
    )
    return profile, trace
