"""
The centralized mechanism.

Each user i reports demand y^i, constraint prices q^i, peak prices s^i and a
proxy beta^i for the demand of user (i+1) mod N. Users receive what they
request and pay a tax built from the other users' average prices, the
radial peak price and quadratic penalties that pin prices and proxies down
at equilibrium.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from mechanism.errors import KktFailed
from mechanism.messages import CentralMessageProfile
from mechanism.model import Instance, community_cost, user_utility
from mechanism.oracle import CentralSolution, check_kkt
from mechanism.utils import get_settings, label, logger

PEAK_TOL = 1e-9

__all__ = [
    'CentralMessageProfile', 'MessageAggregates', 'TaxBreakdown', 'radial_pricing', 'aggregates',
    'allocate', 'tax', 'tax_breakdown', 'payoff', 'construct_ne', 'NeConfig', 'NeReport', 'verify_ne',
    'BudgetReport', 'budget_report', 'rebate_tax', 'IrReport', 'check_ir', 'price_decomposition',
]


def radial_pricing(s_tilde, y_tilde, p0: float, peak_tol: float = PEAK_TOL) -> np.ndarray:
    """
    Normalize suggested peak prices so they sum to p0.

    With all suggestions zero, p0 is split equally over the slots whose
    load y_tilde is within peak_tol of the maximum.

    Args:
        s_tilde: Nonnegative suggested peak prices, length T
        y_tilde: Predicted slot loads, length T
        p0: Peak price
        peak_tol: Tie tolerance for the peak slots

    Returns:
        Nonnegative vector summing to p0
    """
    s_tilde = np.asarray(s_tilde, dtype=float)
    y_tilde = np.asarray(y_tilde, dtype=float)
    total = s_tilde.sum()
    if total > 0:
        out = p0 * (s_tilde / total)
    else:
        peak = y_tilde >= y_tilde.max() - peak_tol
        out = np.where(peak, p0 / peak.sum(), 0.0)
    if p0 > 0:
        # Put the rounding remainder on the largest entry.
        k = int(np.argmax(out))
        out[k] = max(0.0, p0 - (out.sum() - out[k]))
    return out


@dataclass
class MessageAggregates:
    s_minus: np.ndarray
    q_minus: np.ndarray
    zeta_minus: np.ndarray
    z_minus: float


def _aggregates(inst: Instance, y, q, s, beta, i: int) -> MessageAggregates:
    N = inst.n_users
    others = [j for j in range(N) if j != i]
    if others:
        s_minus = s[others].mean(axis=0)
        q_minus = q[others].mean(axis=0)
    else:
        s_minus = np.zeros(inst.horizon)
        q_minus = np.zeros(inst.n_constraints)
    zeta = y[others].sum(axis=0) + beta[(i - 1) % N]
    return MessageAggregates(s_minus=s_minus, q_minus=q_minus, zeta_minus=zeta, z_minus=float(zeta.max()))


def aggregates(inst: Instance, m: CentralMessageProfile, i: int) -> MessageAggregates:
    """Other users' average prices and the predicted load seen by user i."""
    m.check_against(inst.n_users, inst.horizon, inst.n_constraints)
    return _aggregates(inst, m.y, m.q, m.s, m.beta, i)


@dataclass
class TaxBreakdown:
    user: int
    cost: float
    pr_beta: float
    con_l: np.ndarray
    con_t: np.ndarray

    @property
    def total(self) -> float:
        return self.cost + self.pr_beta + float(self.con_l.sum()) + float(self.con_t.sum())

    def as_row(self) -> Dict[str, float]:
        row = {'user': self.user + 1, 'cost': self.cost, 'pr_beta': self.pr_beta}
        row.update({label('con_l', l): v for l, v in enumerate(self.con_l)})
        row.update({label('con_t', t): v for t, v in enumerate(self.con_t)})
        row['total'] = self.total
        return row


def _tax_parts(inst: Instance, y, q, s, beta, i: int) -> TaxBreakdown:
    N = inst.n_users
    agg = _aggregates(inst, y, q, s, beta, i)
    own = inst.user_block(i)
    rp = radial_pricing(agg.s_minus, agg.zeta_minus, inst.peak_price)
    rows = list(inst.user_constraints[i])
    cost = float((inst.unit_prices + rp) @ y[i])
    if rows:
        cost += float(agg.q_minus[rows] @ (own[rows] @ y[i]))

    pr_beta = float(np.sum((beta[i] - y[(i + 1) % N]) ** 2))

    A = inst.constraint_matrix
    others_load = A @ y.ravel() - own @ y[i]
    slack = inst.constraint_rhs - others_load - own @ beta[(i - 1) % N]
    con_l = (q[i] - agg.q_minus) ** 2 + q[i] * slack
    con_t = (s[i] - agg.s_minus) ** 2 + s[i] * (agg.z_minus - agg.zeta_minus)
    return TaxBreakdown(user=i, cost=cost, pr_beta=pr_beta, con_l=con_l, con_t=con_t)


def tax_breakdown(inst: Instance, m: CentralMessageProfile, i: int) -> TaxBreakdown:
    m.check_against(inst.n_users, inst.horizon, inst.n_constraints)
    return _tax_parts(inst, m.y, m.q, m.s, m.beta, i)


def tax(inst: Instance, m: CentralMessageProfile, i: int) -> float:
    return tax_breakdown(inst, m, i).total


def allocate(m: CentralMessageProfile) -> np.ndarray:
    """Users receive exactly the demand they report."""
    return np.array(m.y)


def _payoff(inst: Instance, y, q, s, beta, i: int) -> float:
    return user_utility(inst, i, y[i]) - _tax_parts(inst, y, q, s, beta, i).total


def payoff(inst: Instance, m: CentralMessageProfile, i: int) -> float:
    """Utility of the allocation minus the tax."""
    m.check_against(inst.n_users, inst.horizon, inst.n_constraints)
    return _payoff(inst, m.y, m.q, m.s, m.beta, i)


def construct_ne(inst: Instance, sol: CentralSolution, kkt_tol: float = 1e-6) -> CentralMessageProfile:
    """
    Equilibrium profile induced by an optimal solution: every user reports
    its optimal demand, the optimal multipliers as prices, and the next
    user's optimal demand as proxy.
    """
    report = check_kkt(inst, sol, kkt_tol)
    if not report.passed:
        raise KktFailed(f"Solution does not satisfy KKT at tol {kkt_tol:g} "
                        f"(max residual {report.max_residual:.3e})", report=report)
    N = inst.n_users
    x = np.asarray(sol.x, dtype=float)
    return CentralMessageProfile(
        y=x,
        q=np.tile(np.maximum(sol.lam, 0.0), (N, 1)).reshape(N, inst.n_constraints),
        s=np.tile(np.maximum(sol.mu, 0.0), (N, 1)),
        beta=np.roll(x, -1, axis=0),
    )


# --- Equilibrium probes ------------------------------------------------------

@dataclass(frozen=True)
class NeConfig:
    deviation_samples: int = 10000
    line_search_tol: float = 1e-12
    tol: float = 1e-7
    seed: int = 0

    @classmethod
    def from_settings(cls) -> 'NeConfig':
        settings = get_settings()
        return cls(deviation_samples=settings.deviation_samples, seed=settings.seed)


@dataclass(frozen=True)
class Coordinate:
    """One scalar component of a user's message."""
    label: str
    kind: str  # 'demand' | 'price' | 'free'
    lo: float = -math.inf
    hi: float = math.inf


@dataclass
class CoordinateProbe:
    user: int
    label: str
    current: float
    best_response: float
    improvement: float


@dataclass
class UserProbe:
    user: int
    max_coordinate_improvement: float
    worst_coordinate: str
    max_sample_improvement: float
    worst_sample: Optional[np.ndarray] = None

    @property
    def max_improvement(self) -> float:
        return max(self.max_coordinate_improvement, self.max_sample_improvement)


@dataclass
class NeReport:
    passed: bool
    max_improvement: float
    tol: float
    seed: int
    deviation_samples: int
    users: List[UserProbe] = field(default_factory=list)
    coordinates: List[CoordinateProbe] = field(default_factory=list)

    @property
    def best_response(self) -> Dict[str, float]:
        return {c.label: c.best_response for c in self.coordinates}

    @property
    def worst(self) -> CoordinateProbe:
        return max(self.coordinates, key=lambda c: c.improvement)

    def to_frame(self) -> pd.DataFrame:
        rows = [{'user': c.user + 1, 'coordinate': c.label, 'current': c.current,
                 'best_response': c.best_response, 'improvement': c.improvement}
                for c in self.coordinates]
        rows += [{'user': u.user + 1, 'coordinate': 'joint_random', 'current': math.nan,
                  'best_response': math.nan, 'improvement': u.max_sample_improvement}
                 for u in self.users]
        return pd.DataFrame(rows, columns=['user', 'coordinate', 'current', 'best_response', 'improvement'])


def _best_along(f: Callable[[float], float], c: Coordinate, current: float, f0: float,
                line_search_tol: float):
    if c.kind == 'demand':
        if not c.hi > c.lo:
            return c.lo, f(c.lo)
        res = minimize_scalar(lambda v: -f(v), bounds=(c.lo, c.hi), method='bounded',
                              options={'xatol': line_search_tol})
        candidates = [(float(res.x), -float(res.fun)), (c.lo, f(c.lo)), (c.hi, f(c.hi))]
        return max(candidates, key=lambda pair: pair[1])

    # Payoff is quadratic along price and free coordinates: fit a parabola
    # through current, current+1, current+2 and take its clipped vertex.
    f1, f2 = f(current + 1.0), f(current + 2.0)
    curvature = (f2 - 2.0 * f1 + f0) / 2.0
    slope = f1 - f0 - curvature
    candidates = [(current, f0), (current + 1.0, f1), (current + 2.0, f2)]
    if curvature < 0:
        vertex = min(max(current - slope / (2.0 * curvature), c.lo), c.hi)
        candidates.append((vertex, f(vertex)))
    return max(candidates, key=lambda pair: pair[1])


def probe_user(user: int, payoff_fn: Callable[[np.ndarray], float], base: np.ndarray,
               coords: Sequence[Coordinate], cfg: NeConfig,
               rng: np.random.Generator) -> tuple:
    """
    Search one user's unilateral deviations.

    Per-coordinate best responses (bounded scalar search for demands, exact
    parabola vertex for quadratic components) plus cfg.deviation_samples
    random joint perturbations with log-uniform scale in [1e-6, 1].

    Returns:
        (UserProbe, list of CoordinateProbe)
    """
    base = np.asarray(base, dtype=float)
    f0 = payoff_fn(base)
    probes: List[CoordinateProbe] = []
    for k, c in enumerate(coords):
        def along(v, k=k):
            trial = base.copy()
            trial[k] = v
            return payoff_fn(trial)
        best_v, best_f = _best_along(along, c, float(base[k]), f0, cfg.line_search_tol)
        probes.append(CoordinateProbe(user=user, label=c.label, current=float(base[k]),
                                      best_response=float(best_v), improvement=float(best_f - f0)))

    lo = np.array([c.lo for c in coords])
    hi = np.array([c.hi for c in coords])
    scales = 10.0 ** rng.uniform(-6.0, 0.0, size=cfg.deviation_samples)
    noise = rng.standard_normal((cfg.deviation_samples, len(coords)))
    best_sample, worst_sample = -math.inf, None
    for scale, direction in zip(scales, noise):
        trial = np.clip(base + scale * direction, lo, hi)
        gain = payoff_fn(trial) - f0
        if gain > best_sample:
            best_sample, worst_sample = gain, trial
    if cfg.deviation_samples == 0:
        best_sample = 0.0

    worst = max(probes, key=lambda p: p.improvement) if probes else None
    summary = UserProbe(user=user,
                        max_coordinate_improvement=worst.improvement if worst else 0.0,
                        worst_coordinate=worst.label if worst else '',
                        max_sample_improvement=float(best_sample),
                        worst_sample=worst_sample)
    return summary, probes


def run_probes(n_users: int, make_user_problem, cfg: NeConfig) -> NeReport:
    """
    Probe every user and reduce to a report. `make_user_problem(i)` returns
    (payoff_fn, base vector, coordinates) for user i. Each user draws from
    its own stream spawned from cfg.seed.
    """
    streams = np.random.SeedSequence(cfg.seed).spawn(n_users)
    users: List[UserProbe] = []
    coordinates: List[CoordinateProbe] = []
    for i in range(n_users):
        payoff_fn, base, coords = make_user_problem(i)
        summary, probes = probe_user(i, payoff_fn, base, coords, cfg, np.random.default_rng(streams[i]))
        users.append(summary)
        coordinates.extend(probes)
    worst = max(u.max_improvement for u in users) if users else 0.0
    report = NeReport(passed=bool(worst <= cfg.tol), max_improvement=float(worst), tol=cfg.tol,
                      seed=cfg.seed, deviation_samples=cfg.deviation_samples,
                      users=users, coordinates=coordinates)
    if report.passed:
        logger.info(f"NE verified: max improvement {worst:.3e} <= {cfg.tol:g}")
    else:
        logger.warning(f"NE check failed: {report.worst.label} improves payoff by {report.worst.improvement:.3e}")
    return report


def verify_ne(inst: Instance, m: CentralMessageProfile, cfg: NeConfig = NeConfig()) -> NeReport:
    """
    Numerical certificate that no user gains by deviating from m.

    Args:
        inst: Instance
        m: Message profile
        cfg: Sample count, line-search tolerance, pass tolerance, seed

    Returns:
        NeReport (passed iff the largest improvement found is <= cfg.tol)
    """
    m.check_against(inst.n_users, inst.horizon, inst.n_constraints)
    T, L = inst.horizon, inst.n_constraints
    y, q, s, beta = (np.array(a) for a in (m.y, m.q, m.s, m.beta))

    def make_user_problem(i):
        coords = (
            [Coordinate(label('y', i, t), 'demand', u.domain_lo, u.domain_hi)
             for t, u in enumerate(inst.utilities[i])]
            + [Coordinate(label('q', i, l), 'price', 0.0) for l in range(L)]
            + [Coordinate(label('s', i, t), 'price', 0.0) for t in range(T)]
            + [Coordinate(label('beta', i, t), 'free') for t in range(T)]
        )
        base = np.concatenate([y[i], q[i], s[i], beta[i]])

        def payoff_fn(vec):
            y2, q2, s2, b2 = y.copy(), q.copy(), s.copy(), beta.copy()
            y2[i], q2[i], s2[i], b2[i] = vec[:T], vec[T:T + L], vec[T + L:2 * T + L], vec[2 * T + L:]
            return _payoff(inst, y2, q2, s2, b2, i)
        return payoff_fn, base, coords

    return run_probes(inst.n_users, make_user_problem, cfg)


# --- Audits -------------------------------------------------------------------

@dataclass
class BudgetReport:
    gross: float
    rebated: float
    community_cost: float
    taxes: np.ndarray
    rebated_taxes: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({'user': np.arange(1, len(self.taxes) + 1),
                              'tax': self.taxes, 'rebated_tax': self.rebated_taxes})
        totals = pd.DataFrame([{'user': 'total', 'tax': self.taxes.sum(),
                                'rebated_tax': self.rebated_taxes.sum()}])
        return pd.concat([frame, totals], ignore_index=True)


def rebate_tax(inst: Instance, m: CentralMessageProfile, i: int) -> float:
    """Tax minus an equal share of the others' priced capacity, sum_l q^{-i,l} b^l / N."""
    agg = aggregates(inst, m, i)
    return tax(inst, m, i) - float(agg.q_minus @ inst.constraint_rhs) / inst.n_users


def _budget(inst: Instance, taxes: np.ndarray, rebated: np.ndarray, x: np.ndarray) -> BudgetReport:
    cost = community_cost(inst, x)
    return BudgetReport(gross=float(taxes.sum() - cost), rebated=float(rebated.sum() - cost),
                        community_cost=cost, taxes=taxes, rebated_taxes=rebated)


def budget_report(inst: Instance, m: CentralMessageProfile) -> BudgetReport:
    """Collected taxes minus community cost, before and after the rebate."""
    N = inst.n_users
    taxes = np.array([tax(inst, m, i) for i in range(N)])
    rebated = np.array([rebate_tax(inst, m, i) for i in range(N)])
    return _budget(inst, taxes, rebated, allocate(m))


@dataclass
class IrRecord:
    user: int
    payoff: float
    outside_option: float
    margin: float
    ok: bool


@dataclass
class IrReport:
    records: List[IrRecord]
    tol: float

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{'user': r.user + 1, 'payoff': r.payoff, 'outside_option': r.outside_option,
                              'margin': r.margin, 'ok': r.ok} for r in self.records])


def _ir(inst: Instance, payoffs: Sequence[float], tol: float) -> IrReport:
    records = []
    for i, value in enumerate(payoffs):
        outside = user_utility(inst, i, np.zeros(inst.horizon))
        records.append(IrRecord(user=i, payoff=float(value), outside_option=outside,
                                margin=float(value - outside), ok=bool(value >= outside - tol)))
    return IrReport(records=records, tol=tol)


def check_ir(inst: Instance, m: CentralMessageProfile, tol: float = 1e-9) -> IrReport:
    """Compare each user's payoff with the outside option v^i(0)."""
    return _ir(inst, [payoff(inst, m, i) for i in range(inst.n_users)], tol)


def price_decomposition(inst: Instance, m: CentralMessageProfile) -> pd.DataFrame:
    """
    Per (user, slot) aggregated unit price: unit price, radial peak price and
    the constraint price sum over l in L_i of q^{-i,l} a^{i,l}_t.
    """
    rows = []
    for i in range(inst.n_users):
        agg = aggregates(inst, m, i)
        rp = radial_pricing(agg.s_minus, agg.zeta_minus, inst.peak_price)
        own = inst.user_block(i)
        idx = list(inst.user_constraints[i])
        constraint_price = agg.q_minus[idx] @ own[idx] if idx else np.zeros(inst.horizon)
        for t, u in enumerate(inst.utilities[i]):
            unit = float(inst.unit_prices[t])
            rows.append({
                'user': i + 1, 'slot': t + 1, 'demand': float(m.y[i, t]),
                'unit_price': unit, 'peak_price': float(rp[t]),
                'constraint_price': float(constraint_price[t]),
                'aggregated_price': unit + float(rp[t]) + float(constraint_price[t]),
                'marginal_utility': float(u.raw_derivative(m.y[i, t])),
            })
    return pd.DataFrame(rows)
