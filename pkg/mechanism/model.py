"""
Community problem instances.

An instance holds N users over T time slots, a utility per (user, slot),
unit prices p_t, the peak price p0 and a constraint polytope Ax <= b over
the stacked demand vector. Demand for (user i, slot t) lives at flat index
i*T + t (0-based); scenario documents and reports are 1-based.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from mechanism.errors import (
    DimensionMismatch,
    Infeasible,
    InvalidParameter,
    NegativeRhs,
    OutOfDomain,
    SamplingFailed,
    ScenarioError,
    UnboundedDomain,
)
from mechanism.utils import label, logger

DOMAIN_TOL = 1e-9
FEASIBILITY_TOL = 1e-12


def _scalar_or_array(arr: np.ndarray):
    return float(arr) if arr.ndim == 0 else arr


def _slack(bound: float) -> float:
    return DOMAIN_TOL * (1.0 + abs(bound)) if math.isfinite(bound) else 0.0


class UtilityFunction(ABC):
    """
    Strictly concave utility of one user in one slot, defined on
    [domain_lo, domain_hi].

    Subclasses provide closed forms for the value, the first two derivatives
    and the inverse of the derivative.
    """

    domain_lo: float
    domain_hi: float
    family: str = ''

    @abstractmethod
    def _value(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _derivative(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _second_derivative(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _inverse_derivative(self, p: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def curvature_floor(self) -> float:
        """Infimum of -v'' over the domain."""

    @abstractmethod
    def params(self) -> Dict[str, float]: ...

    def _check_demand(self, x) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        lo, hi = self.domain_lo, self.domain_hi
        if np.any(np.isnan(arr)) or np.any(arr < lo - _slack(lo)) or np.any(arr > hi + _slack(hi)):
            raise OutOfDomain(f"Demand {x} outside utility domain [{lo}, {hi}]")
        return np.clip(arr, lo, hi)

    def price_range(self) -> Tuple[float, float]:
        """Range of the derivative on the domain: (v'(domain_hi), v'(domain_lo))."""
        return (float(self._derivative(np.asarray(self.domain_hi, dtype=float))),
                float(self._derivative(np.asarray(self.domain_lo, dtype=float))))

    def value(self, x):
        return _scalar_or_array(self._value(self._check_demand(x)))

    def derivative(self, x):
        return _scalar_or_array(self._derivative(self._check_demand(x)))

    def raw_derivative(self, x):
        """Derivative formula without the domain check (used by residual reports)."""
        with np.errstate(divide='ignore', invalid='ignore'):
            return _scalar_or_array(self._derivative(np.asarray(x, dtype=float)))

    def second_derivative(self, x):
        return _scalar_or_array(self._second_derivative(self._check_demand(x)))

    def raw_second_derivative(self, x):
        with np.errstate(divide='ignore', invalid='ignore'):
            return _scalar_or_array(self._second_derivative(np.asarray(x, dtype=float)))

    def inverse_derivative(self, p):
        arr = np.asarray(p, dtype=float)
        p_lo, p_hi = self.price_range()
        if np.any(np.isnan(arr)) or np.any(arr < p_lo - _slack(p_lo)) or np.any(arr > p_hi + _slack(p_hi)):
            raise OutOfDomain(f"Price {p} outside derivative range [{p_lo}, {p_hi}]")
        arr = np.clip(arr, p_lo, p_hi)
        with np.errstate(divide='ignore'):
            x = self._inverse_derivative(arr)
        return _scalar_or_array(np.clip(x, self.domain_lo, self.domain_hi))

    def with_domain(self, domain_lo: float, domain_hi: float) -> 'UtilityFunction':
        return type(self)(**self.params(), domain_lo=domain_lo, domain_hi=domain_hi)


@dataclass(frozen=True)
class ScaledLog(UtilityFunction):
    """v(x) = c * ln(d + x)."""
    c: float
    d: float
    domain_lo: float = 0.0
    domain_hi: float = math.inf
    family: str = field(default='scaled_log', init=False, repr=False)

    def __post_init__(self):
        if not (self.c > 0 and self.d > 0):
            raise InvalidParameter(f"ScaledLog needs c > 0 and d > 0, got c={self.c}, d={self.d}")
        if not self.domain_lo <= self.domain_hi:
            raise InvalidParameter(f"Empty domain [{self.domain_lo}, {self.domain_hi}]")
        if not self.d + self.domain_lo > 0:
            raise InvalidParameter(
                f"ScaledLog(c={self.c}, d={self.d}) is undefined at domain_lo={self.domain_lo}")

    def _value(self, x):
        return self.c * np.log(self.d + x)

    def _derivative(self, x):
        return self.c / (self.d + x)

    def _second_derivative(self, x):
        return -self.c / (self.d + x) ** 2

    def _inverse_derivative(self, p):
        if np.any(p <= 0):
            raise OutOfDomain(f"ScaledLog inverse derivative needs a positive price, got {p}")
        return self.c / p - self.d

    def curvature_floor(self) -> float:
        if not math.isfinite(self.domain_hi):
            return 0.0
        return self.c / (self.d + self.domain_hi) ** 2

    def params(self) -> Dict[str, float]:
        return {'c': self.c, 'd': self.d}


@dataclass(frozen=True)
class Quadratic(UtilityFunction):
    """v(x) = a*x - b*x^2/2."""
    a: float
    b: float
    domain_lo: float = -math.inf
    domain_hi: float = math.inf
    family: str = field(default='quadratic', init=False, repr=False)

    def __post_init__(self):
        if not self.b > 0:
            raise InvalidParameter(f"Quadratic needs curvature b > 0, got {self.b}")
        if not self.domain_lo <= self.domain_hi:
            raise InvalidParameter(f"Empty domain [{self.domain_lo}, {self.domain_hi}]")

    def _value(self, x):
        return self.a * x - 0.5 * self.b * x ** 2

    def _derivative(self, x):
        return self.a - self.b * x

    def _second_derivative(self, x):
        return np.full_like(x, -self.b, dtype=float)

    def _inverse_derivative(self, p):
        return (self.a - p) / self.b

    def curvature_floor(self) -> float:
        return self.b

    def params(self) -> Dict[str, float]:
        return {'a': self.a, 'b': self.b}


UTILITY_FAMILIES = {
    'scaled_log': ScaledLog,
    'quadratic': Quadratic,
}


def utility_value(u: UtilityFunction, x):
    return u.value(x)


def utility_derivative(u: UtilityFunction, x):
    return u.derivative(x)


def utility_inverse_derivative(u: UtilityFunction, p):
    """Demand at which the marginal utility equals price p."""
    return u.inverse_derivative(p)


@dataclass(frozen=True, eq=False)
class Instance:
    """
    Immutable community problem.

    Arrays are read-only. `user_constraints[i]` lists the rows of A with a
    nonzero coefficient in user i's column block.
    """
    utilities: Tuple[Tuple[UtilityFunction, ...], ...]
    unit_prices: np.ndarray
    peak_price: float
    constraint_matrix: np.ndarray
    constraint_rhs: np.ndarray
    user_constraints: Tuple[Tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        n_users, horizon = self.n_users, self.horizon
        A = self.constraint_matrix
        constraints = []
        for i in range(n_users):
            block = A[:, i * horizon:(i + 1) * horizon]
            constraints.append(tuple(int(l) for l in np.flatnonzero(np.any(block != 0, axis=1))))
        object.__setattr__(self, 'user_constraints', tuple(constraints))

    @property
    def n_users(self) -> int:
        return len(self.utilities)

    @property
    def horizon(self) -> int:
        return len(self.utilities[0]) if self.utilities else 0

    @property
    def n_constraints(self) -> int:
        return self.constraint_matrix.shape[0]

    def flat_index(self, i: int, t: int) -> int:
        return i * self.horizon + t

    def user_block(self, i: int) -> np.ndarray:
        """Columns of A belonging to user i, shape (L, T)."""
        T = self.horizon
        return self.constraint_matrix[:, i * T:(i + 1) * T]

    def domain_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.array([[u.domain_lo for u in row] for row in self.utilities], dtype=float)
        hi = np.array([[u.domain_hi for u in row] for row in self.utilities], dtype=float)
        return lo, hi

    def as_demand(self, x) -> np.ndarray:
        """Reshape a flat or matrix demand into N x T, checking the size."""
        arr = np.asarray(x, dtype=float)
        if arr.size != self.n_users * self.horizon:
            raise DimensionMismatch(
                f"Demand has {arr.size} entries, expected {self.n_users}x{self.horizon}")
        return arr.reshape(self.n_users, self.horizon)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.utilities == other.utilities
                and self.peak_price == other.peak_price
                and np.array_equal(self.unit_prices, other.unit_prices)
                and self.constraint_matrix.shape == other.constraint_matrix.shape
                and np.array_equal(self.constraint_matrix, other.constraint_matrix)
                and np.array_equal(self.constraint_rhs, other.constraint_rhs))

    __hash__ = object.__hash__


def _read_only(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def make_instance(utilities: Sequence[Sequence[UtilityFunction]],
                  unit_prices: Sequence[float],
                  peak_price: float,
                  constraint_matrix: Optional[Any] = None,
                  constraint_rhs: Optional[Sequence[float]] = None) -> Instance:
    """
    Validate arrays and build an Instance.

    Args:
        utilities: N rows of T utility functions
        unit_prices: p_t, length T
        peak_price: p0 >= 0
        constraint_matrix: A with N*T columns (None for no constraints)
        constraint_rhs: b >= 0

    Returns:
        Instance
    """
    rows = tuple(tuple(row) for row in utilities)
    if not rows or not rows[0]:
        raise DimensionMismatch("Instance needs at least one user and one slot")
    horizon = len(rows[0])
    if any(len(row) != horizon for row in rows):
        raise DimensionMismatch("Every user needs one utility per slot")
    n_cols = len(rows) * horizon

    prices = np.asarray(unit_prices, dtype=float).ravel()
    if prices.size != horizon:
        raise DimensionMismatch(f"Expected {horizon} unit prices, got {prices.size}")
    if not peak_price >= 0:
        raise InvalidParameter(f"Peak price must be nonnegative, got {peak_price}")

    if constraint_matrix is None:
        A = np.zeros((0, n_cols))
    else:
        A = np.asarray(constraint_matrix, dtype=float)
        if A.ndim == 1 and A.size == 0:
            A = A.reshape(0, n_cols)
    b = np.asarray(constraint_rhs if constraint_rhs is not None else [], dtype=float).ravel()
    if A.ndim != 2 or A.shape[1] != n_cols:
        raise DimensionMismatch(f"Constraint matrix must have {n_cols} columns, got shape {A.shape}")
    if A.shape[0] != b.size:
        raise DimensionMismatch(f"Constraint matrix has {A.shape[0]} rows but rhs has {b.size} entries")
    if np.any(b < 0):
        bad = int(np.flatnonzero(b < 0)[0])
        raise NegativeRhs(f"Constraint {bad + 1} has negative rhs {b[bad]}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b)) and np.all(np.isfinite(prices))):
        raise InvalidParameter("Prices and constraint data must be finite")

    return Instance(
        utilities=rows,
        unit_prices=_read_only(prices),
        peak_price=float(peak_price),
        constraint_matrix=_read_only(A),
        constraint_rhs=_read_only(b),
    )


def polytope_bounding_box(A: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-coordinate extremes of {x : Ax <= b} by linear programming.

    Args:
        A: Constraint matrix (L x n)
        b: Right-hand side (L)

    Returns:
        (lo, hi) arrays of length n; unbounded directions are -inf / +inf
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    lo = np.full(n, -math.inf)
    hi = np.full(n, math.inf)
    if A.shape[0] == 0:
        return lo, hi

    for k in range(n):
        for sign in (1.0, -1.0):
            c = np.zeros(n)
            c[k] = sign
            res = linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * n, method='highs')
            if res.status == 2:
                raise Infeasible("Constraint polytope is empty")
            if res.status == 3:
                continue
            if res.status != 0:
                raise Infeasible(f"Bounding-box LP failed: {res.message}")
            if sign > 0:
                lo[k] = res.fun
            else:
                hi[k] = -res.fun
    return lo, hi


def _utility_from_spec(doc: Dict[str, Any], default_domain: Tuple[float, float],
                       where: str) -> UtilityFunction:
    family = doc.get('family')
    if family not in UTILITY_FAMILIES:
        raise ScenarioError(f"{where}: unknown utility family '{family}'")
    params = dict(doc.get('params', {}))
    domain = doc.get('domain')
    if domain is None:
        domain_lo, domain_hi = default_domain
    else:
        if len(domain) != 2:
            raise ScenarioError(f"{where}: domain must be [lo, hi]")
        domain_lo, domain_hi = float(domain[0]), float(domain[1])
    if not (math.isfinite(domain_lo) and math.isfinite(domain_hi)):
        raise UnboundedDomain(f"{where}: polytope does not bound the demand; give an explicit domain")
    try:
        return UTILITY_FAMILIES[family](**{k: float(v) for k, v in params.items()},
                                        domain_lo=domain_lo, domain_hi=domain_hi)
    except TypeError as e:
        raise ScenarioError(f"{where}: bad parameters {params} for {family}: {e}")


def build_instance(spec: Dict[str, Any]) -> Instance:
    """
    Build an Instance from a declarative (1-based) description.

    The description has the shape
    {users: [{utilities: [{family, params, domain?}]}],
     prices: {unit: [...], peak: p0},
     constraints: {rows: [{coeffs: [[user, slot, value]], rhs}]}}.
    Missing utility domains are filled from the polytope bounding box.

    Args:
        spec: Scenario description

    Returns:
        Validated Instance
    """
    try:
        users = spec['users']
        unit = [float(p) for p in spec['prices']['unit']]
        peak = float(spec['prices']['peak'])
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioError(f"Scenario is missing users/prices: {e}")

    n_users, horizon = len(users), len(unit)
    if n_users == 0 or horizon == 0:
        raise DimensionMismatch("Scenario needs at least one user and one slot")
    n_cols = n_users * horizon

    rows = (spec.get('constraints') or {}).get('rows', [])
    A = np.zeros((len(rows), n_cols))
    b = np.zeros(len(rows))
    for l, row in enumerate(rows):
        try:
            b[l] = float(row['rhs'])
            coeffs = row.get('coeffs', [])
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"Constraint {l + 1} is malformed: {e}")
        for entry in coeffs:
            if len(entry) != 3:
                raise ScenarioError(f"Constraint {l + 1}: coefficient entries are [user, slot, value]")
            user, slot, value = int(entry[0]), int(entry[1]), float(entry[2])
            if not (1 <= user <= n_users and 1 <= slot <= horizon):
                raise DimensionMismatch(
                    f"Constraint {l + 1}: (user {user}, slot {slot}) outside {n_users}x{horizon}")
            A[l, (user - 1) * horizon + slot - 1] += value
    if np.any(b < 0):
        bad = int(np.flatnonzero(b < 0)[0])
        raise NegativeRhs(f"Constraint {bad + 1} has negative rhs {b[bad]}")

    needs_box = any(u.get('domain') is None for user in users for u in user.get('utilities', []))
    if needs_box:
        box_lo, box_hi = polytope_bounding_box(A, b)
    else:
        box_lo = np.full(n_cols, -math.inf)
        box_hi = np.full(n_cols, math.inf)

    utilities = []
    for i, user in enumerate(users):
        docs = user.get('utilities', [])
        if len(docs) != horizon:
            raise DimensionMismatch(f"User {i + 1} has {len(docs)} utilities, expected {horizon}")
        utilities.append([
            _utility_from_spec(doc, (box_lo[i * horizon + t], box_hi[i * horizon + t]),
                               f"user {i + 1} slot {t + 1}")
            for t, doc in enumerate(docs)
        ])

    inst = make_instance(utilities, unit, peak, A, b)
    logger.debug(f"Built instance: N={inst.n_users}, T={inst.horizon}, L={inst.n_constraints}")
    return inst


def instance_to_spec(inst: Instance) -> Dict[str, Any]:
    """Serialize an Instance to the declarative description read by build_instance."""
    T = inst.horizon
    users = []
    for row in inst.utilities:
        users.append({'utilities': [
            {'family': u.family,
             'params': {k: float(v) for k, v in u.params().items()},
             'domain': [float(u.domain_lo), float(u.domain_hi)]}
            for u in row
        ]})
    rows = []
    for l in range(inst.n_constraints):
        coeffs = [[int(k // T) + 1, int(k % T) + 1, float(inst.constraint_matrix[l, k])]
                  for k in np.flatnonzero(inst.constraint_matrix[l])]
        rows.append({'coeffs': coeffs, 'rhs': float(inst.constraint_rhs[l])})
    return {
        'users': users,
        'prices': {'unit': [float(p) for p in inst.unit_prices], 'peak': float(inst.peak_price)},
        'constraints': {'rows': rows},
    }


def user_utility(inst: Instance, i: int, y) -> float:
    """Sum over slots of user i's utility at demand vector y."""
    return float(sum(u.value(y[t]) for t, u in enumerate(inst.utilities[i])))


def total_utility(inst: Instance, x) -> float:
    x = inst.as_demand(x)
    return float(sum(user_utility(inst, i, x[i]) for i in range(inst.n_users)))


def marginal_utilities(inst: Instance, x) -> np.ndarray:
    x = inst.as_demand(x)
    return np.array([[u.derivative(x[i, t]) for t, u in enumerate(row)]
                     for i, row in enumerate(inst.utilities)])


def demand_at_prices(inst: Instance, prices) -> np.ndarray:
    """Elementwise inverse marginal utility of an N x T price matrix."""
    prices = inst.as_demand(prices)
    return np.array([[u.inverse_derivative(prices[i, t]) for t, u in enumerate(row)]
                     for i, row in enumerate(inst.utilities)])


def community_cost(inst: Instance, x) -> float:
    """J(x) = sum_t p_t sum_i x_t^i + p0 * max_t sum_i x_t^i."""
    load = inst.as_demand(x).sum(axis=0)
    return float(inst.unit_prices @ load + inst.peak_price * load.max())


def social_welfare(inst: Instance, x) -> float:
    return total_utility(inst, x) - community_cost(inst, x)


def is_feasible(inst: Instance, x, tol: float = FEASIBILITY_TOL) -> bool:
    flat = inst.as_demand(x).ravel()
    if inst.n_constraints == 0:
        return True
    return bool(np.all(inst.constraint_matrix @ flat <= inst.constraint_rhs + tol))


def sample_feasible_points(inst: Instance, count: int, rng: np.random.Generator,
                           max_batches: int = 2000) -> np.ndarray:
    """
    Rejection-sample feasible flat demand vectors.

    Candidates are drawn uniformly in the polytope bounding box intersected
    with the utility domains.

    Args:
        inst: Instance
        count: Number of points wanted
        rng: Random generator
        max_batches: Sampling budget

    Returns:
        Array of shape (count, N*T)
    """
    if count < 1:
        raise InvalidParameter(f"Need at least one sample, got {count}")
    dom_lo, dom_hi = inst.domain_bounds()
    box_lo, box_hi = polytope_bounding_box(inst.constraint_matrix, inst.constraint_rhs)
    lo = np.maximum(box_lo, dom_lo.ravel())
    hi = np.minimum(box_hi, dom_hi.ravel())
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise UnboundedDomain("Cannot sample an unbounded feasible region")
    if np.any(lo > hi):
        raise SamplingFailed("Utility domains do not meet the constraint polytope")

    batch = max(4 * count, 256)
    accepted: List[np.ndarray] = []
    n_accepted = 0
    for _ in range(max_batches):
        cand = rng.uniform(lo, hi, size=(batch, lo.size))
        if inst.n_constraints:
            ok = np.all(cand @ inst.constraint_matrix.T <= inst.constraint_rhs + FEASIBILITY_TOL, axis=1)
            cand = cand[ok]
        accepted.append(cand)
        n_accepted += len(cand)
        if n_accepted >= count:
            return np.vstack(accepted)[:count]
    raise SamplingFailed(f"Found {n_accepted} of {count} feasible points in {max_batches} batches")


@dataclass
class CoordinateConvexityReport:
    passed: bool
    points_checked: int
    counterexample: Optional[np.ndarray] = None
    coordinate: Optional[str] = None


def check_coordinate_convexity(inst: Instance, samples: int, seed: int = 0,
                               points: Optional[np.ndarray] = None) -> CoordinateConvexityReport:
    """
    Check that zeroing any coordinate of a feasible point keeps it feasible.

    Args:
        inst: Instance
        samples: Number of feasible points to draw
        seed: Sampler seed
        points: Explicit feasible points to check instead of sampling

    Returns:
        CoordinateConvexityReport with the first counterexample found
    """
    if points is None:
        points = sample_feasible_points(inst, samples, np.random.default_rng(seed))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if inst.n_constraints == 0:
        return CoordinateConvexityReport(passed=True, points_checked=len(points))

    A, b = inst.constraint_matrix, inst.constraint_rhs
    T = inst.horizon
    for k in range(points.shape[1]):
        zeroed = points.copy()
        zeroed[:, k] = 0.0
        bad = np.flatnonzero(np.any(zeroed @ A.T > b + FEASIBILITY_TOL, axis=1))
        if bad.size:
            where = label('x', k // T, k % T)
            logger.warning(f"Coordinate convexity fails when zeroing {where}")
            return CoordinateConvexityReport(passed=False, points_checked=len(points),
                                             counterexample=points[bad[0]], coordinate=where)
    return CoordinateConvexityReport(passed=True, points_checked=len(points))
