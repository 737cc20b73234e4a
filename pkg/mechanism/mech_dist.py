"""
The distributed mechanism.

Users exchange messages only with their neighbors on a spanning tree of the
communication graph. Besides demand and prices, user i sends each neighbor j
a summary n^{i,j} of the constraint load and a summary nu^{i,j} of the slot
load of all users reached from i through j, and acts as helper phi(j) = i
for some neighbors by predicting their demand beta^{i,j}.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd

from mechanism.errors import DimensionMismatch, Disconnected, InvalidHelper, KktFailed, MissingSummary
from mechanism.mech_central import (
    BudgetReport,
    Coordinate,
    IrReport,
    NeConfig,
    NeReport,
    _budget,
    _ir,
    radial_pricing,
    run_probes,
)
from mechanism.messages import DistMessageProfile, Pair
from mechanism.model import Instance, user_utility
from mechanism.oracle import CentralSolution, check_kkt
from mechanism.utils import label, logger


@dataclass(frozen=True)
class HelperPolicy:
    """How helpers are chosen: 'lowest_index' or an explicit 0-based map."""
    kind: str = 'lowest_index'
    mapping: Optional[Mapping[int, int]] = None

    @classmethod
    def lowest_index(cls) -> 'HelperPolicy':
        return cls('lowest_index')

    @classmethod
    def explicit(cls, mapping: Mapping[int, int]) -> 'HelperPolicy':
        return cls('explicit', dict(mapping))


@dataclass(frozen=True, eq=False)
class TreeNetwork:
    """
    Spanning tree over users 0..N-1 with helper map phi.

    `next_hop[i][k]` is the first user on the tree path from i to k
    (i itself when k == i).
    """
    n_users: int
    edges: Tuple[Tuple[int, int], ...]
    phi: Tuple[int, ...]
    neighbors: Tuple[Tuple[int, ...], ...] = field(init=False)
    next_hop: Tuple[Tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        graph = _graph(self.n_users, self.edges)
        if len(self.edges) != self.n_users - 1 or not nx.is_connected(graph):
            raise Disconnected("Network edges do not form a spanning tree")
        object.__setattr__(self, 'neighbors',
                           tuple(tuple(sorted(graph.neighbors(i))) for i in range(self.n_users)))
        hops = []
        for i in range(self.n_users):
            paths = nx.single_source_shortest_path(graph, i)
            hops.append(tuple(paths[k][1] if k != i else i for k in range(self.n_users)))
        object.__setattr__(self, 'next_hop', tuple(hops))
        if len(self.phi) != self.n_users:
            raise InvalidHelper(f"Helper map covers {len(self.phi)} of {self.n_users} users")
        for i, h in enumerate(self.phi):
            if h not in self.neighbors[i] and not (h == i and not self.neighbors[i]):
                raise InvalidHelper(f"Helper {h + 1} of user {i + 1} is not a neighbor")

    def helped_by(self, i: int) -> List[int]:
        """Users j with phi(j) = i (i itself for a lone user)."""
        return [j for j in range(self.n_users) if self.phi[j] == i]

    def with_phi(self, phi: Sequence[int]) -> 'TreeNetwork':
        return TreeNetwork(n_users=self.n_users, edges=self.edges, phi=tuple(int(h) for h in phi))

    def summary_pairs(self) -> List[Pair]:
        return [(i, j) for i in range(self.n_users) for j in self.neighbors[i]]

    def beta_pairs(self) -> List[Pair]:
        return [(self.phi[j], j) for j in range(self.n_users)]


def _graph(n_users: int, edges) -> nx.Graph:
    graph = nx.Graph()
    graph.add_nodes_from(range(n_users))
    for a, b in edges:
        if not (0 <= a < n_users and 0 <= b < n_users) or a == b:
            raise DimensionMismatch(f"Edge ({a + 1}, {b + 1}) is not between two of {n_users} users")
        graph.add_edge(int(a), int(b))
    return graph


def assign_helpers(net: TreeNetwork, policy: HelperPolicy = HelperPolicy()) -> Tuple[int, ...]:
    """
    Choose a helper neighbor for every user.

    Args:
        net: Tree network
        policy: LowestIndex (smallest neighbor index) or Explicit map

    Returns:
        phi as a tuple indexed by user
    """
    if policy.kind == 'lowest_index':
        return tuple(net.neighbors[i][0] if net.neighbors[i] else i for i in range(net.n_users))
    if policy.kind != 'explicit' or policy.mapping is None:
        raise InvalidHelper(f"Unknown helper policy '{policy.kind}'")
    phi = []
    for i in range(net.n_users):
        if i not in policy.mapping:
            raise InvalidHelper(f"Helper map has no entry for user {i + 1}")
        h = int(policy.mapping[i])
        if h not in net.neighbors[i]:
            raise InvalidHelper(f"Helper {h + 1} of user {i + 1} is not a neighbor")
        phi.append(h)
    return tuple(phi)


def spanning_tree(n_users: int, edges: Sequence[Tuple[int, int]],
                  policy: HelperPolicy = HelperPolicy()) -> TreeNetwork:
    """
    Breadth-first spanning tree rooted at user 0, visiting neighbors in
    index order.

    Args:
        n_users: Number of users
        edges: 0-based undirected edges of a connected graph
        policy: Helper assignment policy

    Returns:
        TreeNetwork
    """
    graph = _graph(n_users, edges)
    if not nx.is_connected(graph):
        raise Disconnected(f"Communication graph has {nx.number_connected_components(graph)} components")
    tree_edges = tuple(tuple(sorted(e)) for e in nx.bfs_edges(graph, 0, sort_neighbors=sorted))
    provisional = TreeNetwork(n_users=n_users, edges=tree_edges, phi=_lowest_neighbors(n_users, tree_edges))
    net = provisional.with_phi(assign_helpers(provisional, policy))
    logger.debug(f"Spanning tree edges: {[(a + 1, b + 1) for a, b in net.edges]}")
    return net


def _lowest_neighbors(n_users: int, edges) -> Tuple[int, ...]:
    graph = _graph(n_users, edges)
    return tuple(min(graph.neighbors(i)) if graph.degree(i) else i for i in range(n_users))


def nearest_via(net: TreeNetwork, i: int, k: int) -> int:
    """Neighbor of i (or i itself) nearest to k: the first hop on the tree path."""
    return net.next_hop[i][k]


# --- Neighborhood view and taxes --------------------------------------------

@dataclass(frozen=True)
class NeighborhoodView:
    """
    Everything user i's tax reads: its own messages and those of its
    neighbors. Keys of the summary tables are (sender, recipient).
    """
    user: int
    neighbors: Tuple[int, ...]
    helper: int
    y: Mapping[int, np.ndarray]
    q: Mapping[int, np.ndarray]
    s: Mapping[int, np.ndarray]
    beta_in: np.ndarray
    beta_out: Mapping[int, np.ndarray]
    n_out: Mapping[int, np.ndarray]
    nu_out: Mapping[int, np.ndarray]
    n_in: Mapping[Pair, np.ndarray]
    nu_in: Mapping[Pair, np.ndarray]


def _require(table: Mapping[Pair, np.ndarray], key: Pair, name: str) -> np.ndarray:
    if key not in table:
        raise MissingSummary(f"Missing {name}^({key[0] + 1},{key[1] + 1})")
    return table[key]


def check_profile_keys(net: TreeNetwork, m: DistMessageProfile) -> None:
    """Key sets of the keyed messages must match the network exactly."""
    if m.n_users != net.n_users:
        raise DimensionMismatch(f"Profile has {m.n_users} users, network has {net.n_users}")
    expected = {'beta': set(net.beta_pairs()), 'n_summary': set(net.summary_pairs()),
                'nu_summary': set(net.summary_pairs())}
    for name, keys in expected.items():
        present = set(getattr(m, name))
        if keys - present:
            i, j = sorted(keys - present)[0]
            raise MissingSummary(f"Missing {name}^({i + 1},{j + 1})")
        if present - keys:
            i, j = sorted(present - keys)[0]
            raise DimensionMismatch(f"{name}^({i + 1},{j + 1}) does not match the network")


def neighborhood_slice(net: TreeNetwork, m: DistMessageProfile, i: int) -> NeighborhoodView:
    """Extract the messages of user i and its neighbors."""
    nbrs = net.neighbors[i]
    local = (i,) + nbrs
    n_in, nu_in = {}, {}
    for j in nbrs:
        for h in net.neighbors[j]:
            if h != i:
                n_in[(j, h)] = _require(m.n_summary, (j, h), 'n')
                nu_in[(j, h)] = _require(m.nu_summary, (j, h), 'nu')
    helper = net.phi[i]
    beta_in = _require(m.beta, (helper, i), 'beta')
    return NeighborhoodView(
        user=i, neighbors=nbrs, helper=helper,
        y={j: m.y[j] for j in local}, q={j: m.q[j] for j in local}, s={j: m.s[j] for j in local},
        beta_in=beta_in,
        beta_out={j: _require(m.beta, (i, j), 'beta') for j in net.helped_by(i)},
        n_out={j: _require(m.n_summary, (i, j), 'n') for j in nbrs},
        nu_out={j: _require(m.nu_summary, (i, j), 'nu') for j in nbrs},
        n_in=n_in, nu_in=nu_in,
    )


@dataclass
class DistTaxBreakdown:
    user: int
    cost: float
    pr_n: float
    pr_beta: float
    pr_nu: float
    con_l: np.ndarray
    con_t: np.ndarray

    @property
    def total(self) -> float:
        return (self.cost + self.pr_n + self.pr_beta + self.pr_nu
                + float(self.con_l.sum()) + float(self.con_t.sum()))

    def as_row(self) -> Dict[str, float]:
        row = {'user': self.user + 1, 'cost': self.cost, 'pr_n': self.pr_n,
               'pr_beta': self.pr_beta, 'pr_nu': self.pr_nu}
        row.update({label('con_l', l): v for l, v in enumerate(self.con_l)})
        row.update({label('con_t', t): v for t, v in enumerate(self.con_t)})
        row['total'] = self.total
        return row


def _flows(inst: Instance, view: NeighborhoodView) -> Tuple[Dict[int, np.ndarray], Dict[int, np.ndarray]]:
    """f^{i,j,l} and f^{i,j}_t for every neighbor j of the focal user."""
    i = view.user
    f_l, f_t = {}, {}
    for j in view.neighbors:
        load = inst.user_block(j) @ view.y[j]
        slot = np.array(view.y[j], dtype=float)
        for (sender, h), vec in view.n_in.items():
            if sender == j and h != i:
                load = load + vec
        for (sender, h), vec in view.nu_in.items():
            if sender == j and h != i:
                slot = slot + vec
        f_l[j], f_t[j] = load, slot
    return f_l, f_t


def _neighborhood_means(inst: Instance, view: NeighborhoodView) -> Tuple[np.ndarray, np.ndarray]:
    if view.neighbors:
        q_minus = np.mean([view.q[j] for j in view.neighbors], axis=0)
        s_minus = np.mean([view.s[j] for j in view.neighbors], axis=0)
    else:
        q_minus = np.zeros(inst.n_constraints)
        s_minus = np.zeros(inst.horizon)
    return q_minus.reshape(inst.n_constraints), s_minus.reshape(inst.horizon)


def tax_dist(inst: Instance, net: TreeNetwork, view: NeighborhoodView) -> DistTaxBreakdown:
    """
    Tax of the focal user of a neighborhood view.

    Args:
        inst: Instance
        net: Tree network
        view: Output of neighborhood_slice for the focal user

    Returns:
        DistTaxBreakdown (use .total for the tax)
    """
    i = view.user
    T, L = inst.horizon, inst.n_constraints
    f_l, f_t = _flows(inst, view)
    q_minus, s_minus = _neighborhood_means(inst, view)

    zeta = sum((f_t[j] for j in view.neighbors), np.zeros(T)) + view.beta_in
    z = float(zeta.max())
    rp = radial_pricing(s_minus, zeta, inst.peak_price)

    own = inst.user_block(i)
    y_i = view.y[i]
    rows = list(inst.user_constraints[i])
    cost = float((inst.unit_prices + rp) @ y_i)
    if rows:
        cost += float(q_minus[rows] @ (own[rows] @ y_i))

    pr_n = float(sum(np.sum((view.n_out[j] - f_l[j]) ** 2) for j in view.neighbors))
    pr_beta = float(sum(np.sum((view.beta_out[j] - view.y[j]) ** 2) for j in view.beta_out))
    pr_nu = float(sum(np.sum((view.nu_out[j] - f_t[j]) ** 2) for j in view.neighbors))

    others_load = sum((f_l[j] for j in view.neighbors), np.zeros(L))
    slack = inst.constraint_rhs - others_load - own @ view.beta_in
    q_i, s_i = view.q[i], view.s[i]
    con_l = (q_i - q_minus) ** 2 + q_i * slack
    con_t = (s_i - s_minus) ** 2 + s_i * (z - zeta)
    return DistTaxBreakdown(user=i, cost=cost, pr_n=pr_n, pr_beta=pr_beta, pr_nu=pr_nu,
                            con_l=con_l, con_t=con_t)


def payoff_dist(inst: Instance, net: TreeNetwork, view: NeighborhoodView) -> float:
    return user_utility(inst, view.user, view.y[view.user]) - tax_dist(inst, net, view).total


def rebate_tax_dist(inst: Instance, net: TreeNetwork, view: NeighborhoodView) -> float:
    """Tax minus sum_l q^{-i,l} b^l / N with q^{-i} the neighborhood average."""
    q_minus, _ = _neighborhood_means(inst, view)
    return tax_dist(inst, net, view).total - float(q_minus @ inst.constraint_rhs) / inst.n_users


def budget_report_dist(inst: Instance, net: TreeNetwork, m: DistMessageProfile) -> BudgetReport:
    check_profile_keys(net, m)
    views = [neighborhood_slice(net, m, i) for i in range(net.n_users)]
    taxes = np.array([tax_dist(inst, net, v).total for v in views])
    rebated = np.array([rebate_tax_dist(inst, net, v) for v in views])
    return _budget(inst, taxes, rebated, np.array(m.y))


def check_ir_dist(inst: Instance, net: TreeNetwork, m: DistMessageProfile, tol: float = 1e-9) -> IrReport:
    check_profile_keys(net, m)
    payoffs = [payoff_dist(inst, net, neighborhood_slice(net, m, i)) for i in range(net.n_users)]
    return _ir(inst, payoffs, tol)


# --- Equilibrium construction and checks ---------------------------------------

def _subtree_sums(inst: Instance, net: TreeNetwork, y: np.ndarray) -> Tuple[Dict[Pair, np.ndarray], Dict[Pair, np.ndarray]]:
    """Closed forms: sums over {h : n(i,h) = j} of a^h y^h and of y^h."""
    n_sum: Dict[Pair, np.ndarray] = {}
    nu_sum: Dict[Pair, np.ndarray] = {}
    for i, j in net.summary_pairs():
        behind = [h for h in range(net.n_users) if net.next_hop[i][h] == j]
        n_sum[(i, j)] = sum((inst.user_block(h) @ y[h] for h in behind), np.zeros(inst.n_constraints))
        nu_sum[(i, j)] = sum((y[h] for h in behind), np.zeros(inst.horizon))
    return n_sum, nu_sum


def construct_ne_dist(inst: Instance, net: TreeNetwork, sol: CentralSolution,
                      kkt_tol: float = 1e-6) -> DistMessageProfile:
    """
    Equilibrium profile of the distributed mechanism induced by an optimal
    solution: optimal demand and multipliers, helpers predict exactly, and
    summaries equal the subtree sums.
    """
    report = check_kkt(inst, sol, kkt_tol)
    if not report.passed:
        raise KktFailed(f"Solution does not satisfy KKT at tol {kkt_tol:g} "
                        f"(max residual {report.max_residual:.3e})", report=report)
    N = inst.n_users
    x = np.asarray(sol.x, dtype=float)
    n_sum, nu_sum = _subtree_sums(inst, net, x)
    return DistMessageProfile(
        y=x,
        q=np.tile(np.maximum(sol.lam, 0.0), (N, 1)).reshape(N, inst.n_constraints),
        s=np.tile(np.maximum(sol.mu, 0.0), (N, 1)),
        beta={(h, j): x[j] for h, j in net.beta_pairs()},
        n_summary=n_sum,
        nu_summary=nu_sum,
    )


def verify_ne_dist(inst: Instance, net: TreeNetwork, m: DistMessageProfile,
                   cfg: NeConfig = NeConfig()) -> NeReport:
    """
    Numerical NE certificate over the distributed message coordinates:
    y, q, s, beta^{i,j}, n^{i,j,l} and nu^{i,j}_t of every user.
    """
    check_profile_keys(net, m)
    T, L = inst.horizon, inst.n_constraints

    def make_user_problem(i):
        view = neighborhood_slice(net, m, i)
        helped = sorted(view.beta_out)
        nbrs = view.neighbors
        coords = (
            [Coordinate(label('y', i, t), 'demand', u.domain_lo, u.domain_hi)
             for t, u in enumerate(inst.utilities[i])]
            + [Coordinate(label('q', i, l), 'price', 0.0) for l in range(L)]
            + [Coordinate(label('s', i, t), 'price', 0.0) for t in range(T)]
            + [Coordinate(label('beta', i, j, t), 'free') for j in helped for t in range(T)]
            + [Coordinate(label('n', i, j, l), 'free') for j in nbrs for l in range(L)]
            + [Coordinate(label('nu', i, j, t), 'free') for j in nbrs for t in range(T)]
        )
        base = np.concatenate(
            [view.y[i], view.q[i], view.s[i]]
            + [view.beta_out[j] for j in helped]
            + [view.n_out[j] for j in nbrs]
            + [view.nu_out[j] for j in nbrs]
        )

        def payoff_fn(vec):
            pos = 0

            def take(size):
                nonlocal pos
                chunk = vec[pos:pos + size]
                pos += size
                return chunk
            y_i, q_i, s_i = take(T), take(L), take(T)
            beta_out = {j: take(T) for j in helped}
            n_out = {j: take(L) for j in nbrs}
            nu_out = {j: take(T) for j in nbrs}
            trial = NeighborhoodView(
                user=i, neighbors=nbrs, helper=view.helper,
                y={**view.y, i: y_i}, q={**view.q, i: q_i}, s={**view.s, i: s_i},
                beta_in=view.beta_in, beta_out=beta_out, n_out=n_out, nu_out=nu_out,
                n_in=view.n_in, nu_in=view.nu_in,
            )
            if view.helper == i:
                trial = replace(trial, beta_in=beta_out[i])
            return payoff_dist(inst, net, trial)
        return payoff_fn, base, coords

    return run_probes(net.n_users, make_user_problem, cfg)


@dataclass
class SummaryReport:
    recursion_n: float
    recursion_nu: float
    closed_form_n: float
    closed_form_nu: float
    neighborhood_sum_n: float
    neighborhood_sum_nu: float
    tol: float

    @property
    def max_residual(self) -> float:
        return max(self.recursion_n, self.recursion_nu, self.closed_form_n, self.closed_form_nu,
                   self.neighborhood_sum_n, self.neighborhood_sum_nu)

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tol

    def to_frame(self) -> pd.DataFrame:
        names = ['recursion_n', 'recursion_nu', 'closed_form_n', 'closed_form_nu',
                 'neighborhood_sum_n', 'neighborhood_sum_nu']
        values = [getattr(self, k) for k in names]
        return pd.DataFrame({'check': names, 'residual': values, 'tol': self.tol,
                             'passed': [v <= self.tol for v in values]})


def check_summary_consistency(inst: Instance, net: TreeNetwork, m: DistMessageProfile,
                              y, tol: float = 1e-10) -> SummaryReport:
    """
    Check the summary recursions n^{i,j} = a^j y^j + sum_{h in N(j)\\{i}} n^{j,h}
    (same for nu), their closed forms as subtree sums, and that each user's
    neighborhood flows add up to the load of all other users.

    Args:
        inst: Instance
        net: Tree network
        m: Distributed profile
        y: Demand matrix the summaries should describe
        tol: Pass threshold

    Returns:
        SummaryReport
    """
    check_profile_keys(net, m)
    y = inst.as_demand(y)
    rec_n = rec_nu = closed_n = closed_nu = 0.0
    n_sum, nu_sum = _subtree_sums(inst, net, y)
    for i, j in net.summary_pairs():
        expect_n = inst.user_block(j) @ y[j]
        expect_nu = np.array(y[j])
        for h in net.neighbors[j]:
            if h != i:
                expect_n = expect_n + m.n_summary[(j, h)]
                expect_nu = expect_nu + m.nu_summary[(j, h)]
        rec_n = max(rec_n, float(np.abs(m.n_summary[(i, j)] - expect_n).max(initial=0.0)))
        rec_nu = max(rec_nu, float(np.abs(m.nu_summary[(i, j)] - expect_nu).max(initial=0.0)))
        closed_n = max(closed_n, float(np.abs(m.n_summary[(i, j)] - n_sum[(i, j)]).max(initial=0.0)))
        closed_nu = max(closed_nu, float(np.abs(m.nu_summary[(i, j)] - nu_sum[(i, j)]).max(initial=0.0)))

    sum_n = sum_nu = 0.0
    total_n = inst.constraint_matrix @ y.ravel()
    total_nu = y.sum(axis=0)
    for i in range(net.n_users):
        view = neighborhood_slice(net, m, i)
        view = replace(view, y={j: y[j] for j in view.y})
        f_l, f_t = _flows(inst, view)
        flow_n = sum((f_l[j] for j in view.neighbors), np.zeros(inst.n_constraints))
        flow_nu = sum((f_t[j] for j in view.neighbors), np.zeros(inst.horizon))
        sum_n = max(sum_n, float(np.abs(flow_n - (total_n - inst.user_block(i) @ y[i])).max(initial=0.0)))
        sum_nu = max(sum_nu, float(np.abs(flow_nu - (total_nu - y[i])).max(initial=0.0)))

    report = SummaryReport(recursion_n=rec_n, recursion_nu=rec_nu, closed_form_n=closed_n,
                           closed_form_nu=closed_nu, neighborhood_sum_n=sum_n,
                           neighborhood_sum_nu=sum_nu, tol=tol)
    logger.info(f"Summary consistency: max residual {report.max_residual:.3e} (tol {tol:g})")
    return report
