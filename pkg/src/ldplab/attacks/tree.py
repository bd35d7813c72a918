"""Poisoning attacks against the tree protocol.

Three attack families:

* a max-gain baseline where every fake report sets all in-range bits plus a
  count-matching number of random out-of-range bits;
* an optimal layer-assignment attack that maximizes the target query's
  post-consistency estimate through per-node coefficients and a search over
  the provably sufficient family of "front-loaded" assignments, with both a
  brute-force and a fast incremental search;
* an adaptive wrapper that re-samples each fake report's 1-count from the
  honest distribution to evade the ones-count detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..freq_oracles import OueParams
from ..postprocess import norm_sub
from ..tree_protocol import (
    RangeQuery,
    TreeConfig,
    TreeNode,
    _partition_sizes,
    query_cover,
)

__all__ = [
    "Assignment",
    "mga_tree",
    "MgaTreeAttack",
    "tree_coefficients",
    "layer_coefficients",
    "expected_layer_estimates",
    "assignment_objective",
    "aot_assignment_bruteforce",
    "aot_assignment_fast",
    "aot_zero_coeff_strategy",
    "OptimalTreeAttack",
    "aaot_transform",
    "AdaptiveTreeAttack",
]


@dataclass
class Assignment:
    """Fake-report 1-counts per layer node (aligned with the caller's order)."""

    counts: np.ndarray
    value: float


# ---------------------------------------------------------------------------
# Max-gain baseline
# ---------------------------------------------------------------------------

def _in_range_mask(layer_nodes: Sequence[TreeNode], query: RangeQuery) -> np.ndarray:
    lo, hi = query.intervals[0]
    return np.array([lo <= n.lo and n.hi <= hi for n in layer_nodes], dtype=bool)


def mga_tree(
    layer_nodes: Sequence[TreeNode],
    query: RangeQuery,
    m_fake: int,
    params: OueParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Fake OUE reports setting every in-range bit plus padding bits.

    Each report sets 1 on the ``k`` nodes contained in the query and on
    ``max(floor(p + (L-1)q - k), 0)`` random out-of-range nodes, matching the
    expected honest 1-count when possible.
    """
    n_nodes = len(layer_nodes)
    if n_nodes == 0:
        raise ValueError("empty layer")
    if params.n != n_nodes:
        raise ValueError("params.n must equal the layer size")
    in_range = _in_range_mask(layer_nodes, query)
    k = int(in_range.sum())
    extra = max(int(math.floor(params.p + (n_nodes - 1) * params.q - k)), 0)
    out_idx = np.nonzero(~in_range)[0]
    extra = min(extra, out_idx.size)
    reports = np.tile(in_range.astype(np.uint8), (m_fake, 1))
    for row in range(m_fake):
        if extra:
            chosen = rng.choice(out_idx, size=extra, replace=False)
            reports[row, chosen] = 1
    return reports


class MgaTreeAttack:
    """Layer hook emitting max-gain baseline reports for a fixed target query."""

    def __init__(self, query: RangeQuery, epsilon: float):
        self.query = query
        self.epsilon = epsilon

    def __call__(
        self, frontier: List[TreeNode], m_fake: int, rng: np.random.Generator
    ) -> np.ndarray:
        params = OueParams(self.epsilon, len(frontier))
        return mga_tree(frontier, self.query, m_fake, params, rng)


# ---------------------------------------------------------------------------
# Per-node coefficients
# ---------------------------------------------------------------------------

def tree_coefficients(root: TreeNode, query: RangeQuery) -> Dict[int, float]:
    """Weight of each node's pre-consistency estimate in the query answer.

    Keys are ``id(node)``.  The query estimate equals the coefficient-weighted
    sum of pre-consistency node frequencies: nodes serving the query estimate
    seed weight 1 (partially covered leaves seed their overlap fraction), and
    the bottom-up consistency average is unrolled downward — an internal node
    with ``m`` children keeps ``m/(m+1)`` of its incoming weight and passes
    ``1/(m+1)`` to each subtree.
    """
    lo, hi = query.intervals[0]
    full, partial = query_cover(root, lo, hi)
    seeds: Dict[int, float] = {}
    for node in full:
        seeds[id(node)] = seeds.get(id(node), 0.0) + 1.0
    for leaf, frac in partial:
        seeds[id(leaf)] = seeds.get(id(leaf), 0.0) + frac

    coeffs: Dict[int, float] = {}

    def visit(node: TreeNode, weight: float) -> None:
        if node.is_leaf():
            coeffs[id(node)] = coeffs.get(id(node), 0.0) + weight
            return
        m = len(node.children)
        lam = m / (m + 1.0)
        coeffs[id(node)] = coeffs.get(id(node), 0.0) + lam * weight
        for child in node.children:
            visit(child, (1.0 - lam) * weight + seeds.get(id(child), 0.0))

    visit(root, seeds.get(id(root), 0.0))
    return coeffs


def layer_coefficients(
    coeffs: Dict[int, float], layer_nodes: Sequence[TreeNode]
) -> np.ndarray:
    return np.array([coeffs.get(id(n), 0.0) for n in layer_nodes])


# ---------------------------------------------------------------------------
# Optimal layer assignment
# ---------------------------------------------------------------------------

def expected_layer_estimates(
    freqs: np.ndarray,
    assignment: np.ndarray,
    n_real: int,
    m_fake: int,
    params: OueParams,
) -> np.ndarray:
    """Expected pre-normalization estimates given real frequencies and fakes.

    ``freqs`` are the attacker-assumed real per-node frequencies; the fake
    reports contribute ``assignment`` deterministic 1-counts.
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.float64)
    total = n_real + m_fake
    counts = n_real * (freqs * params.p + (1.0 - freqs) * params.q) + assignment
    return (counts - total * params.q) / (total * (params.p - params.q))


def assignment_objective(
    coeffs: np.ndarray,
    freqs: np.ndarray,
    assignment: np.ndarray,
    n_real: int,
    m_fake: int,
    params: OueParams,
) -> float:
    """Coefficient-weighted normalized expected estimate for one assignment."""
    est = expected_layer_estimates(freqs, assignment, n_real, m_fake, params)
    return float(np.dot(coeffs, norm_sub(est).normalized))


def _check_search_inputs(sorted_coeffs: np.ndarray, m_fake: int) -> np.ndarray:
    c = np.asarray(sorted_coeffs, dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty coefficient vector")
    if np.any(np.diff(c) > 1e-12):
        raise ValueError("coefficients must be sorted descending")
    if not np.any(c > 0):
        raise ValueError("all coefficients zero; use a heuristic strategy")
    if m_fake < 0:
        raise ValueError("fake count must be >= 0")
    return c


def aot_assignment_bruteforce(
    sorted_coeffs: Sequence[float],
    m_fake: int,
    n_real: int,
    freqs: Sequence[float],
    params: OueParams,
) -> Assignment:
    """Best front-loaded assignment by direct enumeration.

    Scans every assignment of the form (M, ..., M, c, 0, ..., 0) over the
    coefficient-sorted nodes (plus the all-M assignment), which provably
    contains a global integer optimum of the objective.
    """
    c = _check_search_inputs(np.asarray(sorted_coeffs), m_fake)
    f = np.asarray(freqs, dtype=np.float64)
    n_nodes = c.size
    best_val = -np.inf
    best: Optional[np.ndarray] = None
    assignment = np.zeros(n_nodes, dtype=np.float64)
    for k in range(n_nodes):
        assignment[:k] = m_fake
        assignment[k:] = 0.0
        for count in range(m_fake):
            assignment[k] = count
            val = assignment_objective(c, f, assignment, n_real, m_fake, params)
            if val > best_val:
                best_val = val
                best = assignment.copy()
    full = np.full(n_nodes, float(m_fake))
    val = assignment_objective(c, f, full, n_real, m_fake, params)
    if val > best_val:
        best_val = val
        best = full
    assert best is not None
    return Assignment(best.astype(np.int64), best_val)


def aot_assignment_fast(
    sorted_coeffs: Sequence[float],
    m_fake: int,
    n_real: int,
    freqs: Sequence[float],
    params: OueParams,
) -> Assignment:
    """Best front-loaded assignment via incremental threshold tracking.

    For each base assignment (first ``i`` nodes at M) a trailing count ``t``
    on node ``i`` sweeps [0, M].  The normalization threshold and objective
    are piecewise linear in ``t`` — the threshold is flat while node ``i``
    sits below it and then rises at rate 1/|active set|, with active nodes
    dropping out in ascending order of their fixed values — so the maximum
    over integers is attained at a segment endpoint.  Total cost is
    O(L^2 log L) instead of O(L * M) normalizations.
    """
    c = _check_search_inputs(np.asarray(sorted_coeffs), m_fake)
    f = np.asarray(freqs, dtype=np.float64)
    n_nodes = c.size
    m = float(m_fake)
    total = n_real + m_fake
    unit = 1.0 / (total * (params.p - params.q))

    best_val = -np.inf
    best_i = 0
    best_t = 0
    base = np.zeros(n_nodes, dtype=np.float64)

    for i in range(n_nodes):
        base[:i] = m
        base[i:] = 0.0
        values = expected_layer_estimates(f, base, n_real, m_fake, params)
        ns = norm_sub(values)
        delta = ns.delta
        active = values > delta
        obj = float(np.dot(c, np.maximum(values - delta, 0.0)))
        a_size = int(active.sum())
        s_c = float(c[active].sum())

        # Other active nodes exit in ascending order of their fixed values.
        others = np.array([j for j in range(n_nodes) if j != i and active[j]])
        exit_order = others[np.argsort(values[others], kind="stable")] if others.size else others
        ptr = 0

        def record(t_int: float, val: float) -> None:
            nonlocal best_val, best_i, best_t
            if val > best_val + 1e-15:
                best_val = val
                best_i = i
                best_t = int(t_int)

        t = 0.0
        record(0, obj)
        if not active[i]:
            # Flat until node i's value reaches the threshold.
            t_enter = (delta - values[i]) / unit
            if t_enter >= m:
                continue
            t = t_enter
            a_size += 1
            s_c += float(c[i])

        while t < m:
            slope = unit * (c[i] - s_c / a_size)
            if ptr < exit_order.size:
                j = exit_order[ptr]
                t_exit = t + (values[j] - delta) * a_size / unit
            else:
                t_exit = np.inf
            seg_end = min(t_exit, m)
            lo_int = math.ceil(t - 1e-12)
            hi_int = math.floor(seg_end + 1e-12)
            if lo_int <= hi_int:
                record(lo_int, obj + slope * (lo_int - t))
                record(hi_int, obj + slope * (hi_int - t))
            if seg_end >= m:
                break
            obj += slope * (t_exit - t)
            delta = float(values[j])
            t = t_exit
            while ptr < exit_order.size and values[exit_order[ptr]] <= delta:
                s_c -= float(c[exit_order[ptr]])
                a_size -= 1
                ptr += 1

    counts = np.zeros(n_nodes, dtype=np.int64)
    counts[:best_i] = m_fake
    counts[best_i] = best_t
    value = assignment_objective(c, f, counts.astype(np.float64), n_real, m_fake, params)
    return Assignment(counts, value)


def aot_zero_coeff_strategy(
    strategy: str, layer_nodes: Sequence[TreeNode], query: RangeQuery
) -> np.ndarray:
    """Per-node bit pattern for layers whose coefficients are all zero.

    ``zero`` sets nothing, ``one`` sets every node, ``path`` sets exactly the
    nodes whose interval intersects the target query.
    """
    n_nodes = len(layer_nodes)
    if strategy == "zero":
        return np.zeros(n_nodes, dtype=np.uint8)
    if strategy == "one":
        return np.ones(n_nodes, dtype=np.uint8)
    if strategy == "path":
        lo, hi = query.intervals[0]
        bits = [1 if (n.lo < hi and n.hi > lo) else 0 for n in layer_nodes]
        return np.array(bits, dtype=np.uint8)
    raise ValueError(f"unknown strategy {strategy!r} (expected zero|one|path)")


class OptimalTreeAttack:
    """Layer hook implementing the optimal-assignment tree attack.

    At each served layer the attacker rebuilds the tree implied by the
    frontier, extends it with the growth it predicts under a uniform-data
    assumption, computes per-node coefficients for the target query, and
    spreads its fake 1-bits according to the optimal front-loaded assignment.
    Layers where every coefficient vanishes fall back to a simple bit
    strategy (``zero`` / ``one`` / ``path``).
    """

    def __init__(
        self,
        config: TreeConfig,
        query: RangeQuery,
        assumed_n: int,
        rho: float,
        strategy: str = "one",
        use_fast: bool = True,
    ):
        if assumed_n < 1:
            raise ValueError("assumed_n must be >= 1")
        if not 0.0 < rho < 1.0:
            raise ValueError("rho must be in (0, 1)")
        if strategy not in ("zero", "one", "path"):
            raise ValueError(f"unknown strategy {strategy!r}")
        self.config = config
        self.query = query
        self.assumed_n = assumed_n
        self.strategy = strategy
        self.use_fast = use_fast
        depth = config.depth
        assumed_m = int(round(assumed_n * rho / (1.0 - rho)))
        self._real_sizes = _partition_sizes(assumed_n, depth, config.layer_user_fractions)
        self._fake_sizes = _partition_sizes(assumed_m, depth, config.layer_user_fractions)
        self.layer = 0

    # -- tree reconstruction & growth prediction ---------------------------

    def _tree_from_frontier(self, frontier: Sequence[TreeNode]) -> TreeNode:
        leaf_set = {(n.lo, n.hi) for n in frontier}

        def build(lo: int, hi: int) -> TreeNode:
            node = TreeNode(lo, hi)
            if (lo, hi) in leaf_set:
                return node
            width = (hi - lo) // self.config.fanout
            node.children = [
                build(lo + k * width, lo + (k + 1) * width)
                for k in range(self.config.fanout)
            ]
            return node

        return build(0, self.config.domain_size)

    def _predict_growth(self, root: TreeNode) -> None:
        c = self.config.domain_size
        frontier = self._leaves(root)
        for layer in range(self.layer, self.config.depth):
            layer_users = self._real_sizes[layer] + self._fake_sizes[layer]
            theta = self.config.threshold_for(layer_users)
            grew = False
            next_frontier: List[TreeNode] = []
            for node in frontier:
                if node.length / c >= theta and node.length >= self.config.fanout:
                    width = node.length // self.config.fanout
                    node.children = [
                        TreeNode(node.lo + k * width, node.lo + (k + 1) * width)
                        for k in range(self.config.fanout)
                    ]
                    next_frontier.extend(node.children)
                    grew = True
                else:
                    next_frontier.append(node)
            if not grew:
                break
            frontier = next_frontier

    @staticmethod
    def _leaves(root: TreeNode) -> List[TreeNode]:
        out: List[TreeNode] = []

        def visit(node: TreeNode) -> None:
            if node.is_leaf():
                out.append(node)
                return
            for child in node.children:
                visit(child)

        visit(root)
        return out

    # -- hook ---------------------------------------------------------------

    def __call__(
        self, frontier: List[TreeNode], m_fake: int, rng: np.random.Generator
    ) -> np.ndarray:
        n_nodes = len(frontier)
        predicted = self._tree_from_frontier(frontier)
        self._predict_growth(predicted)
        coeffs_map = tree_coefficients(predicted, self.query)
        by_interval = {(n.lo, n.hi): coeffs_map.get(id(n), 0.0) for n in self._all_nodes(predicted)}
        coeffs = np.array([by_interval[(n.lo, n.hi)] for n in frontier])
        layer = min(self.layer, self.config.depth - 1)
        self.layer += 1

        if m_fake == 0:
            return np.zeros((0, n_nodes), dtype=np.uint8)
        if not np.any(coeffs > 0):
            bits = aot_zero_coeff_strategy(self.strategy, frontier, self.query)
            return np.tile(bits, (m_fake, 1))

        order = np.argsort(-coeffs, kind="stable")
        freqs = np.array([n.length for n in frontier], dtype=np.float64)
        freqs /= self.config.domain_size
        n_real = max(self._real_sizes[layer], 1)
        search = aot_assignment_fast if self.use_fast else aot_assignment_bruteforce
        params = OueParams(self.config.epsilon, n_nodes)
        result = search(coeffs[order], m_fake, n_real, freqs[order], params)
        counts = np.zeros(n_nodes, dtype=np.int64)
        counts[order] = result.counts
        return (np.arange(m_fake)[:, None] < counts[None, :]).astype(np.uint8)

    @staticmethod
    def _all_nodes(root: TreeNode) -> List[TreeNode]:
        out: List[TreeNode] = []
        stack = [root]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(node.children)
        return out


# ---------------------------------------------------------------------------
# Adaptive (detection-aware) wrapper
# ---------------------------------------------------------------------------

def aaot_transform(
    report: np.ndarray, n: int, q: float, rng: np.random.Generator
) -> np.ndarray:
    """Resample a fake report's 1-count from the honest OUE law.

    Draws ``X ~ Bin(n-1, q) + Bin(1, 1/2)`` and flips random bits so the
    output has exactly ``X`` ones, keeping as much of the original targeting
    pattern as the count allows.
    """
    report = np.asarray(report, dtype=np.uint8).copy()
    if report.size != n:
        raise ValueError("report length mismatch")
    target = int(rng.binomial(n - 1, q)) + int(rng.random() < 0.5)
    ones = np.nonzero(report == 1)[0]
    zeros = np.nonzero(report == 0)[0]
    k = ones.size
    if target > k:
        chosen = rng.choice(zeros, size=target - k, replace=False)
        report[chosen] = 1
    elif target < k:
        chosen = rng.choice(ones, size=k - target, replace=False)
        report[chosen] = 0
    return report


class AdaptiveTreeAttack:
    """Wraps a tree attack hook, resampling each fake report's 1-count."""

    def __init__(self, inner, epsilon: float):
        self.inner = inner
        self.epsilon = epsilon

    def __call__(
        self, frontier: List[TreeNode], m_fake: int, rng: np.random.Generator
    ) -> np.ndarray:
        matrix = np.asarray(self.inner(frontier, m_fake, rng), dtype=np.uint8)
        n = len(frontier)
        q = OueParams(self.epsilon, max(n, 1)).q
        for row in range(matrix.shape[0]):
            matrix[row] = aaot_transform(matrix[row], n, q, rng)
        return matrix
