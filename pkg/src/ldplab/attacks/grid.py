"""Poisoning attacks against the grid protocol.

Attack families:

* a max-gain baseline: every fake user in a grid reports the hash pair whose
  support covers the most in-range cells;
* a constraint-driven attack that, per grid, searches for a hash pair whose
  support lies entirely inside the target range, meets an analytic minimum
  support size, and agrees column-by-column with the pairs already chosen
  for grids sharing an attribute (so that one consistency + normalization
  pass concentrates all mass in the target range);
* a heuristic fallback ranking hash pairs by (violation, support size);
* an adaptive variant that caps per-function usage below the max-load
  detector's threshold and spreads fake reports over many functions via a
  quota matching between grids and functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..freq_oracles import HashFamily, HashPair
from ..grid_protocol import GridConfig, GridKey, cells_in_range, grid_keys
from ..tree_protocol import RangeQuery

__all__ = [
    "SizeConstraints",
    "ColumnBook",
    "mga_grid",
    "MgaGridAttack",
    "aog_size_constraints",
    "aog_find_hash_pair",
    "GridRangeAttack",
    "haog_preference",
    "haog_best_pair",
    "HeuristicGridAttack",
    "aaog_compute_load_limit",
    "match_functions_to_grids",
    "AdaptiveGridAttack",
]


@dataclass(frozen=True)
class SizeConstraints:
    """Analytic minimum support sizes for 1-D and 2-D grids."""

    w1: float
    w2: float

    @property
    def w1_int(self) -> int:
        return int(math.ceil(self.w1))

    @property
    def w2_int(self) -> int:
        return int(math.ceil(self.w2))


# ---------------------------------------------------------------------------
# Support enumeration helpers
# ---------------------------------------------------------------------------

def _support_tables(family: HashFamily, n_cells: int) -> Tuple[np.ndarray, np.ndarray]:
    """(fn_ids of the random sub-family, key table of shape (F, n_cells))."""
    return family.random_fn_ids(), family.key_table(n_cells)


def _support_stats(
    table: np.ndarray, in_range: np.ndarray, g: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Per (function, key): total support size and in-range support size."""
    n_fns = table.shape[0]
    sizes = np.zeros((n_fns, g), dtype=np.int64)
    inter = np.zeros((n_fns, g), dtype=np.int64)
    for key in range(g):
        hit = table == key
        sizes[:, key] = hit.sum(axis=1)
        inter[:, key] = (hit & in_range[None, :]).sum(axis=1)
    return sizes, inter


def _random_argmax(values: np.ndarray, rng: np.random.Generator) -> Tuple[int, int]:
    best = values.max()
    ties = np.argwhere(values == best)
    pick = ties[rng.integers(0, len(ties))]
    return int(pick[0]), int(pick[1])


# ---------------------------------------------------------------------------
# Max-gain baseline
# ---------------------------------------------------------------------------

def mga_grid(
    family: HashFamily, in_range: np.ndarray, rng: np.random.Generator
) -> HashPair:
    """Hash pair with the largest in-range support, ties broken uniformly."""
    in_range = np.asarray(in_range, dtype=bool)
    if not in_range.any():
        raise ValueError("query covers no cell of this grid")
    fn_ids, table = _support_tables(family, in_range.size)
    _, inter = _support_stats(table, in_range, family.g)
    row, key = _random_argmax(inter, rng)
    return HashPair(int(fn_ids[row]), key)


class MgaGridAttack:
    """Grid hook: all fakes in a grid report the max-gain pair."""

    def __init__(self, config: GridConfig, query: RangeQuery):
        self.config = config
        self.query = query
        self.family = config.family()

    def __call__(
        self, key: GridKey, m_fake: int, rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray]:
        mask = cells_in_range(self.config, self.query, key)
        pair = mga_grid(self.family, mask, rng)
        return (
            np.full(m_fake, pair.fn_id, dtype=np.int64),
            np.full(m_fake, pair.key, dtype=np.int64),
        )


# ---------------------------------------------------------------------------
# Constraint-driven attack
# ---------------------------------------------------------------------------

def aog_size_constraints(
    rho: float, g: int, g1: int, g2: int, d: int
) -> SizeConstraints:
    """Minimum in-range support sizes guaranteeing full concentration.

    Derived bounds on how much mass normalization can strip from the target
    cells; infeasible (non-positive denominator) configurations raise.
    """
    if rho <= 0:
        raise ValueError("rho must be > 0 for the size constraints")
    factor = (0.5 - 1.0 / g) / rho
    den1 = (d - 1) * (g1 - 2 * g2) + g2 * g2
    if den1 <= 0:
        raise ValueError("1-D size constraint infeasible: non-positive denominator")
    w1 = factor * ((d - 1) * g1 + g2 * g2) / den1
    den2 = g2 - 3.0 + 3.0 * g1 / (g1 * (d - 1) + g2 * g2)
    if den2 <= 0:
        raise ValueError("2-D size constraint infeasible: non-positive denominator")
    w2 = factor * g2 / den2
    return SizeConstraints(w1, w2)


@dataclass
class ColumnBook:
    """Per-attribute record of per-column support counts across grids.

    The first grid that picks a pair for an attribute records its counts;
    later grids must match each recorded column count up to +1.
    """

    g2: int
    counts: Dict[int, np.ndarray] = field(default_factory=dict)

    def check(self, attr: int, col_counts: np.ndarray) -> bool:
        recorded = self.counts.get(attr)
        if recorded is None:
            return True
        diff = np.asarray(col_counts) - recorded
        mask = recorded >= 0
        return bool(np.all((diff[mask] == 0) | (diff[mask] == 1)))

    def record(self, attr: int, col_counts: np.ndarray) -> None:
        recorded = self.counts.setdefault(attr, np.full(self.g2, -1, dtype=np.int64))
        undefined = recorded < 0
        recorded[undefined] = np.asarray(col_counts, dtype=np.int64)[undefined]


def _attr_columns(config: GridConfig, key: GridKey) -> Dict[int, np.ndarray]:
    """Map each attribute of the grid to the column index of every cell."""
    if key[0] == "1d":
        span = config.g1 // config.g2
        return {key[1]: np.arange(config.g1) // span}
    _, i, j = key
    idx = np.arange(config.g2 * config.g2)
    return {i: idx // config.g2, j: idx % config.g2}


def aog_find_hash_pair(
    family: HashFamily,
    in_range: np.ndarray,
    min_support: int,
    attr_columns: Dict[int, np.ndarray],
    book: ColumnBook,
    rng: Optional[np.random.Generator] = None,
) -> Optional[HashPair]:
    """First hash pair in scan order satisfying all constraints.

    Conditions: support entirely in range, support size >= ``min_support``,
    and per-column counts compatible with the book for every supplied
    attribute.  On success the book is updated; on failure returns ``None``.

    Scan order is (function asc, key asc) when ``rng`` is None.  Passing a
    generator scans the constraint-passing candidates in a seeded random
    order instead: the ascending order always reaches the maximally skewed
    single-column supports first, whose recorded column counts are mutually
    unsatisfiable across grids sharing two attributes.
    """
    in_range = np.asarray(in_range, dtype=bool)
    fn_ids, table = _support_tables(family, in_range.size)
    sizes, inter = _support_stats(table, in_range, family.g)
    ok = (sizes == inter) & (sizes >= min_support)
    candidates = np.argwhere(ok)
    if rng is not None and len(candidates):
        candidates = candidates[rng.permutation(len(candidates))]
    for row, key in candidates:
        support = table[row] == key
        col_counts = {
            attr: np.bincount(cols[support], minlength=book.g2)
            for attr, cols in attr_columns.items()
        }
        if all(book.check(attr, cc) for attr, cc in col_counts.items()):
            for attr, cc in col_counts.items():
                book.record(attr, cc)
            return HashPair(int(fn_ids[row]), int(key))
    return None


class GridRangeAttack:
    """Grid hook for the constraint-driven attack (fresh instance per run).

    ``begin`` plans a compliant pair for every grid before the rounds start,
    restarting the greedy scan with a fresh candidate order whenever some
    grid cannot extend the column book (up to ``max_restarts`` attempts).
    Grids left without a compliant pair fall back to the heuristic pair;
    ``all_succeeded`` reports whether every relevant grid got a compliant
    pair, and ``fallback_keys`` lists the grids that did not.
    """

    def __init__(
        self,
        config: GridConfig,
        query: RangeQuery,
        rho: float,
        max_restarts: int = 50,
        shuffle_scan: bool = True,
    ):
        self.config = config
        self.query = query
        self.family = config.family()
        self.constraints = aog_size_constraints(
            rho, self.family.g, config.g1, config.g2, config.d
        )
        self.max_restarts = max_restarts
        self.shuffle_scan = shuffle_scan
        self.book = ColumnBook(config.g2)
        self.fallback_keys: List[GridKey] = []
        self.chosen: Dict[GridKey, HashPair] = {}

    @property
    def all_succeeded(self) -> bool:
        return bool(self.chosen) and not self.fallback_keys

    def _relevant_keys(self) -> List[GridKey]:
        keys = grid_keys(self.config.d)
        return [k for k in keys if any(a in self.query.attrs for a in k[1:])]

    def _candidates(self, keys: List[GridKey]) -> Dict[GridKey, dict]:
        """Pre-filter subset/size-compliant pairs and their column counts."""
        tables: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        out: Dict[GridKey, dict] = {}
        for key in keys:
            mask = cells_in_range(self.config, self.query, key)
            if mask.size not in tables:
                tables[mask.size] = _support_tables(self.family, mask.size)
            fn_ids, table = tables[mask.size]
            sizes, inter = _support_stats(table, mask, self.family.g)
            w = self.constraints.w1_int if key[0] == "1d" else self.constraints.w2_int
            cand = np.argwhere((sizes == inter) & (sizes >= w))
            supports = np.stack(
                [table[row] == col_key for row, col_key in cand]
            ) if len(cand) else np.zeros((0, mask.size), dtype=bool)
            counts = {}
            for attr, cols in _attr_columns(self.config, key).items():
                if attr not in self.query.attrs:
                    continue
                onehot = cols[:, None] == np.arange(self.config.g2)[None, :]
                counts[attr] = supports.astype(np.int64) @ onehot.astype(np.int64)
            out[key] = {"fn_ids": fn_ids, "cand": cand, "counts": counts}
        return out

    def _plan_once(
        self,
        keys: List[GridKey],
        candidates: Dict[GridKey, dict],
        rng: Optional[np.random.Generator],
    ) -> Tuple[Dict[GridKey, HashPair], List[GridKey], ColumnBook]:
        book = ColumnBook(self.config.g2)
        chosen: Dict[GridKey, HashPair] = {}
        failed: List[GridKey] = []
        for key in keys:
            info = candidates[key]
            n_cand = len(info["cand"])
            order = rng.permutation(n_cand) if rng is not None else range(n_cand)
            found = None
            for idx in order:
                counts = {attr: cc[idx] for attr, cc in info["counts"].items()}
                if all(book.check(attr, cc) for attr, cc in counts.items()):
                    for attr, cc in counts.items():
                        book.record(attr, cc)
                    row, col_key = info["cand"][idx]
                    found = HashPair(int(info["fn_ids"][row]), int(col_key))
                    break
            if found is None:
                failed.append(key)
            else:
                chosen[key] = found
        return chosen, failed, book

    def begin(
        self, fake_counts: Dict[GridKey, int], n_total: int, rng: np.random.Generator
    ) -> None:
        keys = self._relevant_keys()
        candidates = self._candidates(keys)
        attempts = self.max_restarts if self.shuffle_scan else 1
        best: Optional[Tuple[Dict[GridKey, HashPair], List[GridKey], ColumnBook]] = None
        for _ in range(attempts):
            plan = self._plan_once(keys, candidates, rng if self.shuffle_scan else None)
            if best is None or len(plan[1]) < len(best[1]):
                best = plan
            if not plan[1]:
                break
        assert best is not None
        self.chosen, self.fallback_keys, self.book = best
        for key in self.fallback_keys:
            mask = cells_in_range(self.config, self.query, key)
            self.chosen[key] = haog_best_pair(
                self.family, mask, key[0] == "1d", self.config, rng
            )
        for key in grid_keys(self.config.d):
            if key not in self.chosen:  # grid with no query attribute
                mask = cells_in_range(self.config, self.query, key)
                self.chosen[key] = haog_best_pair(
                    self.family, mask, key[0] == "1d", self.config, rng
                )

    def __call__(
        self, key: GridKey, m_fake: int, rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray]:
        if not self.chosen:
            self.begin({}, 0, rng)
        pair = self.chosen[key]
        return (
            np.full(m_fake, pair.fn_id, dtype=np.int64),
            np.full(m_fake, pair.key, dtype=np.int64),
        )


# ---------------------------------------------------------------------------
# Heuristic attack
# ---------------------------------------------------------------------------

def haog_preference(
    support_size: float, in_range_size: float, is_one_d: bool, config: GridConfig
) -> Tuple[float, float]:
    """(primary, secondary) ranking of a hash pair for one grid.

    Primary favors supports with no out-of-range spill; secondary favors
    large supports.  1-D grids are rescaled by ``g1/g2`` so their scores are
    comparable with 2-D grids.
    """
    scale = (config.g1 / config.g2) if is_one_d else 1.0
    return ((in_range_size - support_size) / scale, support_size / scale)


def _preference_matrices(
    family: HashFamily, in_range: np.ndarray, is_one_d: bool, config: GridConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fn_ids, primary, secondary) per (function, key)."""
    fn_ids, table = _support_tables(family, in_range.size)
    sizes, inter = _support_stats(table, in_range, family.g)
    scale = (config.g1 / config.g2) if is_one_d else 1.0
    return fn_ids, (inter - sizes) / scale, sizes / scale


def haog_best_pair(
    family: HashFamily,
    in_range: np.ndarray,
    is_one_d: bool,
    config: GridConfig,
    rng: np.random.Generator,
) -> HashPair:
    """Lexicographic argmax of the heuristic preference, ties uniform."""
    fn_ids, primary, secondary = _preference_matrices(family, in_range, is_one_d, config)
    best_primary = primary.max()
    candidates = primary == best_primary
    score = np.where(candidates, secondary, -np.inf)
    row, key = _random_argmax(score, rng)
    return HashPair(int(fn_ids[row]), key)


class HeuristicGridAttack:
    """Grid hook: all fakes in a grid report the heuristic-best pair."""

    def __init__(self, config: GridConfig, query: RangeQuery):
        self.config = config
        self.query = query
        self.family = config.family()

    def __call__(
        self, key: GridKey, m_fake: int, rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray]:
        mask = cells_in_range(self.config, self.query, key)
        pair = haog_best_pair(self.family, mask, key[0] == "1d", self.config, rng)
        return (
            np.full(m_fake, pair.fn_id, dtype=np.int64),
            np.full(m_fake, pair.key, dtype=np.int64),
        )


# ---------------------------------------------------------------------------
# Adaptive (detection-aware) attack
# ---------------------------------------------------------------------------

def aaog_compute_load_limit(
    threshold: float,
    beta: float,
    m_round: int,
    n_round_real: int,
    family_size: int,
    trials: int,
    rng: np.random.Generator,
) -> int:
    """Largest per-function usage cap that keeps detection risk below beta.

    For candidate cap ``l`` the attacker spreads its ``m_round`` reports over
    ``ceil(m_round / l)`` functions.  The detector fires when a load reaches
    ``threshold``, so a round is safe if the honest occupancy of every chosen
    function stays below ``threshold - l``.  The honest balls-into-bins
    occupancy is simulated ``trials`` times; since the attacker's functions
    are an exchangeable sample of the bins, the per-function tail is pooled
    over all bins of all trials and the round failure probability is
    ``1 - (1 - tail)^n_fns``.  Returns 0 when no cap is safe.
    """
    if m_round < 1:
        return 0
    load_hist = np.zeros(n_round_real + 1, dtype=np.int64)
    for _ in range(trials):
        occ = np.bincount(
            rng.integers(0, family_size, size=n_round_real),
            minlength=family_size,
        )
        load_hist += np.bincount(occ, minlength=n_round_real + 1)
    # tail[k] = fraction of (bin, trial) pairs with load >= k.
    tail = load_hist[::-1].cumsum()[::-1] / (family_size * trials)
    l_max = min(int(math.ceil(threshold)) - 1, m_round)
    for cap in range(l_max, 0, -1):
        n_fns = math.ceil(m_round / cap)
        if n_fns > family_size:
            continue
        # A chosen function fails if its honest load reaches threshold - cap.
        k_bad = int(math.ceil(threshold - cap))
        if k_bad <= 0:
            continue
        p_bad = tail[k_bad] if k_bad <= n_round_real else 0.0
        if 1.0 - (1.0 - p_bad) ** n_fns <= beta:
            return cap
    return 0


def match_functions_to_grids(
    values: np.ndarray, quotas: Sequence[int]
) -> List[List[int]]:
    """Assign each function to at most one grid under per-grid quotas.

    ``values[g, f]`` is the common worth of function ``f`` to grid ``g``
    (both sides rank by the same matrix, so the greedy best-pair-first
    assignment is a stable matching).  Returns the list of function columns
    matched to each grid.
    """
    n_grids, n_fns = values.shape
    if sum(quotas) > n_fns:
        raise ValueError("not enough functions to fill all quotas")
    order = np.argsort(-values, axis=None, kind="stable")
    remaining = list(quotas)
    taken = np.zeros(n_fns, dtype=bool)
    matched: List[List[int]] = [[] for _ in range(n_grids)]
    needed = sum(quotas)
    for flat in order:
        g_idx, f_idx = divmod(int(flat), n_fns)
        if remaining[g_idx] > 0 and not taken[f_idx]:
            matched[g_idx].append(f_idx)
            taken[f_idx] = True
            remaining[g_idx] -= 1
            needed -= 1
            if needed == 0:
                break
    return matched


class AdaptiveGridAttack:
    """Grid hook spreading fake reports to evade the max-load detector.

    ``begin`` (called by the protocol before any grid round) computes the
    detector's threshold, the safe per-function cap L, and a stable quota
    matching of hash functions to grids; each matched function is then used
    by at most L fake users with its best key for that grid.  ``beta`` is the
    tolerated probability of being flagged in *any* round, split evenly
    across the rounds that carry fakes.
    """

    def __init__(
        self,
        config: GridConfig,
        query: RangeQuery,
        alpha: float = 0.005,
        beta: float = 0.1,
        load_trials: int = 200,
        cdf_trials: int = 1000,
    ):
        self.config = config
        self.query = query
        self.family = config.family()
        self.alpha = alpha
        self.beta = beta
        self.load_trials = load_trials
        self.cdf_trials = cdf_trials
        self.load_limit: Optional[int] = None
        self._plan: Dict[GridKey, Tuple[np.ndarray, np.ndarray]] = {}

    def begin(
        self, fake_counts: Dict[GridKey, int], n_total: int, rng: np.random.Generator
    ) -> None:
        from ..defenses import max_load_cdf

        family_size = self.family.n_random_functions
        n_groups = self.config.n_groups
        round_size = max(n_total // n_groups, 1)
        cdf = max_load_cdf(round_size, family_size, self.cdf_trials)
        threshold = cdf.threshold(self.alpha)
        m_round = max(fake_counts.values()) if fake_counts else 0
        # beta bounds the chance of being caught anywhere; the detector runs
        # once per grid round, so split the budget across the rounds that
        # carry fakes.
        n_rounds = sum(1 for m in fake_counts.values() if m > 0)
        beta_round = (
            1.0 - (1.0 - self.beta) ** (1.0 / n_rounds) if n_rounds else self.beta
        )
        self.load_limit = aaog_compute_load_limit(
            threshold,
            beta_round,
            m_round,
            max(round_size - m_round, 0),
            family_size,
            self.load_trials,
            rng,
        )
        if self.load_limit < 1:
            raise RuntimeError(
                "adaptive grid attack infeasible: no per-function cap is safe "
                f"at threshold {threshold} and beta {self.beta}"
            )

        keys = [k for k, m in fake_counts.items() if m > 0]
        fn_ids = self.family.random_fn_ids()
        values = np.zeros((len(keys), fn_ids.size))
        best_keys = np.zeros((len(keys), fn_ids.size), dtype=np.int64)
        for g_idx, key in enumerate(keys):
            mask = cells_in_range(self.config, self.query, key)
            _, primary, secondary = _preference_matrices(
                self.family, mask, key[0] == "1d", self.config
            )
            score = primary * 1e6 + secondary
            best_keys[g_idx] = score.argmax(axis=1)
            values[g_idx] = score.max(axis=1)
        quotas = [math.ceil(fake_counts[k] / self.load_limit) for k in keys]
        matched = match_functions_to_grids(values, quotas)
        for g_idx, key in enumerate(keys):
            m_fake = fake_counts[key]
            fns: List[int] = []
            rep_keys: List[int] = []
            left = m_fake
            for f_idx in matched[g_idx]:
                use = min(self.load_limit, left)
                fns.extend([int(fn_ids[f_idx])] * use)
                rep_keys.extend([int(best_keys[g_idx, f_idx])] * use)
                left -= use
                if left == 0:
                    break
            self._plan[key] = (
                np.array(fns, dtype=np.int64),
                np.array(rep_keys, dtype=np.int64),
            )

    def __call__(
        self, key: GridKey, m_fake: int, rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray]:
        if key not in self._plan:
            raise RuntimeError("begin() was not called before the grid rounds")
        fns, rep_keys = self._plan[key]
        if fns.size != m_fake:
            raise RuntimeError("fake count mismatch with the planned matching")
        return fns, rep_keys
