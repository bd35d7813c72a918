"""Hypothesis-test detectors for poisoned collection rounds.

* Tree rounds (OUE): the number of 1s in an honest report follows
  ``Bin(n-1, q) + Bin(1, 1/2)``.  The detector counts reports whose 1-count
  falls outside a central interval and flags the round when that count
  exceeds a normal-approximation threshold.
* Grid rounds (OLH): honest users pick hash functions uniformly, so the
  maximum per-function usage follows a balls-into-bins law estimated by
  simulation; the round is flagged when the observed maximum load is in the
  distribution's upper alpha tail.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

__all__ = [
    "DetectionResult",
    "TreeDefenseParams",
    "ones_count_cdf",
    "tree_detect",
    "MaxLoadCdf",
    "max_load_cdf",
    "grid_detect",
]


@dataclass(frozen=True)
class DetectionResult:
    detected: bool
    statistic: float
    threshold: float
    metadata: dict = field(default_factory=dict)


@dataclass
class TreeDefenseParams:
    """Parameters of the ones-count interval test.

    ``tail_reading``: when True (default) the closed-form fraction is
    interpreted as the expected mass *outside* the interval; the False
    setting interprets it as the inside mass (exposed for sensitivity
    analysis; the two readings coincide only at f = 1/2).
    """

    alpha: float = 0.005
    tail_reading: bool = True

    @property
    def z_alpha(self) -> float:
        return float(stats.norm.ppf(1.0 - self.alpha))

    @property
    def outside_mass(self) -> float:
        f = (1.0 - math.sqrt(1.0 / (1.0 + self.z_alpha**2))) / 2.0
        return f if self.tail_reading else 1.0 - f


def ones_count_cdf(n: int, q: float) -> np.ndarray:
    """Exact CDF of the honest OUE 1-count: Bin(n-1, q) + Bin(1, 1/2).

    Returns an array ``F`` with ``F[x] = P[count <= x]`` for x in 0..n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    noise = stats.binom.pmf(np.arange(n), n - 1, q)
    pmf = np.convolve(noise, [0.5, 0.5])
    return np.minimum(np.cumsum(pmf), 1.0)


def tree_detect(
    ones_counts: Sequence[int],
    n: int,
    epsilon: float,
    params: Optional[TreeDefenseParams] = None,
) -> DetectionResult:
    """Ones-count interval test over one OUE round.

    The central interval [I-, I+] holds all but ``outside_mass`` of the
    honest 1-count law (split evenly between tails); the statistic is the
    number of reports outside it, thresholded at its honest mean plus
    ``z_alpha`` standard deviations.
    """
    params = params or TreeDefenseParams()
    counts = np.asarray(ones_counts, dtype=np.int64)
    if counts.size == 0:
        raise ValueError("empty round")
    q = 1.0 / (np.exp(epsilon) + 1.0)
    cdf = ones_count_cdf(n, q)
    f_out = params.outside_mass
    half = f_out / 2.0

    below = np.nonzero(cdf <= half)[0]
    i_minus = int(below[-1]) if below.size else -1
    i_plus = int(np.nonzero(cdf >= 1.0 - half)[0][0])

    n_users = counts.size
    statistic = float(np.count_nonzero((counts < i_minus) | (counts > i_plus)))
    threshold = n_users * f_out + params.z_alpha * math.sqrt(
        n_users * f_out * (1.0 - f_out)
    )
    return DetectionResult(
        detected=statistic > threshold,
        statistic=statistic,
        threshold=threshold,
        metadata={"interval": (i_minus, i_plus), "outside_mass": f_out},
    )


@dataclass(frozen=True)
class MaxLoadCdf:
    """Empirical distribution of the max balls-into-bins occupancy."""

    n_balls: int
    n_bins: int
    samples: np.ndarray

    def cdf(self, x: float) -> float:
        return float(np.mean(self.samples <= x))

    def threshold(self, alpha: float) -> int:
        """Smallest integer load whose CDF value exceeds ``1 - alpha``."""
        for x in range(int(self.samples.max()) + 2):
            if self.cdf(x) > 1.0 - alpha:
                return x
        return int(self.samples.max()) + 1


_CDF_CACHE: Dict[Tuple[int, int, int], MaxLoadCdf] = {}
_CDF_LOCK = threading.Lock()


def max_load_cdf(n_balls: int, n_bins: int, trials: int = 1000) -> MaxLoadCdf:
    """Simulated max-load distribution, cached per (n_balls, n_bins, trials).

    The simulation seed is derived from the cache key, so results are
    deterministic across processes.
    """
    if trials < 100:
        raise ValueError("trials must be >= 100")
    key = (int(n_balls), int(n_bins), int(trials))
    with _CDF_LOCK:
        cached = _CDF_CACHE.get(key)
    if cached is not None:
        return cached
    rng = np.random.default_rng(np.random.SeedSequence([0x6C0AD, *key]))
    samples = np.empty(trials, dtype=np.int64)
    for t in range(trials):
        balls = rng.integers(0, n_bins, size=n_balls)
        samples[t] = np.bincount(balls, minlength=n_bins).max()
    result = MaxLoadCdf(key[0], key[1], samples)
    with _CDF_LOCK:
        _CDF_CACHE[key] = result
    return result


def grid_detect(
    fn_ids: Sequence[int],
    family_size: int,
    alpha: float = 0.005,
    trials: int = 1000,
) -> DetectionResult:
    """Max-load test over one OLH round's reported hash functions.

    Flags the round when the observed maximum per-function usage lands in
    the simulated honest distribution's upper ``alpha`` tail.  The rough
    analytic threshold ``log N / (log N - log |H|)`` is reported as metadata
    only (and omitted where it is singular).
    """
    fn_ids = np.asarray(fn_ids, dtype=np.int64)
    if fn_ids.size == 0:
        raise ValueError("empty round")
    usage = np.unique(fn_ids, return_counts=True)[1]
    statistic = float(usage.max())
    cdf = max_load_cdf(fn_ids.size, family_size, trials)
    threshold = cdf.threshold(alpha) - 1.0
    n = float(fn_ids.size)
    analytic = None
    if family_size != n and n > 1:
        denominator = math.log(n) - math.log(family_size)
        if denominator != 0:
            analytic = math.log(n) / denominator
    return DetectionResult(
        detected=statistic > threshold,
        statistic=statistic,
        threshold=threshold,
        metadata={"analytic_threshold": analytic, "cdf_value": cdf.cdf(statistic)},
    )
