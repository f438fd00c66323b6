"""Solution-quality measures and cross-trial statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.stats import qmc

from .geometry import project
from .oracles import ProblemSpec


class UnsupportedMetric(ValueError):
    """The metric needs problem data that is absent (known solution, bounded domain)."""


@dataclass(frozen=True)
class GapEstimate:
    value: float
    probe_count: int
    is_lower_bound: bool = True


@dataclass(frozen=True)
class TrialStats:
    n_trials: int
    mean_residual: float
    ci_low: float
    ci_high: float
    mean_wall_seconds: float
    mean_error: Optional[float] = None


def residual(problem: ProblemSpec, x, gamma: float) -> float:
    """``|x - (I + gamma B)^{-1}(x - gamma A(x))|`` with the exact mean map."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    x = problem.check(x)
    return float(np.linalg.norm(x - problem.resolvent(x - gamma * problem.mean_map(x), gamma)))


def error_to_solution(problem: ProblemSpec, x) -> float:
    if problem.known_solution is None:
        raise UnsupportedMetric("problem has no known solution")
    return float(np.linalg.norm(problem.check(x) - problem.known_solution))


RAY_MAGNITUDES = (0.01, 0.1, 1.0, 10.0, 100.0)


def _probe_points(problem: ProblemSpec, n: int, rng) -> np.ndarray:
    s = problem.feasible_set
    # keyed Philox streams carry no SeedSequence, so hand Halton a plain integer seed
    seed = int(rng.integers(2 ** 63))
    u = qmc.Halton(d=problem.dimension, scramble=True, seed=seed).random(n)
    if s.kind == "box":
        return s.lower + u * (s.upper - s.lower)
    # capped simplex: map the cube [0, cap]^n into the set
    return np.array([project(s, s.cap * row) for row in u])


def gap_estimate(problem: ProblemSpec, x, probes: int, rng) -> GapEstimate:
    """Lower bound on ``sup_{y in dom T, z in T(y)} z^T (x - y)``.

    ``rng`` seeds the scrambled Halton sequence; the same seed with more
    probes extends the same point set, so the estimate can only grow. The
    projection of ``x`` onto the domain is always probed first.
    """
    s = problem.feasible_set
    if problem.domain_bound_DT is None or s is None or not s.is_bounded:
        raise UnsupportedMetric("gap estimate needs a bounded domain")
    if probes < 1:
        raise ValueError("probes must be >= 1")
    x = problem.check(x)
    ys = np.vstack([project(s, x)[None, :], _probe_points(problem, probes, rng)])
    scale = problem.lipschitz_L * problem.domain_bound_DT
    best = -math.inf
    for y in ys:
        z = problem.mean_map(y)
        diff = x - y
        if problem.b_elements is not None:
            base, rays = problem.b_elements(y)
            z = z + base
            for d in rays:
                slope = float(d @ diff)
                if slope > 0:
                    best = max(best, float(z @ diff) + RAY_MAGNITUDES[-1] * scale * slope)
        best = max(best, float(z @ diff))
    return GapEstimate(max(best, 0.0), int(probes))


def confidence_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation interval ``mean +- z * s / sqrt(n)``."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = stats.norm.ppf(0.5 + level / 2.0)
    m = float(v.mean())
    half = float(z * v.std(ddof=1) / math.sqrt(v.size))
    return m - half, m + half


def summarize(residuals, wall_seconds, errors=None, level: float = 0.95) -> TrialStats:
    residuals = np.asarray(residuals, dtype=float)
    lo, hi = confidence_interval(residuals, level)
    mean_error = None
    if errors is not None and len(errors):
        mean_error = float(np.mean(errors))
    return TrialStats(int(residuals.size), float(residuals.mean()), lo, hi,
                      float(np.mean(wall_seconds)), mean_error)
