"""Stochastic generalized equations ``0 in E[A(x, w)] + B(x)`` and their oracles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import FeasibleSet, normal_cone_directions, resolvent_normal_cone

MASK64 = (1 << 64) - 1


class OracleError(ValueError):
    """Bad oracle input (dimension mismatch, empty batch)."""


def rng_stream(seed: int, k: int = 0, half: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, iteration, half-step flag)``.

    Sample ``j`` of a batch is row ``j`` of a single ``(n, dim)`` draw, so the
    full key is ``(seed, k, half, j)``. Equal keys give bit-identical draws.
    """
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64,
                                                counter=[0, int(half), int(k), 0]))


@dataclass(frozen=True)
class MinibatchEstimate:
    value: np.ndarray
    batch_size: int
    evaluations_consumed: int


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A stochastic generalized equation with analytic constants.

    ``sample_batch(x, n, rng)`` returns an ``(n, dimension)`` array of i.i.d.
    draws of ``A(x, w)``; ``resolvent(v, gamma)`` evaluates ``(I + gamma B)^{-1} v``.
    ``b_elements(y)`` returns ``(base, directions)``: one element ``base`` of
    ``B(y)`` and unit rays ``d`` with ``base + t d`` in ``B(y)`` for ``t >= 0``.
    It is only needed for gap estimates.

    ``draw_scenarios(nu, rng)`` and ``saa_map(x, scenarios)`` freeze ``nu``
    draws of the randomness and evaluate the sample-average map at any ``x``;
    both are needed only for sample-average approximation.
    """

    dimension: int
    mean_map: Callable[[np.ndarray], np.ndarray]
    sample_batch: Callable[[np.ndarray, int, np.random.Generator], np.ndarray]
    resolvent: Callable[[np.ndarray, float], np.ndarray]
    lipschitz_L: float
    strong_monotonicity_sigma: float = 0.0
    noise_nu1: float = 0.0
    noise_nu2: float = 0.0
    known_solution: Optional[np.ndarray] = None
    domain_bound_DT: Optional[float] = None
    feasible_set: Optional[FeasibleSet] = None
    b_elements: Optional[Callable[[np.ndarray], tuple]] = None
    draw_scenarios: Optional[Callable[[int, np.random.Generator], object]] = None
    saa_map: Optional[Callable[[np.ndarray, object], np.ndarray]] = None
    noiseless: bool = False
    name: str = "problem"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dimension < 1:
            raise OracleError("dimension must be positive")
        if not self.lipschitz_L > 0:
            raise OracleError("lipschitz_L must be positive")
        if self.strong_monotonicity_sigma < 0 or self.noise_nu1 < 0 or self.noise_nu2 < 0:
            raise OracleError("sigma and noise amplitudes must be nonnegative")

    def check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise OracleError(f"expected a vector of length {self.dimension}, got shape {x.shape}")
        return x


def eval_mean(problem: ProblemSpec, x) -> np.ndarray:
    """Exact expectation ``A(x)``."""
    return problem.mean_map(problem.check(x))


def sample(problem: ProblemSpec, x, rng: np.random.Generator) -> np.ndarray:
    """One draw of ``A(x, w)``; equals row 0 of ``sample_batch`` with the same stream."""
    return problem.sample_batch(problem.check(x), 1, rng)[0]


def minibatch(problem: ProblemSpec, x, n: int, rng: np.random.Generator) -> MinibatchEstimate:
    """Average of ``n`` independent draws."""
    if n < 1:
        raise OracleError("batch size must be at least 1")
    x = problem.check(x)
    if problem.noiseless:
        # Averaging n identical floats is not exact in floating point.
        return MinibatchEstimate(problem.mean_map(x), int(n), int(n))
    draws = problem.sample_batch(x, int(n), rng)
    return MinibatchEstimate(draws.mean(axis=0), int(n), int(n))


def gaussian_noise_sampler(mean_map, dimension: int, nu1: float, nu2: float, bias=None):
    """Sampler for ``A(x) + nu1*|x|*g1/sqrt(d) + nu2*g2/sqrt(d) (+ bias)``.

    With independent standard normal ``g1, g2`` the conditional second moment
    of the noise is exactly ``nu1^2 |x|^2 + nu2^2`` (plus ``|bias|^2``).
    """
    root_d = np.sqrt(dimension)
    bias = None if bias is None else np.asarray(bias, dtype=float)

    def sample_batch(x, n, rng):
        mean = mean_map(x)
        if nu1 == 0.0 and nu2 == 0.0:
            out = np.broadcast_to(mean, (n, dimension)).copy()
        else:
            g = rng.standard_normal((n, 2, dimension))
            scale1 = nu1 * np.linalg.norm(x) / root_d
            out = mean + scale1 * g[:, 0, :] + (nu2 / root_d) * g[:, 1, :]
        if bias is not None:
            out += bias
        return out

    return sample_batch


def gaussian_scenarios(mean_map, dimension: int, nu1: float, nu2: float, bias=None):
    """Scenario hooks matching ``gaussian_noise_sampler``.

    Only the scenario averages of ``g1`` and ``g2`` enter the sample-average
    map, so those are what is stored.
    """
    root_d = np.sqrt(dimension)
    bias = None if bias is None else np.asarray(bias, dtype=float)

    def draw(nu, rng):
        g = rng.standard_normal((nu, 2, dimension))
        return g.mean(axis=0)

    def saa_map(x, g):
        out = mean_map(x) + (nu1 * np.linalg.norm(x) / root_d) * g[0] + (nu2 / root_d) * g[1]
        if bias is not None:
            out = out + bias
        return out

    return draw, saa_map


def make_problem(mean_map, dimension: int, feasible_set: FeasibleSet | None = None, *,
                 lipschitz_L: float, sigma: float = 0.0, nu1: float = 0.0, nu2: float = 0.0,
                 bias=None, resolvent=None, **kwargs) -> ProblemSpec:
    """Build a ``ProblemSpec`` with the Gaussian state-dependent noise model.

    ``B`` defaults to the normal cone of ``feasible_set`` (whole space if None).
    A nonzero ``bias`` makes the oracle biased; its norm is folded into ``nu2``.
    """
    if feasible_set is None:
        feasible_set = FeasibleSet.whole_space(dimension)
    if resolvent is None:
        def resolvent(v, gamma, _s=feasible_set):
            return resolvent_normal_cone(_s, gamma, v)
    nu2_eff = nu2
    if bias is not None:
        nu2_eff = float(np.hypot(nu2, np.linalg.norm(bias)))
    kwargs.setdefault("noiseless", nu1 == 0 and nu2 == 0 and bias is None)
    kwargs.setdefault("b_elements", _normal_cone_elements(feasible_set))
    draw, saa_map = gaussian_scenarios(mean_map, dimension, nu1, nu2, bias)
    kwargs.setdefault("draw_scenarios", draw)
    kwargs.setdefault("saa_map", saa_map)
    return ProblemSpec(
        dimension=dimension,
        mean_map=mean_map,
        sample_batch=gaussian_noise_sampler(mean_map, dimension, nu1, nu2, bias),
        resolvent=resolvent,
        lipschitz_L=lipschitz_L,
        strong_monotonicity_sigma=sigma,
        noise_nu1=nu1,
        noise_nu2=nu2_eff,
        feasible_set=feasible_set,
        **kwargs,
    )


def _normal_cone_elements(s: FeasibleSet):
    def elements(y):
        return np.zeros(s.dimension), normal_cone_directions(s, y)

    return elements
