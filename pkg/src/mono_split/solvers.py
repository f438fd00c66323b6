"""Variance-reduced stochastic modified forward-backward splitting and baselines.

All stochastic schemes are driven by an oracle-evaluation budget: one call
``A(x, w)`` costs one evaluation, so a vr-SMFBS iteration with batch ``N_k``
costs ``2 N_k``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .metrics import error_to_solution, residual
from .oracles import ProblemSpec, minibatch, rng_stream
from .schedules import BatchSchedule, StepRule, practical_step

SCHEMES = ("vr_smfbs", "vr_smfbs_single", "sa", "deterministic_mfbs", "saa")


class ConfigurationError(ValueError):
    pass


class NumericalDivergence(ArithmeticError):
    """An iterate became non-finite; ``last_finite`` holds the previous state."""

    def __init__(self, message, last_finite: np.ndarray, iteration: int, trace=None):
        super().__init__(message)
        self.last_finite = last_finite
        self.iteration = iteration
        self.trace = trace


@dataclass(frozen=True)
class SolverConfig:
    scheme: str
    step_rule: Optional[StepRule] = None
    batch_schedule: BatchSchedule = field(default_factory=BatchSchedule.constant)
    eval_budget: int = 20000
    seed: int = 0
    record_every: Optional[int] = None
    nu_samples: int = 1000
    max_iterations: Optional[int] = None
    residual_gamma: Optional[float] = None
    x0: Optional[tuple] = None
    name: Optional[str] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.eval_budget < 1:
            raise ConfigurationError("eval_budget must be positive")
        if self.record_every is not None and self.record_every < 1:
            raise ConfigurationError("record_every must be positive")
        if self.scheme == "vr_smfbs_single":
            if self.batch_schedule != BatchSchedule.constant(1):
                raise ConfigurationError("single-sample mode requires a constant batch of 1")
            if self.step_rule is None or not self.step_rule.square_summable:
                raise ConfigurationError(
                    "single-sample mode requires a diminishing step with exponent in (1/2, 1]")
        if self.scheme == "sa" and self.batch_schedule != BatchSchedule.constant(1):
            raise ConfigurationError("SA draws one sample per iteration")
        if self.scheme == "saa" and self.nu_samples < 1:
            raise ConfigurationError("nu_samples must be positive")

    @property
    def label(self) -> str:
        return self.name or self.scheme

    def to_dict(self) -> dict:
        out = {"scheme": self.scheme, "eval_budget": self.eval_budget, "seed": self.seed,
               "batch_schedule": self.batch_schedule.to_dict()}
        if self.step_rule is not None:
            out["step_rule"] = self.step_rule.to_dict()
        for key in ("record_every", "max_iterations", "residual_gamma", "name"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.scheme == "saa":
            out["nu_samples"] = self.nu_samples
        if self.x0 is not None:
            out["x0"] = list(self.x0)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        if "step_rule" in d and d["step_rule"] is not None:
            d["step_rule"] = StepRule.from_dict(d["step_rule"])
        if "batch_schedule" in d:
            d["batch_schedule"] = BatchSchedule.from_dict(d["batch_schedule"])
        if "x0" in d and d["x0"] is not None:
            d["x0"] = tuple(float(v) for v in d["x0"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown solver fields: {sorted(unknown)}")
        return cls(**d)


class TraceRecord(NamedTuple):
    k: int
    N_k: int
    gamma: float
    cum_evals: int
    residual: float
    error: Optional[float]
    elapsed_s: float


@dataclass
class IterationTrace:
    records: list
    final_iterate: np.ndarray
    half_iterates_sum: np.ndarray
    iterations: int
    scheme: str = ""
    cum_evals: int = 0
    elapsed_s: float = 0.0

    @property
    def averaged_iterate(self) -> np.ndarray:
        return averaged_iterate(self)

    @property
    def final_residual(self) -> float:
        return self.records[-1].residual


def averaged_iterate(trace: IterationTrace) -> np.ndarray:
    """Mean of the half-step iterates, from the running sum."""
    if trace.iterations < 1:
        raise ValueError("trace has no iterations")
    return trace.half_iterates_sum / trace.iterations


def _default_record_every(iterations_bound: int) -> int:
    if iterations_bound <= 100_000:
        return 1
    return math.ceil(iterations_bound / 1000)


def _residual_gamma(problem: ProblemSpec, config: SolverConfig) -> float:
    if config.residual_gamma is not None:
        return config.residual_gamma
    return practical_step(problem.lipschitz_L)


def initial_point(problem: ProblemSpec, config: SolverConfig) -> np.ndarray:
    """``config.x0`` if given, else a uniform draw from the unit cube keyed by the seed."""
    if config.x0 is not None:
        return problem.check(np.array(config.x0, dtype=float))
    return rng_stream(config.seed, k=0, half=2).uniform(0.0, 1.0, problem.dimension)


def _check_finite(x, last, k, message):
    if not np.all(np.isfinite(x)):
        raise NumericalDivergence(f"{message} became non-finite at iteration {k}", last, k)


class _Recorder:
    def __init__(self, problem, config, every):
        self.problem = problem
        self.gamma_res = _residual_gamma(problem, config)
        self.every = every
        self.has_solution = problem.known_solution is not None
        self.records = []

    def __call__(self, k, n_k, gamma, cum, x, elapsed):
        err = error_to_solution(self.problem, x) if self.has_solution else None
        self.records.append(TraceRecord(k, n_k, gamma, cum, residual(self.problem, x, self.gamma_res),
                                        err, elapsed))


def vr_smfbs_step(problem: ProblemSpec, x, gamma: float, n_k: int, rng, rng_half=None):
    """One vr-SMFBS iteration; returns ``(x_next, x_half, evals)``.

    ``A_k`` is drawn from ``rng`` and ``A_{k+1/2}`` from ``rng_half`` (or from
    ``rng`` again when no second stream is given).
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if n_k < 1:
        raise ValueError("batch size must be >= 1")
    a_k = minibatch(problem, x, n_k, rng).value
    x_half = problem.resolvent(x - gamma * a_k, gamma)
    a_half = minibatch(problem, x_half, n_k, rng if rng_half is None else rng_half).value
    x_next = x_half - gamma * (a_half - a_k)
    return x_next, x_half, 2 * n_k


def deterministic_mfbs_step(mean_map: Callable, resolvent: Callable, x, gamma: float):
    """Tseng's modified forward-backward step; returns ``(x_next, x_half)``."""
    a_x = mean_map(x)
    x_half = resolvent(x - gamma * a_x, gamma)
    return x_half - gamma * (mean_map(x_half) - a_x), x_half


def run_vr_smfbs(problem: ProblemSpec, config: SolverConfig, x0=None) -> IterationTrace:
    if config.scheme not in ("vr_smfbs", "vr_smfbs_single"):
        raise ConfigurationError(f"run_vr_smfbs cannot run scheme {config.scheme!r}")
    sched = config.batch_schedule
    step = config.step_rule or StepRule.constant(practical_step(problem.lipschitz_L))
    if 2 * sched(0) > config.eval_budget:
        raise ConfigurationError(
            f"budget {config.eval_budget} cannot pay for the first iteration (2*N_0 = {2 * sched(0)})")
    x = problem.check(x0) if x0 is not None else initial_point(problem, config)
    every = config.record_every or _default_record_every(config.eval_budget // 2)
    rec = _Recorder(problem, config, every)
    half_sum = np.zeros(problem.dimension)
    cum, k, elapsed = 0, 0, 0.0
    n_k, gamma = sched(0), step(1)
    max_it = config.max_iterations if config.max_iterations is not None else math.inf
    while k < max_it:
        n_k = sched(k)
        if cum + 2 * n_k > config.eval_budget:
            break
        gamma = step(k + 1)
        t0 = time.perf_counter()
        x_next, x_half, evals = vr_smfbs_step(problem, x, gamma, n_k,
                                              rng_stream(config.seed, k, 0),
                                              rng_stream(config.seed, k, 1))
        elapsed += time.perf_counter() - t0
        try:
            _check_finite(x_next, x, k, "vr-SMFBS iterate")
            _check_finite(x_half, x, k, "vr-SMFBS half iterate")
        except NumericalDivergence as exc:
            exc.trace = IterationTrace(rec.records, x, half_sum, k, config.scheme, cum, elapsed)
            raise
        half_sum += x_half
        x = x_next
        cum += evals
        k += 1
        if k % every == 0:
            rec(k, n_k, gamma, cum, x, elapsed)
    if not rec.records or rec.records[-1].k != k:
        rec(k, n_k, gamma, cum, x, elapsed)
    return IterationTrace(rec.records, x, half_sum, k, config.scheme, cum, elapsed)


def run_sa(problem: ProblemSpec, config: SolverConfig, x0=None) -> IterationTrace:
    """Projected stochastic approximation ``x_{k+1} = P[x_k - gamma_k A(x_k, w_k)]``, k from 1."""
    if config.scheme != "sa":
        raise ConfigurationError(f"run_sa cannot run scheme {config.scheme!r}")
    step = config.step_rule or StepRule.diminishing(1.0, 0.5)
    x = problem.check(x0) if x0 is not None else initial_point(problem, config)
    budget = config.eval_budget
    if config.max_iterations is not None:
        budget = min(budget, config.max_iterations)
    every = config.record_every or _default_record_every(budget)
    rec = _Recorder(problem, config, every)
    sample_batch, resolvent, seed = problem.sample_batch, problem.resolvent, config.seed
    half_sum = np.zeros(problem.dimension)
    elapsed, gamma = 0.0, step(1)
    for k in range(1, budget + 1):
        gamma = step(k)
        t0 = time.perf_counter()
        a = sample_batch(x, 1, rng_stream(seed, k, 0))[0]
        x_next = resolvent(x - gamma * a, gamma)
        elapsed += time.perf_counter() - t0
        try:
            _check_finite(x_next, x, k, "SA iterate")
        except NumericalDivergence as exc:
            exc.trace = IterationTrace(rec.records, x, half_sum, k - 1, config.scheme, k - 1, elapsed)
            raise
        x = x_next
        half_sum += x
        if k % every == 0:
            rec(k, 1, gamma, k, x, elapsed)
    if not rec.records or rec.records[-1].k != budget:
        rec(budget, 1, gamma, budget, x, elapsed)
    return IterationTrace(rec.records, x, half_sum, budget, config.scheme, budget, elapsed)


@dataclass
class MfbsResult:
    solution: np.ndarray
    residual: float
    iterations: int
    converged: bool


def run_deterministic_mfbs(mean_map: Callable, resolvent: Callable, gamma: float, tol: float,
                           max_iters: int, x0) -> MfbsResult:
    """Deterministic modified FBS until ``r_gamma(x) <= tol``.

    The residual at ``x_k`` is ``|x_k - x_{k+1/2}|``, which each step computes
    anyway. On failure the iterate with the smallest residual is returned.
    """
    x = np.asarray(x0, dtype=float).copy()
    best_x, best_r = x, math.inf
    for k in range(max_iters + 1):
        x_next, x_half = deterministic_mfbs_step(mean_map, resolvent, x, gamma)
        r = float(np.linalg.norm(x - x_half))
        if not math.isfinite(r):
            raise NumericalDivergence("deterministic MFBS diverged", best_x, k)
        if r < best_r:
            best_x, best_r = x, r
        if r <= tol:
            return MfbsResult(x, r, k, True)
        if k == max_iters:
            break
        x = x_next
    return MfbsResult(best_x, best_r, max_iters, False)


@dataclass
class SaaResult:
    solution: np.ndarray
    residual_vs_true_mean: float
    wall_seconds: float
    converged: bool
    iterations: int


SAA_TOL = 1e-9


def run_saa(problem: ProblemSpec, nu: int, config: SolverConfig, rng=None,
            max_iters: int = 1_000_000) -> SaaResult:
    """Sample-average approximation: freeze ``nu`` scenarios, solve, score on the true map.

    The sampled problem is solved by deterministic modified FBS to ``1e-9``;
    the reported residual uses the exact mean map.
    """
    if nu < 1:
        raise ConfigurationError("nu must be >= 1")
    if problem.draw_scenarios is None or problem.saa_map is None:
        raise ConfigurationError(f"problem {problem.name!r} has no scenario hooks")
    if rng is None:
        rng = rng_stream(config.seed, k=0, half=3)
    x0 = initial_point(problem, config)
    gamma = practical_step(problem.lipschitz_L)
    t0 = time.perf_counter()
    scenarios = problem.draw_scenarios(int(nu), rng)
    saa_map = problem.saa_map

    def sampled_map(x):
        return saa_map(x, scenarios)

    res = run_deterministic_mfbs(sampled_map, problem.resolvent, gamma, SAA_TOL, max_iters, x0)
    wall = time.perf_counter() - t0
    true_res = residual(problem, res.solution, _residual_gamma(problem, config))
    return SaaResult(res.solution, true_res, wall, res.converged, res.iterations)


def solve(problem: ProblemSpec, config: SolverConfig) -> IterationTrace:
    """Dispatch a stochastic scheme by name (SAA and deterministic runs are wrapped as one-record traces)."""
    if config.scheme in ("vr_smfbs", "vr_smfbs_single"):
        return run_vr_smfbs(problem, config)
    if config.scheme == "sa":
        return run_sa(problem, config)
    rec = _Recorder(problem, config, 1)
    if config.scheme == "saa":
        out = run_saa(problem, config.nu_samples, config)
        rec(out.iterations, config.nu_samples, practical_step(problem.lipschitz_L),
            config.nu_samples, out.solution, out.wall_seconds)
        return IterationTrace(rec.records, out.solution, out.solution.copy(), 1, config.scheme,
                              config.nu_samples, out.wall_seconds)
    gamma = config.step_rule.gamma if config.step_rule else practical_step(problem.lipschitz_L)
    t0 = time.perf_counter()
    out = run_deterministic_mfbs(problem.mean_map, problem.resolvent, gamma, 1e-10,
                                 config.max_iterations or 1_000_000, initial_point(problem, config))
    wall = time.perf_counter() - t0
    rec(out.iterations, 0, gamma, 0, out.solution, wall)
    return IterationTrace(rec.records, out.solution, out.solution.copy(), max(out.iterations, 1),
                          config.scheme, 0, wall)


def with_seed(config: SolverConfig, seed: int) -> SolverConfig:
    return replace(config, seed=seed)
