"""Numerical checks of the standing assumptions on a problem instance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .experiments import expected_min_uniform
from .metrics import residual
from .oracles import ProblemSpec, rng_stream
from .schedules import practical_step


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _region(problem: ProblemSpec):
    """Center and half-width of the box random points are drawn from."""
    center = problem.known_solution if problem.known_solution is not None else np.zeros(problem.dimension)
    return center, 2.0


def _points(problem, rng, n):
    center, half = _region(problem)
    return center + rng.uniform(-half, half, (n, problem.dimension))


def _fd_jacobian(mean_map, x, h=1e-6):
    n = x.size
    jac = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        jac[:, i] = (mean_map(x + e) - mean_map(x - e)) / (2 * h)
    return jac


def _pairs(problem, rng, n):
    xs, ys = _points(problem, rng, n), _points(problem, rng, n)
    # half of the pairs are close together so the local slope is probed too
    ys[: n // 2] = xs[: n // 2] + 1e-3 * rng.standard_normal((n // 2, problem.dimension))
    return xs, ys


def check_monotone(problem: ProblemSpec, rng, n_pairs=1000, n_jac=20) -> CheckResult:
    A = problem.mean_map
    worst = np.inf
    for x, y in zip(*_pairs(problem, rng, n_pairs)):
        d = x - y
        worst = min(worst, float((A(x) - A(y)) @ d) / float(d @ d))
    for x in _points(problem, rng, n_jac):
        jac = _fd_jacobian(A, x)
        worst = min(worst, float(np.linalg.eigvalsh((jac + jac.T) / 2).min()))
    return CheckResult("monotonicity", worst >= -1e-6, f"min normalized inner product {worst:.3e}")


def check_strong_monotonicity(problem: ProblemSpec, rng, n_pairs=1000, n_jac=20) -> CheckResult:
    sigma = problem.strong_monotonicity_sigma
    if sigma == 0:
        return CheckResult("strong monotonicity", True, "sigma = 0, not claimed")
    A = problem.mean_map
    worst = np.inf
    for x, y in zip(*_pairs(problem, rng, n_pairs)):
        d = x - y
        worst = min(worst, float((A(x) - A(y)) @ d) / float(d @ d))
    for x in _points(problem, rng, n_jac):
        jac = _fd_jacobian(A, x)
        worst = min(worst, float(np.linalg.eigvalsh((jac + jac.T) / 2).min()))
    ok = worst >= sigma * (1 - 1e-6)
    return CheckResult("strong monotonicity", ok, f"observed modulus {worst:.6g} vs claimed {sigma:.6g}")


def check_lipschitz(problem: ProblemSpec, rng, n_pairs=1000, n_jac=20) -> CheckResult:
    A, L = problem.mean_map, problem.lipschitz_L
    worst = 0.0
    for x, y in zip(*_pairs(problem, rng, n_pairs)):
        worst = max(worst, float(np.linalg.norm(A(x) - A(y)) / np.linalg.norm(x - y)))
    for x in _points(problem, rng, n_jac):
        worst = max(worst, float(np.linalg.norm(_fd_jacobian(A, x), 2)))
    ok = worst <= L * (1 + 1e-6)
    return CheckResult("Lipschitz", ok, f"observed slope {worst:.6g} vs claimed L {L:.6g}")


def check_noise_moments(problem: ProblemSpec, rng, draws=100_000, n_points=3) -> CheckResult:
    if problem.noiseless:
        return CheckResult("noise second moment", True, "noiseless oracle")
    worst = -np.inf
    for x in _points(problem, rng, n_points):
        w = problem.sample_batch(x, draws, rng) - problem.mean_map(x)
        sq = np.einsum("ij,ij->i", w, w)
        bound = problem.noise_nu1 ** 2 * float(x @ x) + problem.noise_nu2 ** 2
        se = sq.std(ddof=1) / np.sqrt(draws)
        worst = max(worst, (sq.mean() - 5 * se) / bound)
    return CheckResult("noise second moment", worst <= 1.0,
                       f"max (mean |w|^2 - 5 SE) / bound = {worst:.4f}")


def check_unbiased(problem: ProblemSpec, rng, draws=100_000) -> CheckResult:
    if problem.noiseless:
        return CheckResult("unbiased oracle", True, "noiseless oracle")
    x = _points(problem, rng, 1)[0]
    w = problem.sample_batch(x, draws, rng) - problem.mean_map(x)
    z = np.abs(w.mean(axis=0)) / (w.std(axis=0, ddof=1) / np.sqrt(draws) + 1e-300)
    # Bonferroni-style band over coordinates
    limit = 4.0 + np.sqrt(2 * np.log(problem.dimension))
    return CheckResult("unbiased oracle", bool(z.max() <= limit), f"max |z| = {z.max():.2f} (limit {limit:.2f})")


def check_resolvent_nonexpansive(problem: ProblemSpec, rng, n_pairs=1000) -> CheckResult:
    worst = 0.0
    center, half = _region(problem)
    for _ in range(n_pairs):
        v = center + rng.uniform(-3 * half, 3 * half, problem.dimension)
        w = center + rng.uniform(-3 * half, 3 * half, problem.dimension)
        gamma = float(rng.uniform(0.01, 2.0))
        num = np.linalg.norm(problem.resolvent(v, gamma) - problem.resolvent(w, gamma))
        worst = max(worst, float(num / np.linalg.norm(v - w)))
    return CheckResult("resolvent non-expansive", worst <= 1 + 1e-12, f"max ratio {worst:.12f}")


def check_residual_at_solution(problem: ProblemSpec) -> CheckResult:
    if problem.known_solution is None:
        return CheckResult("residual at solution", True, "no known solution")
    r = residual(problem, problem.known_solution, practical_step(problem.lipschitz_L))
    return CheckResult("residual at solution", r <= 1e-8, f"r = {r:.3e}")


def check_cournot_expectation(problem: ProblemSpec, rng, cases=5, draws=1_000_000) -> CheckResult:
    """Closed-form ``E[min(t, h)]`` against Monte Carlo, 4 standard errors."""
    p = problem.params
    lo, hi = p["h_low"], p["h_high"]
    worst = 0.0
    for t in rng.uniform(lo - 1.0, hi + 1.0, cases):
        v = np.minimum(t, rng.uniform(lo, hi, draws))
        se = v.std(ddof=1) / np.sqrt(draws)
        dev = abs(v.mean() - expected_min_uniform(t, lo, hi))
        # constant draws (t <= low) have zero spread; compare those exactly up to rounding
        worst = max(worst, dev / max(se, 1e-12))
    return CheckResult("closed-form expectation", worst <= 4.0, f"max deviation {worst:.2f} SE")


def run_suite(problem: ProblemSpec, seed: int = 0) -> list[CheckResult]:
    rng = rng_stream(seed, k=0, half=11)
    results = [
        check_monotone(problem, rng),
        check_lipschitz(problem, rng),
        check_strong_monotonicity(problem, rng),
        check_noise_moments(problem, rng),
        check_unbiased(problem, rng),
        check_resolvent_nonexpansive(problem, rng),
        check_residual_at_solution(problem),
    ]
    if problem.params.get("generator") == "cournot" and not problem.params.get("frozen_h"):
        results.append(check_cournot_expectation(problem, rng))
    return results
