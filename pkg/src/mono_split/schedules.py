"""Batch-size schedules and step-size rules."""

from __future__ import annotations

import math
from dataclasses import dataclass


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class BatchSchedule:
    """Rule ``k -> N_k``.

    ``kind`` is ``"constant"`` (uses ``n``), ``"polynomial"`` (``max(1, floor(k^a))``)
    or ``"geometric"`` (``n0 * max(1, floor(rho^-(k+1)))``).
    """

    kind: str
    n: int = 1
    a: float = 1.01
    n0: int = 1
    rho: float = 1 / 1.01

    def __post_init__(self):
        if self.kind == "constant" and self.n < 1:
            raise ScheduleError("constant batch must be >= 1")
        elif self.kind == "polynomial" and not self.a > 1:
            raise ScheduleError("polynomial growth needs a > 1")
        elif self.kind == "geometric" and (self.n0 < 1 or not 0 < self.rho < 1):
            raise ScheduleError("geometric growth needs n0 >= 1 and rho in (0, 1)")
        elif self.kind not in ("constant", "polynomial", "geometric"):
            raise ScheduleError(f"unknown schedule {self.kind!r}")

    @classmethod
    def constant(cls, n: int = 1) -> "BatchSchedule":
        return cls("constant", n=int(n))

    @classmethod
    def polynomial(cls, a: float) -> "BatchSchedule":
        return cls("polynomial", a=float(a))

    @classmethod
    def geometric(cls, n0: int, rho: float) -> "BatchSchedule":
        return cls("geometric", n0=int(n0), rho=float(rho))

    def __call__(self, k: int) -> int:
        return batch_size(self, k)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "n": self.n}
        if self.kind == "polynomial":
            return {"kind": "polynomial", "a": self.a}
        return {"kind": "geometric", "n0": self.n0, "rho": self.rho}

    @classmethod
    def from_dict(cls, d: dict) -> "BatchSchedule":
        d = dict(d)
        kind = d.pop("kind")
        if kind == "geometric" and "rate" in d:
            d["rho"] = 1.0 / float(d.pop("rate"))
        return cls(kind, **d)


def batch_size(schedule: BatchSchedule, k: int) -> int:
    if k < 0:
        raise ScheduleError("iteration index must be nonnegative")
    if schedule.kind == "constant":
        return schedule.n
    if schedule.kind == "polynomial":
        # floor(0^a) = 0, so clamp to one sample
        return max(1, math.floor(k ** schedule.a))
    return schedule.n0 * max(1, math.floor(schedule.rho ** (-(k + 1))))


@dataclass(frozen=True)
class StepRule:
    """``"constant"`` uses ``gamma``; ``"diminishing"`` gives ``gamma0 / k**exponent`` for ``k >= 1``."""

    kind: str
    gamma: float = 0.0
    gamma0: float = 1.0
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind == "constant":
            if not self.gamma > 0:
                raise ScheduleError("constant step must be positive")
        elif self.kind == "diminishing":
            if not self.gamma0 > 0 or not 0 < self.exponent <= 1:
                raise ScheduleError("diminishing step needs gamma0 > 0 and exponent in (0, 1]")
        else:
            raise ScheduleError(f"unknown step rule {self.kind!r}")

    @classmethod
    def constant(cls, gamma: float) -> "StepRule":
        return cls("constant", gamma=float(gamma))

    @classmethod
    def diminishing(cls, gamma0: float, exponent: float) -> "StepRule":
        return cls("diminishing", gamma0=float(gamma0), exponent=float(exponent))

    @property
    def square_summable(self) -> bool:
        return self.kind == "diminishing" and self.exponent > 0.5

    def __call__(self, k: int) -> float:
        if self.kind == "constant":
            return self.gamma
        return self.gamma0 / max(k, 1) ** self.exponent

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "gamma": self.gamma}
        return {"kind": "diminishing", "gamma0": self.gamma0, "exponent": self.exponent}

    @classmethod
    def from_dict(cls, d: dict) -> "StepRule":
        d = dict(d)
        return cls(d.pop("kind"), **d)


def step_monotone(L: float, nu1: float, n0: int) -> float:
    """Largest constant step ``1 / (2 sqrt(L^2 + 4 nu1^2 / n0))`` for the monotone case."""
    if not L > 0:
        raise ScheduleError("L must be positive")
    if n0 < 1:
        raise ScheduleError("n0 must be >= 1")
    return 1.0 / (2.0 * math.sqrt(L * L + 4.0 * nu1 * nu1 / n0))


def step_strongly_monotone(L: float, sigma: float, safety: float = 0.99) -> float:
    """``safety * min(sigma/4, 1/(20 sigma), sqrt(7)/(4 sqrt(L^2 + 1/2)))``."""
    if not sigma > 0:
        raise ScheduleError("sigma must be positive")
    if not L > 0:
        raise ScheduleError("L must be positive")
    if not 0 < safety <= 1:
        raise ScheduleError("safety must lie in (0, 1]")
    bound = min(sigma / 4.0, 1.0 / (20.0 * sigma), math.sqrt(7.0) / (4.0 * math.sqrt(L * L + 0.5)))
    return safety * bound


def min_batch_strongly_monotone(gamma: float, sigma: float, nu1: float) -> int:
    """Smallest ``N_0`` with ``N_0 >= 2 (24 gamma^2 + 8) nu1^2 / (sigma gamma)``."""
    if not gamma > 0 or not sigma > 0:
        raise ScheduleError("gamma and sigma must be positive")
    bound = 2.0 * (24.0 * gamma * gamma + 8.0) * nu1 * nu1 / (sigma * gamma)
    # guard against 322.40000000000003-style round-up of exact integers
    return max(1, math.ceil(bound - 1e-9 * max(1.0, bound)))


def practical_step(L: float) -> float:
    """Constant step ``1/(4L)`` used for the benchmark tables."""
    if not L > 0:
        raise ScheduleError("L must be positive")
    return 1.0 / (4.0 * L)
