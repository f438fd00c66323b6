"""Projections and resolvents used as the backward step.

Every resolvent here has the signature ``(v, gamma) -> point`` so solvers can
treat a normal-cone resolvent and a prox operator interchangeably.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

UNBOUNDED = math.inf


class GeometryError(ValueError):
    """Invalid set/prox parameters or mismatched dimensions."""


@dataclass(frozen=True)
class FeasibleSet:
    """Closed convex set with an exact Euclidean projection.

    ``kind`` is one of ``"whole"``, ``"orthant"``, ``"box"``, ``"capped_simplex"``.
    Use the classmethod constructors rather than building instances by hand.
    """

    kind: str
    dimension: int
    lower: Optional[np.ndarray] = field(default=None, compare=False)
    upper: Optional[np.ndarray] = field(default=None, compare=False)
    cap: Optional[float] = None

    def __post_init__(self):
        if self.dimension < 1:
            raise GeometryError("dimension must be positive")
        if self.kind == "box":
            if self.lower is None or self.upper is None:
                raise GeometryError("box needs lower and upper bounds")
            if self.lower.shape != (self.dimension,) or self.upper.shape != (self.dimension,):
                raise GeometryError("box bounds must have shape (dimension,)")
            if np.any(self.lower > self.upper):
                raise GeometryError("box requires lower <= upper")
        elif self.kind == "capped_simplex":
            if self.cap is None or not self.cap > 0:
                raise GeometryError("capped simplex requires cap > 0")
        elif self.kind not in ("whole", "orthant"):
            raise GeometryError(f"unknown set kind {self.kind!r}")

    @classmethod
    def whole_space(cls, dimension: int) -> "FeasibleSet":
        return cls("whole", dimension)

    @classmethod
    def nonneg_orthant(cls, dimension: int) -> "FeasibleSet":
        return cls("orthant", dimension)

    @classmethod
    def box(cls, lower, upper) -> "FeasibleSet":
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        return cls("box", lower.size, lower=lower, upper=upper)

    @classmethod
    def capped_simplex(cls, dimension: int, cap: float) -> "FeasibleSet":
        return cls("capped_simplex", dimension, cap=float(cap))

    @property
    def is_bounded(self) -> bool:
        if self.kind == "capped_simplex":
            return True
        if self.kind == "box":
            return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))
        return False

    def diameter(self) -> float:
        """Euclidean diameter, ``inf`` for unbounded sets."""
        if self.kind == "box":
            return float(np.linalg.norm(self.upper - self.lower))
        if self.kind == "capped_simplex":
            return self.cap * math.sqrt(2.0) if self.dimension > 1 else self.cap
        return math.inf

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = _check_dim(self, x)
        if self.kind == "whole":
            return True
        if self.kind == "orthant":
            return bool(np.all(x >= -tol))
        if self.kind == "box":
            return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))
        return bool(np.all(x >= -tol) and x.sum() <= self.cap + tol)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "dimension": self.dimension}
        if self.kind == "box":
            out["lower"] = [_encode_bound(v) for v in self.lower]
            out["upper"] = [_encode_bound(v) for v in self.upper]
        if self.kind == "capped_simplex":
            out["cap"] = self.cap
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FeasibleSet":
        kind = data["kind"]
        if kind == "box":
            return cls.box([_decode_bound(v) for v in data["lower"]],
                           [_decode_bound(v) for v in data["upper"]])
        if kind == "capped_simplex":
            return cls.capped_simplex(int(data["dimension"]), float(data["cap"]))
        return cls(kind, int(data["dimension"]))


def _encode_bound(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


def _decode_bound(v) -> float:
    return float(v)


def _check_dim(s: FeasibleSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (s.dimension,):
        raise GeometryError(f"expected a vector of length {s.dimension}, got shape {x.shape}")
    return x


def _capped_simplex_projection(x: np.ndarray, cap: float) -> np.ndarray:
    y = np.maximum(x, 0.0)
    if y.sum() <= cap:
        return y
    # Projection onto {y >= 0, sum y = cap}: find the threshold by sorting.
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - cap
    idx = np.arange(1, x.size + 1)
    rho = np.count_nonzero(u - css / idx > 0)
    theta = css[rho - 1] / rho
    return np.maximum(x - theta, 0.0)


def project(s: FeasibleSet, x) -> np.ndarray:
    """Euclidean projection of ``x`` onto ``s``."""
    x = _check_dim(s, x)
    if s.kind == "whole":
        return x.copy()
    if s.kind == "orthant":
        return np.maximum(x, 0.0)
    if s.kind == "box":
        return np.clip(x, s.lower, s.upper)
    return _capped_simplex_projection(x, s.cap)


def resolvent_normal_cone(s: FeasibleSet, gamma: float, v) -> np.ndarray:
    """Resolvent ``(I + gamma N_s)^{-1} v``; identical to ``project(s, v)`` for any gamma."""
    if not gamma > 0:
        raise GeometryError("gamma must be positive")
    return project(s, v)


def normal_cone_directions(s: FeasibleSet, y, tol: float = 1e-12) -> list[np.ndarray]:
    """Unit generators of the normal cone of ``s`` at a point ``y`` in ``s``.

    Returns an empty list at interior points. Only the extreme rays are
    returned; the cone is their conic hull.
    """
    y = _check_dim(s, y)
    n = s.dimension
    dirs = []
    if s.kind in ("orthant", "capped_simplex"):
        for i in np.flatnonzero(y <= tol):
            e = np.zeros(n)
            e[i] = -1.0
            dirs.append(e)
        if s.kind == "capped_simplex" and y.sum() >= s.cap - tol:
            dirs.append(np.full(n, 1.0 / math.sqrt(n)))
    elif s.kind == "box":
        for i in range(n):
            if y[i] <= s.lower[i] + tol:
                e = np.zeros(n)
                e[i] = -1.0
                dirs.append(e)
            if y[i] >= s.upper[i] - tol:
                e = np.zeros(n)
                e[i] = 1.0
                dirs.append(e)
    return dirs


@dataclass(frozen=True)
class PiecewiseLinearProx1D:
    """``scale * max(slope_left*t + c1, slope_right*t + c2)`` with the kink at ``breakpoint``.

    The two affine pieces agree at the breakpoint, so the function is
    ``scale * (value_at_break + slope_left*(t-b))`` left of ``b`` and
    ``scale * (value_at_break + slope_right*(t-b))`` right of it. Convexity
    requires ``slope_left <= slope_right``.
    """

    slope_left: float
    slope_right: float
    breakpoint: float = 0.0
    scale: float = 1.0
    value_at_break: float = 0.0

    def __post_init__(self):
        if self.scale < 0:
            raise GeometryError("scale must be nonnegative")
        if self.scale > 0 and self.slope_left > self.slope_right:
            raise GeometryError("slope_left > slope_right gives a nonconvex function")

    def __call__(self, t: float) -> float:
        d = t - self.breakpoint
        return self.scale * (self.value_at_break + max(self.slope_left * d, self.slope_right * d))

    def subdifferential(self, t: float, tol: float = 0.0) -> tuple[float, float]:
        """Interval ``[lo, hi]`` of subgradients at ``t``."""
        a, b = self.scale * self.slope_left, self.scale * self.slope_right
        if t < self.breakpoint - tol:
            return a, a
        if t > self.breakpoint + tol:
            return b, b
        return a, b


def prox_pwl_1d(f: PiecewiseLinearProx1D, gamma: float, interval, v: float) -> float:
    """argmin over ``t`` in ``interval`` of ``(t - v)^2 / (2 gamma) + f(t)``.

    Infinite endpoints are written as ``-UNBOUNDED`` / ``UNBOUNDED``.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if lo > hi:
        raise GeometryError("empty interval")
    if not gamma > 0:
        raise GeometryError("gamma must be positive")
    a, b = f.scale * f.slope_left, f.scale * f.slope_right
    c = f.breakpoint
    # Unconstrained prox: shift by the active slope, or snap to the kink.
    if v - gamma * a < c:
        t = v - gamma * a
    elif v - gamma * b > c:
        t = v - gamma * b
    else:
        t = c
    # The objective is strictly convex in one variable, so clipping is exact.
    return float(min(max(t, lo), hi))
