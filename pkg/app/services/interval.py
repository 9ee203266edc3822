"""
Interval arithmetic with outward rounding, vectorized over box cells.

Every elementary operation works on (lo, hi) pairs of numpy arrays and widens
its result by a relative `settings.interval_inflation`, so enclosures stay
rigorous under floating-point rounding.
"""
import logging
import math
from dataclasses import dataclass
from functools import singledispatch
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.services.exprlang import (
    Add,
    Const,
    Div,
    Expr,
    Func,
    ModelError,
    Mul,
    Neg,
    Pow,
    Sub,
    Var,
    diff_expr,
    evaluate,
    free_vars,
    subterms,
)

logger = logging.getLogger(__name__)

INFLATION = settings.interval_inflation
TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

Bounds = Tuple[np.ndarray, np.ndarray]


class IntervalError(ValueError):
    """Interval operation outside its domain."""


def _outward(lo, hi) -> Bounds:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return lo - np.abs(lo) * INFLATION, hi + np.abs(hi) * INFLATION


def _check_finite(lo, hi, what: str) -> Bounds:
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise IntervalError(f"Non-finite enclosure in {what}")
    return lo, hi


# ============ Elementary operations on bound arrays ============

def iadd(a: Bounds, b: Bounds) -> Bounds:
    return _outward(a[0] + b[0], a[1] + b[1])


def isub(a: Bounds, b: Bounds) -> Bounds:
    return _outward(a[0] - b[1], a[1] - b[0])


def ineg(a: Bounds) -> Bounds:
    return -np.asarray(a[1], dtype=float), -np.asarray(a[0], dtype=float)


def imul(a: Bounds, b: Bounds) -> Bounds:
    products = np.stack(np.broadcast_arrays(a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]))
    return _outward(products.min(axis=0), products.max(axis=0))


def idiv(a: Bounds, b: Bounds) -> Bounds:
    if np.any((np.asarray(b[0]) <= 0.0) & (np.asarray(b[1]) >= 0.0)):
        raise IntervalError("Division by an interval containing zero")
    return imul(a, _outward(1.0 / np.asarray(b[1], dtype=float), 1.0 / np.asarray(b[0], dtype=float)))


def ipow(a: Bounds, n: int) -> Bounds:
    lo, hi = np.broadcast_arrays(np.asarray(a[0], dtype=float), np.asarray(a[1], dtype=float))
    if n == 0:
        return np.ones_like(lo), np.ones_like(hi)
    if n % 2:
        return _check_finite(*_outward(lo ** n, hi ** n), "power")
    mag_lo, mag_hi = np.abs(lo), np.abs(hi)
    top = np.maximum(mag_lo, mag_hi) ** n
    bottom = np.where((lo <= 0.0) & (hi >= 0.0), 0.0, np.minimum(mag_lo, mag_hi) ** n)
    return _check_finite(*_outward(bottom, top), "power")


def isin(a: Bounds) -> Bounds:
    lo, hi = np.broadcast_arrays(np.asarray(a[0], dtype=float), np.asarray(a[1], dtype=float))
    s_lo, s_hi = np.sin(lo), np.sin(hi)
    rlo, rhi = np.minimum(s_lo, s_hi), np.maximum(s_lo, s_hi)
    has_max = HALF_PI + TWO_PI * np.ceil((lo - HALF_PI) / TWO_PI) <= hi
    has_min = -HALF_PI + TWO_PI * np.ceil((lo + HALF_PI) / TWO_PI) <= hi
    wide = (hi - lo) >= TWO_PI
    rhi = np.where(has_max | wide, 1.0, rhi)
    rlo = np.where(has_min | wide, -1.0, rlo)
    rlo, rhi = _outward(rlo, rhi)
    return np.clip(rlo, -1.0, 1.0), np.clip(rhi, -1.0, 1.0)


def icos(a: Bounds) -> Bounds:
    lo, hi = np.broadcast_arrays(np.asarray(a[0], dtype=float), np.asarray(a[1], dtype=float))
    c_lo, c_hi = np.cos(lo), np.cos(hi)
    rlo, rhi = np.minimum(c_lo, c_hi), np.maximum(c_lo, c_hi)
    has_max = TWO_PI * np.ceil(lo / TWO_PI) <= hi
    has_min = math.pi + TWO_PI * np.ceil((lo - math.pi) / TWO_PI) <= hi
    wide = (hi - lo) >= TWO_PI
    rhi = np.where(has_max | wide, 1.0, rhi)
    rlo = np.where(has_min | wide, -1.0, rlo)
    rlo, rhi = _outward(rlo, rhi)
    return np.clip(rlo, -1.0, 1.0), np.clip(rhi, -1.0, 1.0)


def iexp(a: Bounds) -> Bounds:
    with np.errstate(over="ignore"):
        return _check_finite(*_outward(np.exp(a[0]), np.exp(a[1])), "exp")


def ilog(a: Bounds) -> Bounds:
    if np.any(np.asarray(a[0]) <= 0.0):
        raise IntervalError("log of an interval touching nonpositive values")
    return _outward(np.log(a[0]), np.log(a[1]))


def isqrt(a: Bounds) -> Bounds:
    if np.any(np.asarray(a[0]) <= 0.0):
        raise IntervalError("sqrt of an interval touching nonpositive values")
    return _outward(np.sqrt(a[0]), np.sqrt(a[1]))


def itanh(a: Bounds) -> Bounds:
    rlo, rhi = _outward(np.tanh(a[0]), np.tanh(a[1]))
    return np.clip(rlo, -1.0, 1.0), np.clip(rhi, -1.0, 1.0)


_FUNCS = {"sin": isin, "cos": icos, "exp": iexp, "log": ilog, "sqrt": isqrt, "tanh": itanh}


# ============ Scalar interval ============

@dataclass(frozen=True)
class Interval:
    """Closed interval [lo, hi] with finite endpoints."""

    lo: float
    hi: float

    def __post_init__(self):
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise IntervalError(f"Interval endpoints must be finite: [{self.lo}, {self.hi}]")
        if self.lo > self.hi:
            raise IntervalError(f"Empty interval [{self.lo}, {self.hi}]")

    @classmethod
    def point(cls, value: float) -> "Interval":
        return cls(value, value)

    @classmethod
    def _from_bounds(cls, b: Bounds) -> "Interval":
        return cls(float(np.min(b[0])), float(np.max(b[1])))

    @property
    def bounds(self) -> Bounds:
        return np.asarray(self.lo), np.asarray(self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def mag(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def split(self, pieces: int) -> List["Interval"]:
        edges = np.linspace(self.lo, self.hi, pieces + 1)
        return [Interval(a, b) for a, b in zip(edges[:-1], edges[1:])]

    def _coerce(self, other) -> Bounds:
        if isinstance(other, Interval):
            return other.bounds
        value = float(other)
        return np.asarray(value), np.asarray(value)

    def __add__(self, other):
        return Interval._from_bounds(iadd(self.bounds, self._coerce(other)))

    __radd__ = __add__

    def __sub__(self, other):
        return Interval._from_bounds(isub(self.bounds, self._coerce(other)))

    def __rsub__(self, other):
        return Interval._from_bounds(isub(self._coerce(other), self.bounds))

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __mul__(self, other):
        return Interval._from_bounds(imul(self.bounds, self._coerce(other)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Interval._from_bounds(idiv(self.bounds, self._coerce(other)))

    def __pow__(self, n: int):
        return Interval._from_bounds(ipow(self.bounds, int(n)))

    def __str__(self) -> str:
        return f"[{self.lo:g}, {self.hi:g}]"


# ============ Expression enclosures ============

@singledispatch
def _enclose(e: Expr, env: Mapping[str, Bounds]) -> Bounds:
    raise TypeError(f"Unsupported node {type(e).__name__}")


@_enclose.register
def _(e: Const, env) -> Bounds:
    return np.asarray(e.value), np.asarray(e.value)


@_enclose.register
def _(e: Var, env) -> Bounds:
    try:
        return env[e.name]
    except KeyError:
        raise IntervalError(f"Variable '{e.name}' has no bounding interval")


@_enclose.register
def _(e: Neg, env) -> Bounds:
    return ineg(_enclose(e.arg, env))


@_enclose.register
def _(e: Add, env) -> Bounds:
    return iadd(_enclose(e.left, env), _enclose(e.right, env))


@_enclose.register
def _(e: Sub, env) -> Bounds:
    return isub(_enclose(e.left, env), _enclose(e.right, env))


@_enclose.register
def _(e: Mul, env) -> Bounds:
    if e.left == e.right:
        return ipow(_enclose(e.left, env), 2)
    return imul(_enclose(e.left, env), _enclose(e.right, env))


@_enclose.register
def _(e: Div, env) -> Bounds:
    return idiv(_enclose(e.left, env), _enclose(e.right, env))


@_enclose.register
def _(e: Pow, env) -> Bounds:
    return ipow(_enclose(e.base, env), e.exponent)


@_enclose.register
def _(e: Func, env) -> Bounds:
    return _FUNCS[e.name](_enclose(e.arg, env))


def eval_interval(e: Expr, box: Mapping[str, Interval]) -> Interval:
    """Enclosure of e over the box: the result contains every point value."""
    env = {name: iv.bounds for name, iv in box.items()}
    return Interval._from_bounds(_enclose(e, env))


def _cell_env(e: Expr, box: Mapping[str, Interval], subdivisions: int) -> Dict[str, Bounds]:
    active = [name for name in box if name in free_vars(e)]
    missing = sorted(free_vars(e) - set(box))
    if missing:
        raise IntervalError(f"Unbounded variable(s) {', '.join(missing)} in {e}")
    if not active:
        return {}
    pieces = max(1, int(subdivisions))
    if pieces ** len(active) > settings.max_cells:
        pieces = max(1, int(math.floor(settings.max_cells ** (1.0 / len(active)))))
    edges = [np.linspace(box[name].lo, box[name].hi, pieces + 1) for name in active]
    lows = np.meshgrid(*[edge[:-1] for edge in edges], indexing="ij")
    highs = np.meshgrid(*[edge[1:] for edge in edges], indexing="ij")
    return {name: (lo.ravel(), hi.ravel()) for name, lo, hi in zip(active, lows, highs)}


def enclose(e: Expr, box: Mapping[str, Interval], subdivisions: Optional[int] = None) -> Interval:
    """Hull of the enclosures of e over a uniform grid of sub-boxes."""
    if subdivisions is None:
        subdivisions = settings.interval_subdivisions
    lo, hi = _enclose(e, _cell_env(e, box, subdivisions))
    return Interval(float(np.min(lo)), float(np.max(hi)))


def bound_sup_abs(e: Expr, box: Mapping[str, Interval], subdivisions: Optional[int] = None) -> float:
    """Rigorous upper bound of sup |e| over the box."""
    if subdivisions is None:
        subdivisions = settings.interval_subdivisions
    lo, hi = _enclose(e, _cell_env(e, box, subdivisions))
    return float(np.max(np.maximum(np.abs(lo), np.abs(hi))))


def lipschitz_bound(
    e: Expr,
    box: Mapping[str, Interval],
    variables: Optional[Sequence[str]] = None,
    subdivisions: Optional[int] = None,
) -> float:
    """Euclidean Lipschitz bound: sqrt of the summed squared sup-norms of the partials."""
    if variables is None:
        variables = [name for name in box if name in free_vars(e)]
    check_differentiable(e, box)
    total = 0.0
    for name in variables:
        partial = diff_expr(e, name)
        if isinstance(partial, Const) and partial.value == 0.0:
            continue
        total += bound_sup_abs(partial, box, subdivisions) ** 2
    return math.sqrt(total)


def grid_sup_bound(
    e: Expr,
    box: Mapping[str, Interval],
    points_per_axis: int,
    subdivisions: Optional[int] = None,
) -> float:
    """Rigorous sup |e| bound from grid samples plus a Lipschitz covering term.

    Every point of the box lies within half a grid diagonal of a node, so
    max |e(node)| + (h / 2) * sqrt(d) * L bounds sup |e| for a Lipschitz bound L.
    """
    active = [name for name in box if name in free_vars(e)]
    if not active:
        return bound_sup_abs(e, box, subdivisions)
    count = max(2, int(points_per_axis))
    if count ** len(active) > settings.max_cells:
        count = max(2, int(math.floor(settings.max_cells ** (1.0 / len(active)))))
    axes = [np.linspace(box[name].lo, box[name].hi, count) for name in active]
    mesh = np.meshgrid(*axes, indexing="ij")
    env = {name: grid.ravel() for name, grid in zip(active, mesh)}
    with np.errstate(all="ignore"):
        values = np.abs(np.broadcast_to(evaluate(e, env), mesh[0].size))
    if not np.all(np.isfinite(values)):
        raise IntervalError(f"{e} is undefined on part of the box")
    half_diag = 0.5 * math.sqrt(sum(((box[name].width) / (count - 1)) ** 2 for name in active))
    return float(values.max()) + half_diag * lipschitz_bound(e, box, active, subdivisions)


def check_differentiable(e: Expr, box: Mapping[str, Interval]) -> None:
    """Raise ModelError when a log/sqrt argument or a divisor may reach its singular set."""
    for node in subterms(e):
        try:
            if isinstance(node, Func) and node.name in ("log", "sqrt"):
                if enclose(node.arg, box).lo <= 0.0:
                    raise ModelError(f"{node} is not differentiable over the region")
            elif isinstance(node, Div):
                iv = enclose(node.right, box)
                if iv.lo <= 0.0 <= iv.hi:
                    raise ModelError(f"Divisor of {node} may vanish over the region")
        except IntervalError as exc:
            raise ModelError(f"Cannot check {node} over the region: {exc}")
