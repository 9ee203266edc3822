"""Sparse multivariate polynomials over named indeterminates."""
import logging
import math
from dataclasses import dataclass
from itertools import combinations_with_replacement
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app.utils import format_coefficient

logger = logging.getLogger(__name__)

MultiIndex = Tuple[int, ...]
Number = Union[int, float]

PURGE_THRESHOLD = 1e-14


class PolynomialError(ValueError):
    """Variable mismatch or invalid polynomial operation."""


def glex_key(alpha: MultiIndex) -> Tuple[int, Tuple[int, ...]]:
    """Graded-lex sort key: lower degree first, then x1-heavy monomials first."""
    return sum(alpha), tuple(-e for e in alpha)


def monomial_basis(variables: Sequence[str], max_degree: int) -> List[MultiIndex]:
    """All multi-indices with total degree <= max_degree in graded-lex order."""
    n = len(variables)
    if max_degree < 0:
        return []
    basis: List[MultiIndex] = []
    for deg in range(max_degree + 1):
        layer = []
        for combo in combinations_with_replacement(range(n), deg):
            alpha = [0] * n
            for j in combo:
                alpha[j] += 1
            layer.append(tuple(alpha))
        basis.extend(sorted(layer, key=glex_key))
    return basis


def _monomial_str(variables: Sequence[str], alpha: MultiIndex) -> str:
    parts = []
    for name, e in zip(variables, alpha):
        if e == 1:
            parts.append(name)
        elif e > 1:
            parts.append(f"{name}^{e}")
    return "*".join(parts)


class Polynomial:
    """Immutable sparse polynomial: ordered variable names plus a term map."""

    __slots__ = ("_vars", "_terms")

    def __init__(self, variables: Sequence[str], terms: Optional[Mapping[MultiIndex, Number]] = None):
        names = tuple(variables)
        if len(set(names)) != len(names):
            raise PolynomialError(f"Duplicate variable names in {names}")
        clean: Dict[MultiIndex, float] = {}
        for alpha, coeff in (terms or {}).items():
            alpha = tuple(int(e) for e in alpha)
            if len(alpha) != len(names):
                raise PolynomialError(
                    f"Multi-index {alpha} has length {len(alpha)}, expected {len(names)}"
                )
            if any(e < 0 for e in alpha):
                raise PolynomialError(f"Negative exponent in {alpha}")
            coeff = float(coeff)
            if not math.isfinite(coeff):
                raise PolynomialError(f"Non-finite coefficient {coeff} for {alpha}")
            if abs(coeff) >= PURGE_THRESHOLD:
                clean[alpha] = coeff
        self._vars = names
        self._terms = clean

    # ============ Construction ============

    @classmethod
    def zero(cls, variables: Sequence[str]) -> "Polynomial":
        return cls(variables)

    @classmethod
    def constant(cls, variables: Sequence[str], value: Number) -> "Polynomial":
        return cls(variables, {(0,) * len(variables): value})

    @classmethod
    def variable(cls, variables: Sequence[str], name: str) -> "Polynomial":
        variables = tuple(variables)
        if name not in variables:
            raise PolynomialError(f"Unknown variable '{name}'")
        alpha = tuple(1 if v == name else 0 for v in variables)
        return cls(variables, {alpha: 1.0})

    @classmethod
    def monomial(cls, variables: Sequence[str], alpha: MultiIndex, coeff: Number = 1.0) -> "Polynomial":
        return cls(variables, {tuple(alpha): coeff})

    # ============ Inspection ============

    @property
    def vars(self) -> Tuple[str, ...]:
        return self._vars

    @property
    def terms(self) -> Mapping[MultiIndex, float]:
        return MappingProxyType(self._terms)

    @property
    def nvars(self) -> int:
        return len(self._vars)

    @property
    def is_zero(self) -> bool:
        return not self._terms

    @property
    def degree(self) -> Union[int, float]:
        """Total degree; -inf for the zero polynomial."""
        if not self._terms:
            return -math.inf
        return max(sum(alpha) for alpha in self._terms)

    def degree_in(self, name: str) -> int:
        j = self._index(name)
        return max((alpha[j] for alpha in self._terms), default=0)

    def coefficient(self, alpha: MultiIndex) -> float:
        return self._terms.get(tuple(alpha), 0.0)

    def constant_term(self) -> float:
        return self._terms.get((0,) * self.nvars, 0.0)

    def free_variables(self) -> Tuple[str, ...]:
        """Variables with a nonzero exponent in some term."""
        used = [False] * self.nvars
        for alpha in self._terms:
            for j, e in enumerate(alpha):
                if e:
                    used[j] = True
        return tuple(v for v, u in zip(self._vars, used) if u)

    def sorted_terms(self, descending: bool = False) -> List[Tuple[MultiIndex, float]]:
        if descending:
            return sorted(self._terms.items(), key=lambda kv: (-sum(kv[0]), tuple(-e for e in kv[0])))
        return sorted(self._terms.items(), key=lambda kv: glex_key(kv[0]))

    def _index(self, name: str) -> int:
        try:
            return self._vars.index(name)
        except ValueError:
            raise PolynomialError(f"Unknown variable '{name}' (variables: {', '.join(self._vars)})")

    def _check_same_vars(self, other: "Polynomial") -> None:
        if self._vars != other._vars:
            raise PolynomialError(f"Variable-list mismatch: {self._vars} vs {other._vars}")

    # ============ Arithmetic ============

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check_same_vars(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self._vars, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        acc = dict(self._terms)
        for alpha, c in other._terms.items():
            acc[alpha] = acc.get(alpha, 0.0) + c
        return Polynomial(self._vars, acc)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self._vars, {alpha: -c for alpha, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return other - self

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial(self._vars, {alpha: c * float(other) for alpha, c in self._terms.items()})
        if not isinstance(other, Polynomial):
            return NotImplemented
        self._check_same_vars(other)
        acc: Dict[MultiIndex, float] = {}
        for a1, c1 in self._terms.items():
            for a2, c2 in other._terms.items():
                alpha = tuple(x + y for x, y in zip(a1, a2))
                acc[alpha] = acc.get(alpha, 0.0) + c1 * c2
        return Polynomial(self._vars, acc)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            if other == 0:
                raise PolynomialError("Division of a polynomial by zero")
            return self * (1.0 / float(other))
        return NotImplemented

    def __pow__(self, exponent: int):
        if not isinstance(exponent, (int, np.integer)) or exponent < 0:
            raise PolynomialError(f"Polynomial powers need a nonnegative integer, got {exponent}")
        result = Polynomial.constant(self._vars, 1.0)
        base = self
        e = int(exponent)
        while e:
            if e & 1:
                result = result * base
            e >>= 1
            if e:
                base = base * base
        return result

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._vars == other._vars and self._terms == other._terms

    def __hash__(self):
        return hash((self._vars, frozenset(self._terms.items())))

    def almost_equal(self, other: "Polynomial", tol: float = 1e-12) -> bool:
        """Coefficient-wise comparison after normalizing by the largest coefficient."""
        self._check_same_vars(other)
        diff = self - other
        scale = max([1.0] + [abs(c) for c in self._terms.values()] + [abs(c) for c in other._terms.values()])
        return all(abs(c) <= tol * scale for c in diff._terms.values())

    # ============ Calculus and evaluation ============

    def diff(self, name: str) -> "Polynomial":
        j = self._index(name)
        acc = {}
        for alpha, c in self._terms.items():
            if alpha[j]:
                beta = alpha[:j] + (alpha[j] - 1,) + alpha[j + 1:]
                acc[beta] = c * alpha[j]
        return Polynomial(self._vars, acc)

    def gradient(self) -> List["Polynomial"]:
        return [self.diff(v) for v in self._vars]

    def evaluate(self, point: Sequence[float]) -> float:
        """Nested Horner evaluation, one variable at a time."""
        point = [float(v) for v in point]
        if len(point) != self.nvars:
            raise PolynomialError(f"Point has {len(point)} coordinates, expected {self.nvars}")
        if not self._terms:
            return 0.0
        return _horner(self._terms, point, 0)

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized evaluation at the rows of an (N, nvars) array."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.nvars:
            raise PolynomialError(f"Points have {points.shape[1]} columns, expected {self.nvars}")
        if not self._terms:
            return np.zeros(points.shape[0])
        exps = np.array(list(self._terms.keys()), dtype=int).reshape(len(self._terms), self.nvars)
        coeffs = np.array(list(self._terms.values()))
        values = np.ones((points.shape[0], len(coeffs)))
        for j in range(self.nvars):
            top = exps[:, j].max()
            if top == 0:
                continue
            table = points[:, j:j + 1] ** np.arange(top + 1)
            values *= table[:, exps[:, j]]
        return values @ coeffs

    # ============ Substitution ============

    def with_vars(self, variables: Sequence[str]) -> "Polynomial":
        """Re-embed into another ordered variable list."""
        variables = tuple(variables)
        if variables == self._vars:
            return self
        positions = {v: i for i, v in enumerate(variables)}
        for name in self.free_variables():
            if name not in positions:
                raise PolynomialError(f"Variable '{name}' is missing from {variables}")
        index = [positions.get(v) for v in self._vars]
        acc = {}
        for alpha, c in self._terms.items():
            beta = [0] * len(variables)
            for j, e in enumerate(alpha):
                if e:
                    beta[index[j]] = e
            acc[tuple(beta)] = c
        return Polynomial(variables, acc)

    def substitute(self, mapping: Mapping[str, "Polynomial"], variables: Sequence[str]) -> "Polynomial":
        """Replace variables by polynomials over `variables`; unmapped names pass through."""
        variables = tuple(variables)
        images: List[Polynomial] = []
        for name in self._vars:
            if name in mapping:
                image = mapping[name]
                if image.vars != variables:
                    image = image.with_vars(variables)
                images.append(image)
            elif name in variables:
                images.append(Polynomial.variable(variables, name))
            else:
                images.append(None)
        powers: Dict[Tuple[int, int], Polynomial] = {}

        def power(j: int, e: int) -> Polynomial:
            key = (j, e)
            if key not in powers:
                if images[j] is None:
                    raise PolynomialError(f"No image for variable '{self._vars[j]}'")
                powers[key] = images[j] if e == 1 else power(j, e - 1) * images[j]
            return powers[key]

        result: Dict[MultiIndex, float] = {}
        one = Polynomial.constant(variables, 1.0)
        for alpha, c in self._terms.items():
            term = one
            for j, e in enumerate(alpha):
                if e:
                    term = term * power(j, e)
            for beta, d in term._terms.items():
                result[beta] = result.get(beta, 0.0) + c * d
        return Polynomial(variables, result)

    def compose_affine(self, amap: "AffineMap") -> "Polynomial":
        return poly_compose_affine(self, amap)

    def map_coefficients(self, func) -> "Polynomial":
        return Polynomial(self._vars, {alpha: func(c) for alpha, c in self._terms.items()})

    # ============ Printing ============

    def to_string(self) -> str:
        if not self._terms:
            return "0"
        pieces = []
        for k, (alpha, c) in enumerate(self.sorted_terms(descending=True)):
            mono = _monomial_str(self._vars, alpha)
            body = format_coefficient(abs(c)) + (f"*{mono}" if mono else "")
            if k == 0:
                pieces.append(f"-{body}" if c < 0 else body)
            else:
                pieces.append(f" - {body}" if c < 0 else f" + {body}")
        return "".join(pieces)

    def __str__(self) -> str:
        return self.to_string()

    def __repr__(self) -> str:
        return f"Polynomial({list(self._vars)}, {self.to_string()!r})"


def _horner(terms: Mapping[MultiIndex, float], point: List[float], j: int) -> float:
    if j == len(point):
        return sum(terms.values())
    groups: Dict[int, Dict[MultiIndex, float]] = {}
    for alpha, c in terms.items():
        groups.setdefault(alpha[j], {})[alpha] = c
    acc = 0.0
    for e in range(max(groups), -1, -1):
        acc *= point[j]
        if e in groups:
            acc += _horner(groups[e], point, j + 1)
    return acc


@dataclass(frozen=True)
class AffineMap:
    """Per-variable affine change of coordinates: x_new = scale * x_old + offset."""

    variables: Tuple[str, ...]
    scale: Tuple[float, ...]
    offset: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))
        if not (len(self.variables) == len(self.scale) == len(self.offset)):
            raise PolynomialError("AffineMap fields must have equal lengths")
        for name, s in zip(self.variables, self.scale):
            if s == 0.0 or not math.isfinite(s):
                raise PolynomialError(f"Zero or non-finite scale factor for '{name}'")

    @classmethod
    def identity(cls, variables: Sequence[str]) -> "AffineMap":
        return cls(tuple(variables), (1.0,) * len(variables), (0.0,) * len(variables))

    @classmethod
    def to_canonical(cls, variables: Sequence[str], bounds: Sequence[Tuple[float, float]]) -> "AffineMap":
        """Map each box [lo, hi] onto [-1/2, 1/2]: z = (x - c) / w."""
        scale, offset = [], []
        for lo, hi in bounds:
            width = hi - lo
            if width <= 0:
                raise PolynomialError(f"Degenerate interval [{lo}, {hi}]")
            center = 0.5 * (lo + hi)
            scale.append(1.0 / width)
            offset.append(-center / width)
        return cls(tuple(variables), tuple(scale), tuple(offset))

    def apply(self, point: Sequence[float]) -> np.ndarray:
        return np.asarray(self.scale) * np.asarray(point, dtype=float) + np.asarray(self.offset)

    def inverse(self) -> "AffineMap":
        return AffineMap(
            self.variables,
            tuple(1.0 / s for s in self.scale),
            tuple(-o / s for s, o in zip(self.scale, self.offset)),
        )

    def images(self, variables: Sequence[str]) -> Dict[str, Polynomial]:
        """Each mapped variable as a linear polynomial over `variables`."""
        out = {}
        for name, s, o in zip(self.variables, self.scale, self.offset):
            out[name] = Polynomial.variable(variables, name) * s + o
        return out


# ============ Module-level operations ============

def poly_arith(a: Polynomial, b: Polynomial, op: str) -> Polynomial:
    a._check_same_vars(b)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise PolynomialError(f"Unknown polynomial operation '{op}'")


def poly_diff(p: Polynomial, name: str) -> Polynomial:
    return p.diff(name)


def poly_eval(p: Polynomial, point: Sequence[float]) -> float:
    return p.evaluate(point)


def poly_compose_affine(p: Polynomial, amap: AffineMap) -> Polynomial:
    """q(z) = p(scale * z + offset) over the same variable names."""
    missing = [v for v in p.free_variables() if v not in amap.variables]
    if missing:
        raise PolynomialError(f"AffineMap does not cover {', '.join(missing)}")
    return p.substitute(amap.images(p.vars), p.vars)


def sum_polynomials(variables: Sequence[str], polys: Iterable[Polynomial]) -> Polynomial:
    acc: Dict[MultiIndex, float] = {}
    for p in polys:
        p._check_same_vars(Polynomial.zero(variables))
        for alpha, c in p.terms.items():
            acc[alpha] = acc.get(alpha, 0.0) + c
    return Polynomial(variables, acc)
