"""
Sum-of-squares programs for stability and dissipativity certificates.

A program is a list of polynomial constraints, each required to be a sum of
squares, whose coefficients are affine in decision variables: storage
function coefficients, Gram entries of S-procedure multipliers and an optional
index (rho, nu or gamma^2). Region and error-symbol constraints g <= 0 enter
as + s * g with s SOS. `compile_to_sdp` turns the program into an SdpProblem
through Gram parameterization and coefficient matching.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import sparse

from app.config import settings
from app.services.approx import (
    BernsteinSurrogate,
    TaylorSurrogate,
    anchored_polynomial,
)
from app.services.polycore import AffineMap, MultiIndex, Polynomial, glex_key, monomial_basis
from app.services.sdp import Block, SdpProblem
from app.services.system import Region

logger = logging.getLogger(__name__)

Key = Tuple
INDEX_KEY: Key = ("index", 0)
SUPPLY_KINDS = ("passivity", "ofp", "ifp", "if-ofp", "qsr", "l2gain", "custom")


class SosError(ValueError):
    """Invalid SOS program data or a constraint that is not affine in the decisions."""


# ============ Affine polynomials in the decisions ============

class AffinePoly:
    """Polynomial whose coefficients are affine in decision variables.

    Stored as key -> Polynomial; the key None holds the decision-free part.
    """

    __slots__ = ("vars", "parts")

    def __init__(self, variables: Sequence[str], parts: Optional[Mapping[Optional[Key], Polynomial]] = None):
        self.vars = tuple(variables)
        clean: Dict[Optional[Key], Polynomial] = {}
        for key, poly in (parts or {}).items():
            if poly.vars != self.vars:
                poly = poly.with_vars(self.vars)
            if not poly.is_zero:
                clean[key] = poly
        self.parts = clean

    @classmethod
    def constant(cls, poly: Polynomial) -> "AffinePoly":
        return cls(poly.vars, {None: poly})

    @classmethod
    def term(cls, key: Key, poly: Polynomial) -> "AffinePoly":
        return cls(poly.vars, {key: poly})

    @classmethod
    def zero(cls, variables: Sequence[str]) -> "AffinePoly":
        return cls(variables)

    @property
    def is_constant(self) -> bool:
        return all(key is None for key in self.parts)

    def keys(self) -> List[Key]:
        return [key for key in self.parts if key is not None]

    def constant_part(self) -> Polynomial:
        return self.parts.get(None, Polynomial.zero(self.vars))

    def part(self, key: Optional[Key]) -> Polynomial:
        return self.parts.get(key, Polynomial.zero(self.vars))

    def support(self) -> Set[MultiIndex]:
        monos: Set[MultiIndex] = set()
        for poly in self.parts.values():
            monos.update(poly.terms.keys())
        return monos

    def _check(self, other: "AffinePoly") -> None:
        if self.vars != other.vars:
            raise SosError(f"Variable-list mismatch: {self.vars} vs {other.vars}")

    def __add__(self, other: "AffinePoly") -> "AffinePoly":
        if isinstance(other, Polynomial):
            other = AffinePoly.constant(other)
        self._check(other)
        parts = dict(self.parts)
        for key, poly in other.parts.items():
            parts[key] = parts[key] + poly if key in parts else poly
        return AffinePoly(self.vars, parts)

    def __neg__(self) -> "AffinePoly":
        return AffinePoly(self.vars, {key: -poly for key, poly in self.parts.items()})

    def __sub__(self, other: "AffinePoly") -> "AffinePoly":
        if isinstance(other, Polynomial):
            other = AffinePoly.constant(other)
        return self + (-other)

    def __mul__(self, other) -> "AffinePoly":
        if isinstance(other, (int, float, np.floating)):
            return AffinePoly(self.vars, {key: poly * float(other) for key, poly in self.parts.items()})
        if isinstance(other, Polynomial):
            return AffinePoly(self.vars, {key: poly * other for key, poly in self.parts.items()})
        if isinstance(other, AffinePoly):
            self._check(other)
            if other.is_constant:
                return self * other.constant_part()
            if self.is_constant:
                return other * self.constant_part()
            raise SosError("Product of two decision-dependent polynomials is not affine in the decisions")
        return NotImplemented

    __rmul__ = __mul__

    def diff(self, name: str) -> "AffinePoly":
        return AffinePoly(self.vars, {key: poly.diff(name) for key, poly in self.parts.items()})

    def with_vars(self, variables: Sequence[str]) -> "AffinePoly":
        return AffinePoly(variables, {key: poly.with_vars(variables) for key, poly in self.parts.items()})

    def substitute(self, mapping: Mapping[str, Polynomial], variables: Sequence[str]) -> "AffinePoly":
        return AffinePoly(variables, {key: poly.substitute(mapping, variables) for key, poly in self.parts.items()})

    def compose_affine(self, amap: AffineMap) -> "AffinePoly":
        return AffinePoly(self.vars, {key: poly.compose_affine(amap) for key, poly in self.parts.items()})

    def evaluate_decisions(self, values: Mapping[Key, float]) -> Polynomial:
        result = self.constant_part()
        for key in self.keys():
            if key not in values:
                raise SosError(f"No value for decision {format_key(key)}")
            result = result + self.parts[key] * float(values[key])
        return result

    def to_string(self) -> str:
        lines = []
        for key in sorted(self.parts, key=lambda k: (k is not None, str(k))):
            label = "1" if key is None else format_key(key)
            lines.append(f"  [{label}] * ({self.parts[key].to_string()})")
        return "\n".join(lines) if lines else "  0"


def format_key(key: Key) -> str:
    name, *index = key
    return f"{name}[{','.join(str(i) for i in index)}]"


# ============ Decision polynomials ============

@dataclass(frozen=True)
class DecisionPoly:
    """Unknown polynomial: free coefficients over `basis`, or z' G z with G PSD over a half basis."""

    name: str
    vars: Tuple[str, ...]
    basis: Tuple[MultiIndex, ...]
    sos: bool
    family: str = ""
    constraint: str = ""

    def keys(self) -> List[Key]:
        if self.sos:
            size = len(self.basis)
            return [(self.name, a, b) for a in range(size) for b in range(a, size)]
        return [(self.name, k) for k in range(len(self.basis))]

    @property
    def degree(self) -> int:
        top = max((sum(alpha) for alpha in self.basis), default=0)
        return 2 * top if self.sos else top

    def affine(self, variables: Optional[Sequence[str]] = None) -> AffinePoly:
        parts: Dict[Key, Polynomial] = {}
        if self.sos:
            for a in range(len(self.basis)):
                for b in range(a, len(self.basis)):
                    alpha = tuple(x + y for x, y in zip(self.basis[a], self.basis[b]))
                    parts[(self.name, a, b)] = Polynomial.monomial(self.vars, alpha, 1.0 if a == b else 2.0)
        else:
            for k, alpha in enumerate(self.basis):
                parts[(self.name, k)] = Polynomial.monomial(self.vars, alpha, 1.0)
        result = AffinePoly(self.vars, parts)
        return result if variables is None else result.with_vars(variables)

    def gram(self, values: Mapping[Key, float]) -> np.ndarray:
        size = len(self.basis)
        matrix = np.zeros((size, size))
        for a in range(size):
            for b in range(a, size):
                matrix[a, b] = matrix[b, a] = values[(self.name, a, b)]
        return matrix

    def evaluate(self, values: Mapping[Key, float]) -> Polynomial:
        return self.affine().evaluate_decisions(values)


# ============ Supply rates ============

@dataclass(frozen=True)
class SupplyRate:
    """w(u, y) = u'Ru + 2y'Su + y'Qy plus optional index terms.

    `index` names the parameter optimized as a decision variable (rho, nu or
    gamma2); fixed parameters are stored in rho/nu/gamma2.
    """

    kind: str
    m: int
    p: int
    Q: Tuple[Tuple[float, ...], ...] = ()
    S: Tuple[Tuple[float, ...], ...] = ()
    R: Tuple[Tuple[float, ...], ...] = ()
    rho: Optional[float] = None
    nu: Optional[float] = None
    gamma2: Optional[float] = None
    index: Optional[str] = None
    custom: Optional[Polynomial] = None

    @property
    def index_sign(self) -> float:
        """Objective sign: maximize rho or nu, minimize gamma^2."""
        return -1.0 if self.index == "gamma2" else 1.0

    def with_index(self, value: float) -> "SupplyRate":
        if self.index is None:
            return self
        params = {"rho": self.rho, "nu": self.nu, "gamma2": self.gamma2}
        params[self.index] = float(value)
        return SupplyRate(
            self.kind, self.m, self.p, self.Q, self.S, self.R,
            params["rho"], params["nu"], params["gamma2"], None, self.custom,
        )

    def index_value(self) -> Optional[float]:
        return {"rho": self.rho, "nu": self.nu, "gamma2": self.gamma2}.get(self.index or "", None)

    def _matrices(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        Q = np.array(self.Q, dtype=float).reshape(self.p, self.p) if self.Q else np.zeros((self.p, self.p))
        S = np.array(self.S, dtype=float).reshape(self.p, self.m) if self.S else np.zeros((self.p, self.m))
        R = np.array(self.R, dtype=float).reshape(self.m, self.m) if self.R else np.zeros((self.m, self.m))
        return Q, S, R

    def affine(self, inputs: Sequence[str], outputs: Sequence[str]) -> AffinePoly:
        """w as an AffinePoly over inputs + outputs; the index (if any) is the decision INDEX_KEY."""
        variables = tuple(inputs) + tuple(outputs)
        if len(inputs) != self.m or len(outputs) != self.p:
            raise SosError(f"Supply rate expects m={self.m}, p={self.p}; got {len(inputs)}, {len(outputs)}")
        if self.kind == "custom":
            return AffinePoly.constant(self.custom.with_vars(variables))
        u = [Polynomial.variable(variables, name) for name in inputs]
        y = [Polynomial.variable(variables, name) for name in outputs]
        Q, S, R = self._matrices()
        w = Polynomial.zero(variables)
        for i in range(self.p):
            for j in range(self.p):
                if Q[i, j]:
                    w = w + y[i] * y[j] * Q[i, j]
            for j in range(self.m):
                if S[i, j]:
                    w = w + y[i] * u[j] * (2.0 * S[i, j])
        for i in range(self.m):
            for j in range(self.m):
                if R[i, j]:
                    w = w + u[i] * u[j] * R[i, j]
        result = AffinePoly.constant(w)
        yy = sum((yi * yi for yi in y), Polynomial.zero(variables))
        uu = sum((ui * ui for ui in u), Polynomial.zero(variables))
        for name, poly in (("rho", -yy), ("nu", -uu), ("gamma2", uu)):
            if self.index == name:
                result = result + AffinePoly.term(INDEX_KEY, poly)
            else:
                value = getattr(self, name)
                if value is not None:
                    result = result + AffinePoly.constant(poly * value)
        return result

    def evaluate(self, u: np.ndarray, y: np.ndarray, index_value: Optional[float] = None) -> np.ndarray:
        """Vectorized w at rows of u (N, m) and y (N, p)."""
        u = np.atleast_2d(u)
        y = np.atleast_2d(y)
        if self.kind == "custom":
            return self.custom.evaluate_many(np.hstack([u, y]))
        Q, S, R = self._matrices()
        w = np.einsum("ni,ij,nj->n", y, Q, y) + 2.0 * np.einsum("ni,ij,nj->n", y, S, u) + np.einsum("ni,ij,nj->n", u, R, u)
        params = {"rho": self.rho, "nu": self.nu, "gamma2": self.gamma2}
        if self.index is not None:
            if index_value is None:
                raise SosError(f"Supply rate needs a value for its index '{self.index}'")
            params[self.index] = index_value
        yy = np.sum(y * y, axis=1)
        uu = np.sum(u * u, axis=1)
        if params["rho"] is not None:
            w = w - params["rho"] * yy
        if params["nu"] is not None:
            w = w - params["nu"] * uu
        if params["gamma2"] is not None:
            w = w + params["gamma2"] * uu
        return w

    def describe(self) -> Dict:
        return {
            "kind": self.kind,
            "Q": [list(r) for r in self.Q],
            "S": [list(r) for r in self.S],
            "R": [list(r) for r in self.R],
            "rho": self.rho,
            "nu": self.nu,
            "gamma2": self.gamma2,
            "index": self.index,
            "custom": None if self.custom is None else self.custom.to_string(),
        }


def _as_matrix(value, rows: int, cols: int, label: str) -> Tuple[Tuple[float, ...], ...]:
    matrix = np.array(value, dtype=float)
    if matrix.ndim == 0:
        matrix = matrix * np.eye(rows, cols)
    if matrix.shape != (rows, cols):
        raise SosError(f"{label} must be {rows}x{cols}, got shape {matrix.shape}")
    return tuple(tuple(float(v) for v in row) for row in matrix)


def make_supply(kind: str, m: int, p: int, **params) -> SupplyRate:
    """Supply rate of the given kind.

    Parameters: rho / nu / gamma (fixed values) or index="rho"|"nu"|"gamma2"
    to optimize; Q, S, R for qsr; custom Polynomial over (u..., y...) for custom.
    """
    kind = kind.lower()
    if kind not in SUPPLY_KINDS:
        raise SosError(f"Unknown supply kind '{kind}'")
    index = params.get("index")
    rho, nu = params.get("rho"), params.get("nu")
    gamma = params.get("gamma")
    gamma2 = None if gamma is None else float(gamma) ** 2
    if kind in ("passivity", "ofp", "ifp", "if-ofp") and m != p:
        raise SosError(f"{kind} supply needs as many outputs as inputs (m={m}, p={p})")
    if p == 0 and kind not in ("custom", "qsr"):
        raise SosError("Supply rate references outputs but the system has none")
    half = _as_matrix(0.5, p, m, "S") if m == p else ()
    if kind == "passivity":
        return SupplyRate("passivity", m, p, S=half)
    if kind == "ofp":
        if rho is None and index is None:
            index = "rho"
        return SupplyRate("ofp", m, p, S=half, rho=None if index == "rho" else float(rho), index=index)
    if kind == "ifp":
        if nu is None and index is None:
            index = "nu"
        return SupplyRate("ifp", m, p, S=half, nu=None if index == "nu" else float(nu), index=index)
    if kind == "if-ofp":
        if rho is None or nu is None:
            raise SosError("if-ofp supply needs both rho and nu")
        return SupplyRate("if-ofp", m, p, S=half, rho=float(rho), nu=float(nu))
    if kind == "l2gain":
        if gamma2 is None and index is None:
            index = "gamma2"
        Q = _as_matrix(-1.0, p, p, "Q")
        return SupplyRate("l2gain", m, p, Q=Q, gamma2=gamma2, index=index)
    if kind == "qsr":
        Q = _as_matrix(params.get("Q", 0.0), p, p, "Q")
        S = _as_matrix(params.get("S", 0.0), p, m, "S")
        R = _as_matrix(params.get("R", 0.0), m, m, "R")
        for label, mat in (("Q", Q), ("R", R)):
            arr = np.array(mat).reshape(len(mat), -1) if mat else np.zeros((0, 0))
            if arr.size and np.max(np.abs(arr - arr.T)) > 1e-12:
                raise SosError(f"{label} must be symmetric")
        return SupplyRate("qsr", m, p, Q=Q, S=S, R=R)
    custom = params.get("custom")
    if not isinstance(custom, Polynomial):
        raise SosError("custom supply needs a Polynomial over (inputs, outputs)")
    return SupplyRate("custom", m, p, custom=custom)


# ============ Problems ============

@dataclass(frozen=True)
class SosOptions:
    vdeg: int = 4
    multiplier_degree: Optional[int] = None
    margin: float = 1e-6
    variant: str = "ellipsoid"
    error_model: str = "anchored"


@dataclass
class SosConstraint:
    name: str
    poly: AffinePoly
    role: str


@dataclass
class SosProblem:
    indeterminates: Tuple[str, ...]
    states: Tuple[str, ...]
    inputs: Tuple[str, ...]
    error_symbols: Tuple[str, ...]
    decisions: List[DecisionPoly]
    constraints: List[SosConstraint]
    storage: Optional[DecisionPoly]
    storage_poly: Optional[AffinePoly]
    supply: Optional[SupplyRate]
    objective: Optional[Tuple[Key, float]]
    theorem: str
    variant: str
    coordinate_map: Optional[AffineMap] = None
    error_bounds: Dict[str, float] = field(default_factory=dict)
    meta: Dict = field(default_factory=dict)

    def decision(self, name: str) -> DecisionPoly:
        for d in self.decisions:
            if d.name == name:
                return d
        raise SosError(f"No decision polynomial named '{name}'")

    def multiplier_counts(self) -> Dict[str, int]:
        return dict(Counter(f"{d.constraint}.{d.family}" for d in self.decisions if d.sos))

    def dump(self) -> str:
        """Human-readable listing of every constraint with symbolic decision coefficients."""
        lines = [
            f"SOS program ({self.theorem}, {self.variant})",
            f"indeterminates: {', '.join(self.indeterminates)}",
            f"error symbols: {', '.join(self.error_symbols) or '-'}",
        ]
        for d in self.decisions:
            kind = "SOS" if d.sos else "free"
            lines.append(f"decision {d.name} ({kind}, {d.family}, basis size {len(d.basis)}, over {', '.join(d.vars) or '-'})")
        if self.objective is not None:
            key, sign = self.objective
            lines.append(f"objective: maximize {'' if sign > 0 else '-'}{format_key(key)}")
        for c in self.constraints:
            lines.append(f"constraint {c.name} ({c.role}) is SOS:")
            lines.append(c.poly.to_string())
        return "\n".join(lines)


def _even_ceil(d: float) -> int:
    d = int(math.ceil(d))
    return d + (d % 2)


def _even_floor(d: float) -> int:
    d = int(math.floor(d))
    return d - (d % 2)


class _Assembly:
    """Shared bookkeeping for the program builders."""

    def __init__(self, indeterminates: Sequence[str], regular: Sequence[str], errors: Sequence[str], opts: SosOptions):
        self.vars = tuple(indeterminates)
        self.regular = tuple(regular)
        self.errors = tuple(errors)
        self.opts = opts
        self.decisions: List[DecisionPoly] = []

    def storage(self, states: Sequence[str]) -> Tuple[Optional[DecisionPoly], AffinePoly]:
        """V with monomials of degree 2..vdeg over the states, so V(0) = 0."""
        if not states:
            return None, AffinePoly.zero(self.vars)
        if self.opts.vdeg < 2:
            raise SosError(f"Storage degree must be at least 2, got {self.opts.vdeg}")
        basis = tuple(alpha for alpha in monomial_basis(states, self.opts.vdeg) if sum(alpha) >= 2)
        storage = DecisionPoly("V", tuple(states), basis, sos=False, family="storage")
        self.decisions.append(storage)
        return storage, storage.affine(self.vars)

    def scalar(self, name: str) -> None:
        self.decisions.append(DecisionPoly(name, (), ((),), sos=False, family="index"))

    def multiplier(
        self,
        name: str,
        family: str,
        constraint: str,
        over: Sequence[str],
        degree: int,
        vanish: bool,
        caps: Optional[Mapping[str, int]] = None,
    ) -> Optional[AffinePoly]:
        if self.opts.multiplier_degree is not None:
            degree = self.opts.multiplier_degree
        half = degree // 2
        basis = []
        for alpha in monomial_basis(over, half):
            if vanish and sum(alpha) == 0:
                continue
            if caps and any(alpha[j] > caps.get(v, half) for j, v in enumerate(over)):
                continue
            basis.append(alpha)
        if not basis:
            return None
        decision = DecisionPoly(name, tuple(over), tuple(basis), sos=True, family=family, constraint=constraint)
        self.decisions.append(decision)
        return decision.affine(self.vars)

    def layer_profile(self, poly: AffinePoly) -> Tuple[int, Dict[str, int]]:
        """Degree the region multipliers must reach, and per-variable exponent caps."""
        err_idx = [j for j, v in enumerate(self.vars) if v in self.errors]
        reg_idx = [j for j, v in enumerate(self.vars) if v in self.regular]
        d0 = 0
        linear: List[int] = []
        quad_top = None
        caps: Dict[str, int] = {}
        for alpha in poly.support():
            edeg = sum(alpha[j] for j in err_idx)
            rdeg = sum(alpha[j] for j in reg_idx)
            if edeg == 0:
                d0 = max(d0, rdeg)
            elif edeg == 1:
                linear.append(rdeg)
            elif edeg == 2:
                quad_top = rdeg if quad_top is None else max(quad_top, rdeg)
            for j in reg_idx:
                caps[self.vars[j]] = max(caps.get(self.vars[j], 0), alpha[j])
        required = d0
        if quad_top is not None:
            for d1 in linear:
                required = max(required, 2 * (d1 - quad_top // 2))
        return _even_ceil(required), {v: max(1, math.ceil(e / 2)) for v, e in caps.items()}

    def with_region_terms(
        self,
        constraint: str,
        poly: AffinePoly,
        constraints: Sequence[Tuple[str, Polynomial]],
        over: Sequence[str],
    ) -> AffinePoly:
        """poly + sum s_k g_k with multiplier degrees filling the required degree."""
        required, caps = self.layer_profile(poly)
        result = poly
        for label, g in constraints:
            g = g.with_vars(self.vars)
            degree = _even_floor(required - g.degree)
            vanish = g.constant_term() != 0.0
            if degree < (2 if vanish else 0):
                continue
            s = self.multiplier(f"s_{constraint}_{label}", "region", constraint, over, degree, vanish, caps)
            if s is not None:
                result = result + s * g
        return result


def _margin(assembly: _Assembly, states: Sequence[str], lam: float) -> Polynomial:
    phi = Polynomial.zero(assembly.vars)
    for name in states:
        x = Polynomial.variable(assembly.vars, name)
        phi = phi + x * x * lam
    return phi


def _taylor_symbols(surrogate: TaylorSurrogate, component: str, count: int, prefix: str):
    """Error symbols per component: [(symbol name, beta, bound)] with zero bounds pruned."""
    out = []
    for i in range(count):
        entries = []
        for beta, bound in surrogate.nonzero_remainders(component, i):
            entries.append((f"{prefix}{i + 1}_{'_'.join(str(b) for b in beta)}", beta, bound))
        out.append(entries)
    return out


def _check_names(used: Iterable[str], errors: Iterable[str]) -> None:
    clash = set(used) & set(errors)
    if clash:
        raise SosError(f"Variable names clash with error symbols: {', '.join(sorted(clash))}")


def _error_terms_taylor(
    assembly: _Assembly,
    constraint: str,
    poly: AffinePoly,
    groups: List[List[Tuple[str, MultiIndex, float]]],
    variant: str,
    label: str,
) -> AffinePoly:
    """Attach S-procedure terms for Taylor error symbols (box pairs or one ellipsoid per component)."""
    over = assembly.regular
    result = poly
    for i, entries in enumerate(groups):
        if not entries:
            continue
        if variant == "box":
            for symbol, _beta, bound in entries:
                j = assembly.vars.index(symbol)
                coeff_degree = max(
                    (sum(a for k, a in enumerate(alpha) if k != j and assembly.vars[k] in over)
                     for alpha in poly.support() if alpha[j] == 1),
                    default=0,
                )
                degree = max(2, _even_ceil(coeff_degree))
                r = Polynomial.variable(assembly.vars, symbol)
                for side, g in (("up", r - bound), ("lo", -r - bound)):
                    s = assembly.multiplier(f"s_{constraint}_{symbol}_{side}", "error", constraint, over, degree, True)
                    if s is not None:
                        result = result + s * g
        else:
            radius = sum(bound ** 2 for _s, _b, bound in entries)
            g = Polynomial.constant(assembly.vars, -radius)
            for symbol, _beta, _bound in entries:
                r = Polynomial.variable(assembly.vars, symbol)
                g = g + r * r
            s = assembly.multiplier(f"s_{constraint}_{label}{i + 1}_ball", "error", constraint, over, 2, True)
            if s is not None:
                result = result + s * g
    return result


def _taylor_program(
    surrogate: TaylorSurrogate,
    region: Region,
    supply: Optional[SupplyRate],
    opts: SosOptions,
    variant: str,
    theorem: str,
) -> SosProblem:
    if not surrogate.bounded:
        raise SosError("Taylor surrogate has no remainder bounds")
    if variant not in ("box", "ellipsoid"):
        raise SosError(f"Unknown Taylor variant '{variant}'")
    states, inputs = surrogate.states, surrogate.inputs
    base = surrogate.variables
    r_groups = _taylor_symbols(surrogate, "f", len(states), "r")
    t_groups = _taylor_symbols(surrogate, "h", len(surrogate.h_polys), "t") if supply is not None else []
    errors = tuple(s for group in r_groups + t_groups for s, _b, _v in group)
    _check_names(base, errors)
    variables = base + errors
    assembly = _Assembly(variables, base, errors, opts)
    storage, V = assembly.storage(states)
    if supply is not None and supply.index is not None:
        assembly.scalar(INDEX_KEY[0])

    constraints: List[SosConstraint] = []
    stability = supply is None
    lam = opts.margin

    # storage nonnegativity
    if states:
        core = V - _margin(assembly, states, lam) if stability else V
        storage_region = region.restricted(base).constraint_polys(states)
        poly = assembly.with_region_terms("storage", core, storage_region, states)
        constraints.append(SosConstraint("storage", poly, "storage"))

    # dissipation
    def symbol_poly(groups, index):
        acc = Polynomial.zero(variables)
        for symbol, beta, _bound in groups[index] if index < len(groups) else []:
            mono = Polynomial.monomial(variables, beta + (0,) * len(errors))
            acc = acc + Polynomial.variable(variables, symbol) * mono
        return acc

    core = AffinePoly.zero(variables)
    for i, name in enumerate(states):
        F = surrogate.f_polys[i].with_vars(variables) + symbol_poly(r_groups, i)
        core = core - V.diff(name) * F
    if stability:
        core = core - _margin(assembly, states, lam)
    else:
        outputs = tuple(f"y{j + 1}" for j in range(supply.p))
        w = supply.affine(inputs, outputs)
        images = {}
        for j, name in enumerate(outputs):
            images[name] = surrogate.h_polys[j].with_vars(variables) + symbol_poly(t_groups, j)
        core = core + w.substitute(images, variables)
    core = _error_terms_taylor(assembly, "dissipation", core, r_groups, variant, "f")
    core = _error_terms_taylor(assembly, "dissipation", core, t_groups, variant, "h")
    dynamic_region = region.restricted(base).constraint_polys(base)
    poly = assembly.with_region_terms("dissipation", core, dynamic_region, base)
    constraints.append(SosConstraint("dissipation", poly, "dissipation"))

    bounds = {s: v for group in r_groups + t_groups for s, _b, v in group}
    problem = SosProblem(
        indeterminates=variables,
        states=states,
        inputs=inputs,
        error_symbols=errors,
        decisions=assembly.decisions,
        constraints=constraints,
        storage=storage,
        storage_poly=V,
        supply=supply,
        objective=(INDEX_KEY, supply.index_sign) if supply is not None and supply.index else None,
        theorem=theorem,
        variant=variant,
        error_bounds=bounds,
        meta={"approx": "taylor" if surrogate.order else "exact-polynomial", "order": surrogate.order},
    )
    _log_problem(problem)
    return problem


def build_stability_taylor(
    surrogate: TaylorSurrogate,
    region: Region,
    opts: SosOptions = SosOptions(),
    variant: Optional[str] = None,
) -> SosProblem:
    """Local stability program: V - phi1 + sum s g SOS and -grad V (p + r x^beta) - phi2 + ... SOS."""
    if surrogate.inputs:
        raise SosError("Stability programs need a system without inputs (fix the inputs to zero first)")
    return _taylor_program(surrogate, region, None, opts, variant or opts.variant, "taylor-stability")


def build_dissipativity_taylor(
    surrogate: TaylorSurrogate,
    region: Region,
    supply: SupplyRate,
    opts: SosOptions = SosOptions(),
    variant: Optional[str] = None,
) -> SosProblem:
    """Local dissipativity program with Taylor error symbols r (dynamics) and t (outputs)."""
    if supply.p != len(surrogate.h_polys) or supply.m != len(surrogate.inputs):
        raise SosError(
            f"Supply rate dimensions (m={supply.m}, p={supply.p}) do not match the system "
            f"(m={len(surrogate.inputs)}, p={len(surrogate.h_polys)})"
        )
    return _taylor_program(surrogate, region, supply, opts, variant or opts.variant, "taylor-dissipativity")


def _bernstein_program(
    surrogate: BernsteinSurrogate,
    supply: Optional[SupplyRate],
    opts: SosOptions,
    error_model: str,
    theorem: str,
) -> SosProblem:
    if surrogate.convention != "canonical":
        raise SosError("Bernstein programs need a canonical-convention surrogate (scale the region first)")
    if not surrogate.bounded:
        raise SosError("Bernstein surrogate has no error bounds")
    if error_model not in ("box", "anchored"):
        raise SosError(f"Unknown Bernstein error model '{error_model}'")
    if error_model == "anchored" and (
        len(surrogate.f_slopes) != len(surrogate.f_polys) or len(surrogate.h_slopes) != len(surrogate.h_polys)
    ):
        raise SosError("Anchored error model needs slope bounds")
    states, inputs = surrogate.states, surrogate.inputs
    base = surrogate.variables
    use_outputs = supply is not None
    f_symbols = [f"eps{i + 1}" if surrogate.f_bounds[i] > 0 else None for i in range(len(states))]
    h_symbols = (
        [f"epsy{j + 1}" if surrogate.h_bounds[j] > 0 else None for j in range(len(surrogate.h_polys))]
        if use_outputs else []
    )
    errors = tuple(s for s in f_symbols + h_symbols if s)
    _check_names(base, errors)
    variables = base + errors
    assembly = _Assembly(variables, base, errors, opts)

    # program coordinates: zeta = z - z0 = x / w, equilibrium at the origin
    anchor = surrogate.anchor
    shift = AffineMap(base, (1.0,) * len(base), anchor)
    widths = [1.0 / s for s in surrogate.coordinate_map.scale]
    to_program = AffineMap(base, tuple(surrogate.coordinate_map.scale), (0.0,) * len(base))

    def program_poly(poly: Polynomial) -> Polynomial:
        if error_model == "anchored":
            poly = anchored_polynomial(poly, anchor)
        return poly.compose_affine(shift).with_vars(variables)

    storage, V = assembly.storage(states)
    if supply is not None and supply.index is not None:
        assembly.scalar(INDEX_KEY[0])
    lam = opts.margin
    box_pairs: List[Tuple[str, Polynomial]] = []
    for k, name in enumerate(base):
        zeta = Polynomial.variable(variables, name)
        box_pairs.append((f"{name}_up", zeta - (0.5 - anchor[k])))
        box_pairs.append((f"{name}_lo", -zeta - (0.5 + anchor[k])))
    state_pairs = [pair for pair in box_pairs if pair[0].rsplit("_", 1)[0] in states]

    constraints: List[SosConstraint] = []
    if states:
        core = V - _margin(assembly, states, lam)
        poly = _attach_pairs(assembly, "storage", core, state_pairs, states)
        constraints.append(SosConstraint("storage", poly, "storage"))

    def with_error(poly: Polynomial, symbol: Optional[str]) -> Polynomial:
        if symbol is None:
            return poly
        return poly + Polynomial.variable(variables, symbol)

    core = AffinePoly.zero(variables)
    for i, name in enumerate(states):
        core = core - V.diff(name) * with_error(program_poly(surrogate.f_polys[i]), f_symbols[i])
    if supply is None:
        core = core - _margin(assembly, states, lam)
    else:
        outputs = tuple(f"y{j + 1}" for j in range(supply.p))
        w = supply.affine(inputs, outputs).with_vars(tuple(inputs) + outputs)
        images: Dict[str, Polynomial] = {}
        for j, name in enumerate(outputs):
            images[name] = with_error(program_poly(surrogate.h_polys[j]), h_symbols[j])
        for k, name in enumerate(inputs):
            images[name] = Polynomial.variable(variables, name) * widths[len(states) + k]
        core = core + w.substitute(images, variables)

    error_specs = []
    for i, symbol in enumerate(f_symbols):
        if symbol:
            error_specs.append((symbol, surrogate.f_bounds[i], surrogate.f_slopes[i] if surrogate.f_slopes else 0.0))
    for j, symbol in enumerate(h_symbols):
        if symbol:
            error_specs.append((symbol, surrogate.h_bounds[j], surrogate.h_slopes[j] if surrogate.h_slopes else 0.0))

    for symbol, bound, slope in error_specs:
        e = Polynomial.variable(variables, symbol)
        if error_model == "box":
            j = variables.index(symbol)
            coeff_degree = max(
                (sum(alpha[k] for k, v in enumerate(variables) if v in base) for alpha in core.support() if alpha[j] == 1),
                default=0,
            )
            degree = max(2, _even_ceil(coeff_degree))
            for side, g in (("up", e - bound), ("lo", -e - bound)):
                s = assembly.multiplier(f"s_dissipation_{symbol}_{side}", "error", "dissipation", base, degree, True)
                if s is not None:
                    core = core + s * g
        else:
            ball = Polynomial.zero(variables)
            for name in base:
                zeta = Polynomial.variable(variables, name)
                ball = ball + zeta * zeta
            g = e * e - ball * (slope ** 2)
            s = assembly.multiplier(f"s_dissipation_{symbol}_cone", "error", "dissipation", base, 2, False)
            if s is not None:
                core = core + s * g
    poly = _attach_pairs(assembly, "dissipation", core, box_pairs, base)
    constraints.append(SosConstraint("dissipation", poly, "dissipation"))

    bounds = {}
    for symbol, bound, slope in error_specs:
        bounds[symbol] = bound
    problem = SosProblem(
        indeterminates=variables,
        states=states,
        inputs=inputs,
        error_symbols=errors,
        decisions=assembly.decisions,
        constraints=constraints,
        storage=storage,
        storage_poly=V,
        supply=supply,
        objective=(INDEX_KEY, supply.index_sign) if supply is not None and supply.index else None,
        theorem=theorem,
        variant=error_model,
        coordinate_map=to_program,
        error_bounds=bounds,
        meta={"approx": "bernstein", "degrees": [list(row) for row in surrogate.degrees]},
    )
    _log_problem(problem)
    return problem


def _attach_pairs(
    assembly: _Assembly,
    constraint: str,
    poly: AffinePoly,
    pairs: Sequence[Tuple[str, Polynomial]],
    over: Sequence[str],
) -> AffinePoly:
    return assembly.with_region_terms(constraint, poly, pairs, over)


def build_dissipativity_bernstein(
    surrogate: BernsteinSurrogate,
    supply: SupplyRate,
    opts: SosOptions = SosOptions(),
    error_model: Optional[str] = None,
) -> SosProblem:
    """Dissipativity program over the canonical box with error symbols eps (dynamics) and epsy (outputs)."""
    if supply.p != len(surrogate.h_polys) or supply.m != len(surrogate.inputs):
        raise SosError("Supply rate dimensions do not match the surrogate")
    return _bernstein_program(surrogate, supply, opts, error_model or opts.error_model, "bernstein-dissipativity")


def build_stability_bernstein(
    surrogate: BernsteinSurrogate,
    opts: SosOptions = SosOptions(),
    error_model: Optional[str] = None,
) -> SosProblem:
    """Local stability program over the canonical box."""
    if surrogate.inputs:
        raise SosError("Stability programs need a system without inputs")
    return _bernstein_program(surrogate, None, opts, error_model or opts.error_model, "bernstein-stability")


def _log_problem(problem: SosProblem) -> None:
    counts = problem.multiplier_counts()
    logger.info(
        f"Assembled {problem.theorem} program ({problem.variant}): "
        f"{len(problem.indeterminates)} indeterminates, {len(problem.error_symbols)} error symbols, "
        f"{len(problem.decisions)} decision polynomials, multipliers {counts}"
    )


# ============ Compilation to SDP ============

def gram_basis(support: Iterable[MultiIndex], variables: Sequence[str], error_symbols: Iterable[str]) -> List[MultiIndex]:
    """Half-degree Gram basis, bounded per error-symbol layer.

    For every even error-exponent class 2h present in the support, basis
    monomials carry error part h and a state/input part whose total degree and
    per-variable exponents lie within half the range observed in that class.
    """
    errors = set(error_symbols)
    err_idx = [j for j, v in enumerate(variables) if v in errors]
    reg_idx = [j for j, v in enumerate(variables) if v not in errors]
    classes: Dict[Tuple[int, ...], List[MultiIndex]] = {}
    for alpha in support:
        e = tuple(alpha[j] for j in err_idx)
        if all(x % 2 == 0 for x in e):
            classes.setdefault(e, []).append(alpha)
    reg_vars = [variables[j] for j in reg_idx]
    basis: Set[MultiIndex] = set()
    for e, monos in classes.items():
        degrees = [sum(alpha[j] for j in reg_idx) for alpha in monos]
        lo, hi = math.ceil(min(degrees) / 2), max(degrees) // 2
        caps = [max(alpha[j] for alpha in monos) // 2 for j in reg_idx]
        for gamma in monomial_basis(reg_vars, hi):
            if sum(gamma) < lo or any(g > c for g, c in zip(gamma, caps)):
                continue
            alpha = [0] * len(variables)
            for j, g in zip(reg_idx, gamma):
                alpha[j] = g
            for j, x in zip(err_idx, e):
                alpha[j] = x // 2
            basis.add(tuple(alpha))
    return sorted(basis, key=glex_key)


def compile_to_sdp(prob: SosProblem) -> SdpProblem:
    """Gram parameterization: one PSD block per SOS decision and per constraint, equalities per monomial."""
    blocks: List[Block] = []
    gram_slot: Dict[Key, Tuple[int, int, int]] = {}
    free_index: Dict[Key, int] = {}
    free_labels: List[Key] = []
    for d in prob.decisions:
        if d.sos:
            k = len(blocks)
            blocks.append(Block(d.name, len(d.basis), "psd", tuple(d.basis), d.vars))
            for key in d.keys():
                gram_slot[key] = (k, key[1], key[2])
        else:
            for key in d.keys():
                free_index[key] = len(free_labels)
                free_labels.append(key)

    rows: List[Dict] = []
    row_labels: List[str] = []
    infeasible: List[str] = []
    for constraint in prob.constraints:
        poly = constraint.poly
        unknown = [key for key in poly.keys() if key not in gram_slot and key not in free_index]
        if unknown:
            raise SosError(f"Constraint {constraint.name} uses undeclared decisions {unknown[:3]}")
        support = poly.support()
        basis = gram_basis(support, prob.indeterminates, prob.error_symbols)
        k_own = None
        if basis:
            k_own = len(blocks)
            blocks.append(Block(f"gram:{constraint.name}", len(basis), "psd", tuple(basis), prob.indeterminates))
        products: Dict[MultiIndex, List[Tuple[int, int]]] = {}
        for a, za in enumerate(basis):
            for b, zb in enumerate(basis):
                products.setdefault(tuple(x + y for x, y in zip(za, zb)), []).append((a, b))
        monomials = sorted(set(support) | set(products), key=glex_key)
        for alpha in monomials:
            row = {"blocks": {}, "free": {}, "rhs": -poly.part(None).coefficient(alpha)}
            for key in poly.keys():
                coeff = poly.parts[key].coefficient(alpha)
                if coeff == 0.0:
                    continue
                if key in gram_slot:
                    k, a, b = gram_slot[key]
                    entries = row["blocks"].setdefault(k, {})
                    if a == b:
                        entries[(a, a)] = entries.get((a, a), 0.0) + coeff
                    else:
                        entries[(a, b)] = entries.get((a, b), 0.0) + 0.5 * coeff
                        entries[(b, a)] = entries.get((b, a), 0.0) + 0.5 * coeff
                else:
                    j = free_index[key]
                    row["free"][j] = row["free"].get(j, 0.0) + coeff
            for a, b in products.get(alpha, []):
                entries = row["blocks"].setdefault(k_own, {})
                entries[(a, b)] = entries.get((a, b), 0.0) - 1.0
            label = f"{constraint.name}:{_monomial_label(prob.indeterminates, alpha)}"
            scale = max(
                [abs(v) for entries in row["blocks"].values() for v in entries.values()]
                + [abs(v) for v in row["free"].values()],
                default=0.0,
            )
            if scale == 0.0:
                if abs(row["rhs"]) > 1e-12:
                    infeasible.append(label)
                continue
            for entries in row["blocks"].values():
                for idx in entries:
                    entries[idx] /= scale
            for j in row["free"]:
                row["free"][j] /= scale
            row["rhs"] /= scale
            rows.append(row)
            row_labels.append(label)

    m = len(rows)
    A_mats = []
    for k, block in enumerate(blocks):
        data, ri, ci = [], [], []
        for i, row in enumerate(rows):
            for (a, b), v in row["blocks"].get(k, {}).items():
                data.append(v)
                ri.append(i)
                ci.append(a * block.size + b)
        A_mats.append(sparse.csr_matrix((data, (ri, ci)), shape=(m, block.size * block.size)))
    data, ri, ci = [], [], []
    for i, row in enumerate(rows):
        for j, v in row["free"].items():
            data.append(v)
            ri.append(i)
            ci.append(j)
    F = sparse.csr_matrix((data, (ri, ci)), shape=(m, len(free_labels)))
    b = np.array([row["rhs"] for row in rows])
    C = [np.zeros((block.size, block.size)) for block in blocks]
    c = np.zeros(len(free_labels))
    if prob.objective is not None:
        key, sign = prob.objective
        if key not in free_index:
            raise SosError(f"Objective {format_key(key)} is not a free decision")
        c[free_index[key]] = sign

    sdp = SdpProblem(
        blocks=blocks,
        A=A_mats,
        F=F,
        b=b,
        C=C,
        c=c,
        free_labels=free_labels,
        row_labels=row_labels,
        infeasible_rows=infeasible,
    )
    logger.info(
        f"Compiled SDP: {len(blocks)} blocks (total Gram dimension {sdp.total_gram_dim}), "
        f"{len(free_labels)} free variables, {m} equalities"
        + (f", {len(infeasible)} infeasible coefficient equations" if infeasible else "")
    )
    return sdp


def _monomial_label(variables: Sequence[str], alpha: MultiIndex) -> str:
    parts = [f"{v}^{e}" if e > 1 else v for v, e in zip(variables, alpha) if e]
    return "*".join(parts) or "1"


def decision_values(prob: SosProblem, sdp: SdpProblem, blocks: Sequence[np.ndarray], free: np.ndarray) -> Dict[Key, float]:
    """Map a solution back to decision keys."""
    values: Dict[Key, float] = {}
    for key, x in zip(sdp.free_labels, free):
        values[key] = float(x)
    by_name = {block.name: k for k, block in enumerate(sdp.blocks)}
    for d in prob.decisions:
        if d.sos:
            G = blocks[by_name[d.name]]
            for key in d.keys():
                values[key] = float(G[key[1], key[2]])
    return values
