"""
Polynomial surrogates of system dynamics with certified error data.

Taylor surrogates expand f and h at the origin and bound every remainder
monomial over the region; Bernstein surrogates sample the dynamics on the
canonical box [-1/2, 1/2]^d and bound the approximation error either through a
Lipschitz constant or an inflated dense-grid maximum.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import gammaln

from app.config import settings
from app.services.exprlang import (
    Const,
    Expr,
    ModelError,
    Var,
    add,
    diff_expr,
    div,
    eval_point,
    evaluate,
    free_vars,
    from_polynomial,
    mul,
    sub,
    substitute_expr,
    to_polynomial,
)
from app.services.interval import (
    Interval,
    IntervalError,
    bound_sup_abs,
    check_differentiable,
    grid_sup_bound,
    lipschitz_bound,
)
from app.services.polycore import AffineMap, MultiIndex, Polynomial, monomial_basis
from app.services.system import SystemModel

logger = logging.getLogger(__name__)

REMAINDER_MODES = ("per-beta", "uniform")
ERROR_MODES = ("lipschitz", "empirical")
CONVENTIONS = ("canonical", "unit")


class ApproximationError(ValueError):
    """Surrogate construction failed (bad order/degree, unbounded or non-box region)."""


def multi_factorial(alpha: MultiIndex) -> int:
    return math.prod(math.factorial(a) for a in alpha)


def exact_monomials(variables: Sequence[str], degree: int) -> List[MultiIndex]:
    """Multi-indices of total degree exactly `degree`, graded-lex order."""
    return [alpha for alpha in monomial_basis(variables, degree) if sum(alpha) == degree]


# ============ Surrogate types ============

@dataclass(frozen=True)
class TaylorSurrogate:
    """Truncated Taylor series of f and h plus remainder bounds per monomial x^beta, |beta| = k.

    `order` is None for exact polynomial dynamics (no remainder terms).
    """

    states: Tuple[str, ...]
    inputs: Tuple[str, ...]
    order: Optional[int]
    f_polys: Tuple[Polynomial, ...]
    h_polys: Tuple[Polynomial, ...]
    f_remainders: Tuple[Dict[MultiIndex, float], ...] = ()
    h_remainders: Tuple[Dict[MultiIndex, float], ...] = ()
    mode: str = "per-beta"

    @property
    def variables(self) -> Tuple[str, ...]:
        return self.states + self.inputs

    @property
    def remainder_monomials(self) -> List[MultiIndex]:
        if self.order is None:
            return []
        return exact_monomials(self.variables, self.order)

    @property
    def bounded(self) -> bool:
        return self.order is None or (
            len(self.f_remainders) == len(self.f_polys) and len(self.h_remainders) == len(self.h_polys)
        )

    def nonzero_remainders(self, component: str, index: int) -> List[Tuple[MultiIndex, float]]:
        table = (self.f_remainders if component == "f" else self.h_remainders)
        if index >= len(table):
            return []
        return [(beta, bound) for beta, bound in sorted(table[index].items()) if bound > 0.0]


@dataclass(frozen=True)
class BernsteinSurrogate:
    """Bernstein polynomials of the dynamics in canonical coordinates z in [-1/2, 1/2]^d.

    f_polys approximate z_i' = f_i(x(z)) / w_i, h_polys approximate y_j = h_j(x(z)).
    Slopes bound the Lipschitz constant of (g - b) for the anchored error model.
    """

    states: Tuple[str, ...]
    inputs: Tuple[str, ...]
    degrees: Tuple[Tuple[int, ...], ...]
    eta: Tuple[Tuple[int, ...], ...]
    f_polys: Tuple[Polynomial, ...]
    h_polys: Tuple[Polynomial, ...]
    coordinate_map: AffineMap
    f_bounds: Tuple[float, ...] = ()
    h_bounds: Tuple[float, ...] = ()
    f_slopes: Tuple[float, ...] = ()
    h_slopes: Tuple[float, ...] = ()
    error_mode: str = "lipschitz"
    convention: str = "canonical"

    @property
    def variables(self) -> Tuple[str, ...]:
        return self.states + self.inputs

    @property
    def anchor(self) -> Tuple[float, ...]:
        """The equilibrium x = 0 in canonical coordinates."""
        return self.coordinate_map.offset

    @property
    def state_scale(self) -> Tuple[float, ...]:
        """Box widths w_i of the states."""
        return tuple(1.0 / s for s in self.coordinate_map.scale[: len(self.states)])

    @property
    def bounded(self) -> bool:
        return len(self.f_bounds) == len(self.f_polys) and len(self.h_bounds) == len(self.h_polys)


@dataclass(frozen=True)
class ApproxModel:
    kind: str
    surrogate: Union[TaylorSurrogate, BernsteinSurrogate]
    model: SystemModel
    meta: Dict = field(default_factory=dict)


# ============ Exact polynomial detection ============

def detect_polynomial(model: SystemModel) -> Optional[ApproxModel]:
    """Exact surrogate when every component of f and h is polynomial."""
    parts = model.polynomial_parts()
    if parts is None:
        return None
    f_polys, h_polys = parts
    surrogate = TaylorSurrogate(
        states=model.states,
        inputs=model.inputs,
        order=None,
        f_polys=tuple(f_polys),
        h_polys=tuple(h_polys),
        mode="exact",
    )
    logger.info(f"System '{model.name}' is polynomial; using it without approximation error")
    return ApproxModel("exact-polynomial", surrogate, model)


# ============ Taylor ============

class _DerivativeTable:
    """Cache of D^alpha e keyed by multi-index, built one partial at a time."""

    def __init__(self, expr: Expr, variables: Sequence[str]):
        self.variables = tuple(variables)
        self.cache: Dict[MultiIndex, Expr] = {(0,) * len(self.variables): expr}

    def get(self, alpha: MultiIndex) -> Expr:
        alpha = tuple(alpha)
        if alpha not in self.cache:
            j = next(k for k, a in enumerate(alpha) if a > 0)
            parent = alpha[:j] + (alpha[j] - 1,) + alpha[j + 1:]
            self.cache[alpha] = diff_expr(self.get(parent), self.variables[j])
        return self.cache[alpha]


def _check_order(order: int) -> None:
    if not isinstance(order, int) or order < 1:
        raise ApproximationError(f"Taylor order must be a positive integer, got {order}")


def _region_box(model: SystemModel) -> Dict[str, Interval]:
    return model.region.bounding_box()


def taylor_expand(model: SystemModel, order: int) -> TaylorSurrogate:
    """Truncated Taylor series of degree order-1 at the origin; remainder bounds left unset."""
    _check_order(order)
    variables = model.variables
    box = _region_box(model)
    origin = {v: 0.0 for v in variables}
    lower = monomial_basis(variables, order - 1)

    def expand(expr: Expr) -> Polynomial:
        if set(free_vars(expr)) <= set(box):
            check_differentiable(expr, box)
        table = _DerivativeTable(expr, variables)
        terms = {}
        for alpha in lower:
            value = eval_point(table.get(alpha), origin)
            if value != 0.0:
                terms[alpha] = value / multi_factorial(alpha)
        return Polynomial(variables, terms)

    f_polys = tuple(expand(e) for e in model.f)
    h_polys = tuple(expand(e) for e in model.h)
    logger.info(f"Taylor expansion of order {order} for '{model.name}' ({len(lower)} monomials per component)")
    return TaylorSurrogate(model.states, model.inputs, order, f_polys, h_polys)


def taylor_remainder_bounds(
    model: SystemModel,
    order: int,
    mode: str = "per-beta",
    subdivisions: Optional[int] = None,
) -> Tuple[Tuple[Dict[MultiIndex, float], ...], Tuple[Dict[MultiIndex, float], ...]]:
    """Bounds r_beta >= sup |D^beta f| / beta! over the region for every |beta| = order.

    The uniform mode replaces every derivative sup by the largest one of order k.
    """
    _check_order(order)
    if mode not in REMAINDER_MODES:
        raise ApproximationError(f"Unknown remainder mode '{mode}'")
    if subdivisions is None:
        subdivisions = settings.remainder_subdivisions
    variables = model.variables
    box = _region_box(model)
    betas = exact_monomials(variables, order)

    def bounds_for(expr: Expr) -> Dict[MultiIndex, float]:
        table = _DerivativeTable(expr, variables)
        sups: Dict[MultiIndex, float] = {}
        for beta in betas:
            derivative = table.get(beta)
            if isinstance(derivative, Const) and derivative.value == 0.0:
                sups[beta] = 0.0
                continue
            missing = sorted(free_vars(derivative) - set(box))
            if missing:
                raise ApproximationError(
                    f"Remainder D^{beta} of {expr} depends on unbounded variable(s) {', '.join(missing)}"
                )
            try:
                sups[beta] = bound_sup_abs(derivative, box, subdivisions)
            except IntervalError as e:
                raise ApproximationError(f"Cannot bound D^{beta} of {expr}: {e}")
        if mode == "uniform":
            top = max(sups.values(), default=0.0)
            return {beta: top / multi_factorial(beta) for beta in betas}
        return {beta: sups[beta] / multi_factorial(beta) for beta in betas}

    f_bounds = tuple(bounds_for(e) for e in model.f)
    h_bounds = tuple(bounds_for(e) for e in model.h)
    nonzero = sum(1 for table in f_bounds + h_bounds for v in table.values() if v > 0)
    logger.info(f"Taylor remainder bounds ({mode}): {nonzero} nonzero of {len(betas) * (model.n + model.p)}")
    return f_bounds, h_bounds


def build_taylor(model: SystemModel, order: int, mode: str = "per-beta") -> ApproxModel:
    surrogate = taylor_expand(model, order)
    f_bounds, h_bounds = taylor_remainder_bounds(model, order, mode)
    surrogate = replace(surrogate, f_remainders=f_bounds, h_remainders=h_bounds, mode=mode)
    return ApproxModel("taylor", surrogate, model, {"order": order, "mode": mode})


# ============ Bernstein ============

def binomial(n: int, k: int) -> float:
    if n <= 50:
        return float(math.comb(n, k))
    return float(np.exp(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)))


def bernstein_basis_matrix(degree: int) -> np.ndarray:
    """Row k: ascending power coefficients of C(mu,k) (z + 1/2)^k (1/2 - z)^(mu - k)."""
    matrix = np.zeros((degree + 1, degree + 1))
    for k in range(degree + 1):
        row = npoly.polymul(npoly.polypow([0.5, 1.0], k), npoly.polypow([0.5, -1.0], degree - k))
        matrix[k, : len(row)] = binomial(degree, k) * row
    return matrix


def _canonical_box(names: Sequence[str]) -> Dict[str, Interval]:
    return {name: Interval(-0.5, 0.5) for name in names}


def _degree_table(degrees, count: int, nvars: int, label: str) -> Tuple[Tuple[int, ...], ...]:
    if isinstance(degrees, (int, np.integer)):
        table = [(int(degrees),) * nvars for _ in range(count)]
    else:
        degrees = list(degrees)
        if degrees and all(isinstance(d, (int, np.integer)) for d in degrees):
            if len(degrees) != nvars:
                raise ApproximationError(f"{label} degrees need {nvars} entries, got {len(degrees)}")
            table = [tuple(int(d) for d in degrees) for _ in range(count)]
        else:
            if len(degrees) != count:
                raise ApproximationError(f"{label} degrees need {count} rows, got {len(degrees)}")
            table = [tuple(int(d) for d in row) for row in degrees]
            if any(len(row) != nvars for row in table):
                raise ApproximationError(f"Every {label} degree row needs {nvars} entries")
    for row in table:
        if any(d < 1 for d in row):
            raise ApproximationError(f"{label} degrees must be >= 1, got {row}")
    return tuple(table)


def bernstein_approximate(
    expr: Expr,
    variables: Sequence[str],
    box: Dict[str, Interval],
    degrees,
    convention: str = "canonical",
) -> Polynomial:
    """Tensor Bernstein polynomial of `expr` over a box.

    canonical: result in z = (x - c) / w on [-1/2, 1/2]; unit: in t = (x - lo) / w on [0, 1].
    Only variables `expr` depends on are sampled.
    """
    variables = tuple(variables)
    if convention not in CONVENTIONS:
        raise ApproximationError(f"Unknown Bernstein convention '{convention}'")
    if isinstance(degrees, (int, np.integer)):
        degree_of = {v: int(degrees) for v in variables}
    else:
        degree_of = dict(zip(variables, [int(d) for d in degrees]))
    active = [v for v in variables if v in free_vars(expr)]
    missing = [v for v in active if v not in box]
    if missing:
        raise ApproximationError(f"Bernstein sampling needs bounds for {', '.join(missing)}")
    for v in active:
        if degree_of.get(v, 0) < 1:
            raise ApproximationError(f"Bernstein degree for '{v}' must be >= 1")

    scaled = _to_canonical_expr(expr, {v: box[v] for v in active})
    if not active:
        value = eval_point(scaled, {})
        result = Polynomial.constant(variables, value)
    else:
        axes = [np.arange(degree_of[v] + 1) / degree_of[v] - 0.5 for v in active]
        mesh = np.meshgrid(*axes, indexing="ij")
        env = {v: grid.ravel() for v, grid in zip(active, mesh)}
        with np.errstate(all="ignore"):
            samples = np.broadcast_to(evaluate(scaled, env), mesh[0].size).reshape(mesh[0].shape)
        if not np.all(np.isfinite(samples)):
            raise ApproximationError(f"{expr} is undefined at some Bernstein node")
        coeffs = samples
        for v in active:
            coeffs = np.tensordot(coeffs, bernstein_basis_matrix(degree_of[v]), axes=([0], [0]))
        positions = [variables.index(v) for v in active]
        terms = {}
        for index in np.ndindex(*coeffs.shape):
            alpha = [0] * len(variables)
            for pos, e in zip(positions, index):
                alpha[pos] = e
            terms[tuple(alpha)] = coeffs[index]
        result = Polynomial(variables, terms)
    if convention == "unit":
        shift = AffineMap(variables, (1.0,) * len(variables), (-0.5,) * len(variables))
        result = result.compose_affine(shift)
    return result


def _to_canonical_expr(expr: Expr, box: Dict[str, Interval]) -> Expr:
    """expr(x(z)) with x = c + w z for every variable in `box`."""
    mapping = {}
    for name, iv in box.items():
        mapping[name] = add(Const(iv.mid), mul(Const(iv.width), Var(name)))
    return substitute_expr(expr, mapping)


def canonical_components(model: SystemModel) -> Tuple[List[Expr], List[Expr]]:
    """Dynamics in canonical coordinates: z_i' = f_i(x(z)) / w_i and y_j = h_j(x(z))."""
    if not model.region.is_box():
        raise ApproximationError("Bernstein surrogates need a box region over all states and inputs")
    box = model.region.box
    f_exprs = [div(_to_canonical_expr(e, box), Const(box[s].width)) for e, s in zip(model.f, model.states)]
    h_exprs = [_to_canonical_expr(e, box) for e in model.h]
    return f_exprs, h_exprs


def bernstein_expand(
    model: SystemModel,
    degrees,
    eta=None,
    convention: str = "canonical",
) -> BernsteinSurrogate:
    """Bernstein surrogate of the canonical dynamics; error bounds left unset."""
    variables = model.variables
    mu = _degree_table(degrees, model.n, len(variables), "Bernstein")
    eta_table = _degree_table(degrees if eta is None else eta, model.p, len(variables), "Output Bernstein")
    f_exprs, h_exprs = canonical_components(model)
    unit = _canonical_box(variables)
    f_polys = tuple(bernstein_approximate(e, variables, unit, row, "canonical") for e, row in zip(f_exprs, mu))
    h_polys = tuple(bernstein_approximate(e, variables, unit, row, "canonical") for e, row in zip(h_exprs, eta_table))
    if convention == "unit":
        shift = AffineMap(variables, (1.0,) * len(variables), (-0.5,) * len(variables))
        f_polys = tuple(p.compose_affine(shift) for p in f_polys)
        h_polys = tuple(p.compose_affine(shift) for p in h_polys)
    elif convention != "canonical":
        raise ApproximationError(f"Unknown Bernstein convention '{convention}'")
    logger.info(f"Bernstein expansion for '{model.name}' with degrees {mu[0] if mu else ()}")
    return BernsteinSurrogate(
        states=model.states,
        inputs=model.inputs,
        degrees=mu,
        eta=eta_table,
        f_polys=f_polys,
        h_polys=h_polys,
        coordinate_map=model.region.canonical_map(),
        convention=convention,
    )


def _is_affine(expr: Expr, variables: Sequence[str]) -> bool:
    poly = to_polynomial(expr, variables)
    return poly is not None and poly.degree <= 1


def _component_error(
    expr: Expr,
    poly: Polynomial,
    degrees: Sequence[int],
    variables: Sequence[str],
    mode: str,
) -> float:
    if _is_affine(expr, variables):
        return 0.0
    active = [v for v in variables if v in free_vars(expr)]
    box = _canonical_box(active)
    if mode == "lipschitz":
        lip = lipschitz_bound(expr, box, active)
        degree_of = dict(zip(variables, degrees))
        return 0.5 * lip * math.sqrt(sum(1.0 / degree_of[v] for v in active))
    count = settings.empirical_grid
    if count ** len(active) > settings.max_cells:
        count = max(2, int(math.floor(settings.max_cells ** (1.0 / len(active)))))
    axes = [np.linspace(-0.5, 0.5, count) for _ in active]
    mesh = np.meshgrid(*axes, indexing="ij")
    env = {v: grid.ravel() for v, grid in zip(active, mesh)}
    points = np.zeros((mesh[0].size, len(variables)))
    for v, grid in zip(active, mesh):
        points[:, list(variables).index(v)] = grid.ravel()
    with np.errstate(all="ignore"):
        exact = np.broadcast_to(evaluate(expr, env), mesh[0].size)
    gap = float(np.max(np.abs(exact - poly.evaluate_many(points))))
    return settings.empirical_safety * gap


def bernstein_error_bound(
    model: SystemModel,
    surrogate: BernsteinSurrogate,
    mode: str = "lipschitz",
) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-component bounds on |g - b| over the canonical box."""
    if mode not in ERROR_MODES:
        raise ApproximationError(f"Unknown Bernstein error mode '{mode}'")
    if surrogate.convention != "canonical":
        raise ApproximationError("Error bounds are computed for canonical-convention surrogates")
    variables = model.variables
    f_exprs, h_exprs = canonical_components(model)
    try:
        f_bounds = tuple(
            _component_error(e, b, row, variables, mode)
            for e, b, row in zip(f_exprs, surrogate.f_polys, surrogate.degrees)
        )
        h_bounds = tuple(
            _component_error(e, b, row, variables, mode)
            for e, b, row in zip(h_exprs, surrogate.h_polys, surrogate.eta)
        )
    except (IntervalError, ModelError) as e:
        raise ApproximationError(f"Cannot bound the Bernstein error: {e}")
    logger.info(f"Bernstein error bounds ({mode}): f={[round(b, 6) for b in f_bounds]}, h={[round(b, 6) for b in h_bounds]}")
    return f_bounds, h_bounds


def anchored_polynomial(poly: Polynomial, anchor: Sequence[float]) -> Polynomial:
    """b - b(anchor): the surrogate shifted to vanish at the equilibrium."""
    return poly - poly.evaluate(anchor)


def bernstein_slope_bounds(
    model: SystemModel,
    surrogate: BernsteinSurrogate,
) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Lipschitz bounds of g - b on the canonical box, so |g - b~| <= L |z - z0|."""
    variables = model.variables
    f_exprs, h_exprs = canonical_components(model)

    def slope(expr: Expr, poly: Polynomial) -> float:
        if _is_affine(expr, variables):
            return 0.0
        gap = sub(expr, from_polynomial(poly))
        active = [v for v in variables if v in free_vars(gap)]
        box = _canonical_box(active)
        total = 0.0
        for v in active:
            partial = diff_expr(gap, v)
            total += grid_sup_bound(partial, box, settings.empirical_grid) ** 2
        return math.sqrt(total)

    try:
        f_slopes = tuple(slope(e, b) for e, b in zip(f_exprs, surrogate.f_polys))
        h_slopes = tuple(slope(e, b) for e, b in zip(h_exprs, surrogate.h_polys))
    except (IntervalError, ModelError) as e:
        raise ApproximationError(f"Cannot bound the Bernstein slope: {e}")
    logger.info(f"Bernstein slope bounds: f={[round(s, 6) for s in f_slopes]}, h={[round(s, 6) for s in h_slopes]}")
    return f_slopes, h_slopes


def build_bernstein(
    model: SystemModel,
    degrees,
    eta=None,
    mode: str = "lipschitz",
    with_slopes: bool = True,
) -> ApproxModel:
    surrogate = bernstein_expand(model, degrees, eta)
    f_bounds, h_bounds = bernstein_error_bound(model, surrogate, mode)
    surrogate = replace(surrogate, f_bounds=f_bounds, h_bounds=h_bounds, error_mode=mode)
    if with_slopes:
        f_slopes, h_slopes = bernstein_slope_bounds(model, surrogate)
        surrogate = replace(surrogate, f_slopes=f_slopes, h_slopes=h_slopes)
    return ApproxModel("bernstein", surrogate, model, {"degrees": surrogate.degrees[0] if surrogate.degrees else (), "mode": mode})
