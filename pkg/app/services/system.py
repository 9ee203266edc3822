"""
System documents: parsing and validation of dynamics, outputs and regions.

Document grammar:

    states x1, x2;
    inputs u1;
    x1' = x2;
    x2' = -x1 + u1;
    y1 = x2;
    region x1 in [-1, 1];
    region ineq x1^2 + x2^2 - 1 <= 0;
    option mode = passivity;
"""
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.services.exprlang import (
    Const,
    Expr,
    ExprParser,
    ModelError,
    eval_point,
    evaluate,
    free_vars,
    substitute_expr,
    to_polynomial,
    tokenize,
)
from app.services.interval import Interval
from app.services.polycore import AffineMap, Polynomial

logger = logging.getLogger(__name__)

EQUILIBRIUM_TOL = 1e-9
_OUTPUT_RE = re.compile(r"y(\d+)$")


@dataclass(frozen=True)
class Region:
    """Operating region: per-variable intervals plus polynomial inequalities g <= 0."""

    variables: Tuple[str, ...]
    box: Mapping[str, Interval] = field(default_factory=dict)
    extra_ineqs: Tuple[Polynomial, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "box", dict(self.box))
        object.__setattr__(self, "extra_ineqs", tuple(g.with_vars(self.variables) for g in self.extra_ineqs))
        for name in self.box:
            if name not in self.variables:
                raise ModelError(f"Region bounds undeclared variable '{name}'")

    def is_box(self) -> bool:
        return not self.extra_ineqs and all(v in self.box for v in self.variables)

    def interval(self, name: str) -> Optional[Interval]:
        return self.bounding_box().get(name)

    def bounding_box(self) -> Dict[str, Interval]:
        """Declared intervals, plus intervals implied by inequalities of the form sum a_j v_j^2 - c <= 0."""
        bounds = dict(self.box)
        for g in self.extra_ineqs:
            implied = _implied_bounds(g)
            for name, radius in implied.items():
                derived = Interval(-radius, radius)
                if name in bounds:
                    current = bounds[name]
                    derived = Interval(max(current.lo, derived.lo), min(current.hi, derived.hi))
                bounds[name] = derived
        return {name: bounds[name] for name in self.variables if name in bounds}

    def unbounded(self, names: Optional[Sequence[str]] = None) -> List[str]:
        known = self.bounding_box()
        return [v for v in (self.variables if names is None else names) if v not in known]

    def radius(self, names: Optional[Sequence[str]] = None) -> float:
        """Largest |v| over the bounding box (inf when some variable is unbounded)."""
        known = self.bounding_box()
        result = 0.0
        for name in self.variables if names is None else names:
            if name not in known:
                return math.inf
            result = max(result, known[name].mag)
        return result

    def constraint_polys(self, names: Optional[Sequence[str]] = None) -> List[Tuple[str, Polynomial]]:
        """S-procedure constraints g <= 0 whose variables all lie in `names`."""
        allowed = set(self.variables if names is None else names)
        out: List[Tuple[str, Polynomial]] = []
        for name in self.variables:
            if name in self.box and name in allowed:
                iv = self.box[name]
                x = Polynomial.variable(self.variables, name)
                out.append((f"box_{name}", (x - iv.lo) * (x - iv.hi)))
        for k, g in enumerate(self.extra_ineqs):
            if set(g.free_variables()) <= allowed:
                out.append((f"ineq{k + 1}", g))
        return out

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Boolean mask of the rows of an (N, len(variables)) array lying in the region."""
        points = np.atleast_2d(points)
        mask = np.ones(points.shape[0], dtype=bool)
        for j, name in enumerate(self.variables):
            if name in self.box:
                iv = self.box[name]
                mask &= (points[:, j] >= iv.lo - tol) & (points[:, j] <= iv.hi + tol)
        for g in self.extra_ineqs:
            mask &= g.evaluate_many(points) <= tol
        return mask

    def canonical_map(self) -> AffineMap:
        if not self.is_box():
            raise ModelError("Canonical scaling needs a box region")
        return AffineMap.to_canonical(self.variables, [(self.box[v].lo, self.box[v].hi) for v in self.variables])

    def with_radius(self, states: Sequence[str], radius: float) -> "Region":
        """Replace the state bounds by the ball sum x_i^2 <= radius^2, keeping input bounds."""
        if radius <= 0:
            raise ModelError(f"Radius must be positive, got {radius}")
        states = set(states)
        box = {k: v for k, v in self.box.items() if k not in states}
        kept = [g for g in self.extra_ineqs if not (set(g.free_variables()) & states)]
        ball = Polynomial.constant(self.variables, -radius ** 2)
        for name in self.variables:
            if name in states:
                ball = ball + Polynomial.variable(self.variables, name) ** 2
        return Region(self.variables, box, tuple(kept) + (ball,))

    def restricted(self, names: Sequence[str]) -> "Region":
        """Region over a subset of variables; constraints on other variables are dropped."""
        names = tuple(names)
        keep = set(names)
        box = {k: v for k, v in self.box.items() if k in keep}
        ineqs = tuple(g.with_vars(names) for g in self.extra_ineqs if set(g.free_variables()) <= keep)
        return Region(names, box, ineqs)

    def describe(self) -> Dict:
        return {
            "box": {k: [v.lo, v.hi] for k, v in self.box.items()},
            "ineqs": [g.to_string() for g in self.extra_ineqs],
        }


def _implied_bounds(g: Polynomial) -> Dict[str, float]:
    """For g = sum a_j v_j^2 - c with a_j > 0, c > 0: |v_j| <= sqrt(c / a_j)."""
    constant = -g.constant_term()
    if constant <= 0:
        return {}
    squares: Dict[str, float] = {}
    for alpha, coeff in g.terms.items():
        if sum(alpha) == 0:
            continue
        if sum(alpha) != 2 or max(alpha) != 2 or coeff <= 0:
            return {}
        squares[g.vars[alpha.index(2)]] = coeff
    return {name: math.sqrt(constant / a) for name, a in squares.items()}


@dataclass(frozen=True)
class SystemModel:
    """Input-output dynamics x' = f(x, u), y = h(x, u) with an operating region."""

    states: Tuple[str, ...]
    inputs: Tuple[str, ...]
    f: Tuple[Expr, ...]
    h: Tuple[Expr, ...]
    region: Region
    options: Tuple[Tuple[str, str], ...] = ()
    name: str = "system"

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def m(self) -> int:
        return len(self.inputs)

    @property
    def p(self) -> int:
        return len(self.h)

    @property
    def variables(self) -> Tuple[str, ...]:
        return self.states + self.inputs

    @property
    def outputs(self) -> Tuple[str, ...]:
        return tuple(f"y{j + 1}" for j in range(self.p))

    @property
    def options_dict(self) -> Dict[str, str]:
        return dict(self.options)

    def with_region(self, region: Region) -> "SystemModel":
        return replace(self, region=region)

    def with_radius(self, radius: float) -> "SystemModel":
        return replace(self, region=self.region.with_radius(self.states, radius))

    def without_inputs(self) -> "SystemModel":
        """Dynamics with every input fixed to zero."""
        if not self.inputs:
            return self
        zero = {u: Const(0.0) for u in self.inputs}
        return SystemModel(
            states=self.states,
            inputs=(),
            f=tuple(substitute_expr(e, zero) for e in self.f),
            h=tuple(substitute_expr(e, zero) for e in self.h),
            region=self.region.restricted(self.states),
            options=self.options,
            name=self.name,
        )

    def polynomial_parts(self) -> Optional[Tuple[List[Polynomial], List[Polynomial]]]:
        """Exact polynomial forms of f and h, or None if any component is not polynomial."""
        f_polys = [to_polynomial(e, self.variables) for e in self.f]
        h_polys = [to_polynomial(e, self.variables) for e in self.h]
        if any(p is None for p in f_polys + h_polys):
            return None
        return f_polys, h_polys

    def evaluate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """f and h at the rows of an (N, n + m) array, as (N, n) and (N, p) arrays."""
        points = np.atleast_2d(points)
        env = {name: points[:, j] for j, name in enumerate(self.variables)}
        count = points.shape[0]
        with np.errstate(all="ignore"):
            f_vals = [np.broadcast_to(evaluate(e, env), (count,)) for e in self.f]
            h_vals = [np.broadcast_to(evaluate(e, env), (count,)) for e in self.h]
        f_arr = np.stack(f_vals, axis=1) if f_vals else np.zeros((count, 0))
        h_arr = np.stack(h_vals, axis=1) if h_vals else np.zeros((count, 0))
        return f_arr, h_arr

    def describe(self) -> Dict:
        return {
            "name": self.name,
            "states": list(self.states),
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "f": [str(e) for e in self.f],
            "h": [str(e) for e in self.h],
            "region": self.region.describe(),
        }


def validate_model(model: SystemModel) -> SystemModel:
    """Check declared names, the equilibrium at the origin and the region invariants."""
    declared = set(model.variables)
    if len(declared) != len(model.variables):
        raise ModelError("State and input names must be distinct")
    if len(model.f) != model.n:
        raise ModelError(f"Dimension mismatch: {model.n} states but {len(model.f)} state equations")
    for e in model.f + model.h:
        unknown = sorted(free_vars(e) - declared)
        if unknown:
            raise ModelError(f"Undeclared variable(s) {', '.join(unknown)} in {e}")
    origin = {v: 0.0 for v in model.variables}
    for label, exprs in (("x'", model.f), ("y", model.h)):
        for k, e in enumerate(exprs):
            value = eval_point(e, origin)
            if abs(value) > EQUILIBRIUM_TOL:
                raise ModelError(
                    f"The origin is not an equilibrium: {label}{k + 1}(0, 0) = {value:g}"
                )
    for name, iv in model.region.box.items():
        if not (iv.lo < 0.0 < iv.hi):
            raise ModelError(f"Region interval for '{name}' must contain 0 in its interior, got {iv}")
    for g in model.region.extra_ineqs:
        if g.constant_term() > 0.0:
            raise ModelError(f"Region inequality {g} <= 0 excludes the origin")
    return model


def parse_system(text: str, name: str = "system") -> SystemModel:
    """Parse and validate a system document."""
    parser = _SystemParser(tokenize(text))
    model = parser.parse(name)
    logger.info(
        f"Parsed system '{name}': n={model.n}, m={model.m}, p={model.p}, "
        f"region box={sorted(model.region.box)}, ineqs={len(model.region.extra_ineqs)}"
    )
    return validate_model(model)


class _SystemParser(ExprParser):
    def parse(self, name: str) -> SystemModel:
        self.expect("states")
        states = self._name_list()
        self.expect("inputs")
        inputs = self._name_list()
        variables = states + inputs
        if len(set(variables)) != len(variables):
            raise ModelError("State and input names must be distinct")
        self.variables = set(variables)

        equations: Dict[str, Expr] = {}
        outputs: Dict[int, Expr] = {}
        box: Dict[str, Interval] = {}
        ineqs: List[Polynomial] = []
        options: List[Tuple[str, str]] = []

        while self.current.kind != "eof":
            token = self.current
            if token.kind == "name" and token.text == "region":
                self.advance()
                self._region(variables, box, ineqs)
            elif token.kind == "name" and token.text == "option":
                self.advance()
                options.append(self._option())
            elif token.kind == "name" and self.peek().text == "'":
                self.advance()
                self.advance()
                self.expect("=")
                if token.text not in states:
                    raise ModelError(f"Equation for undeclared state '{token.text}'", token.line, token.column)
                if token.text in equations:
                    raise ModelError(f"Duplicate equation for '{token.text}'", token.line, token.column)
                equations[token.text] = self.parse_expression()
                self.expect(";")
            elif token.kind == "name" and self.peek().text == "=" and _OUTPUT_RE.match(token.text):
                self.advance()
                self.advance()
                index = int(_OUTPUT_RE.match(token.text).group(1))
                if index < 1 or index in outputs:
                    raise ModelError(f"Invalid or duplicate output '{token.text}'", token.line, token.column)
                outputs[index] = self.parse_expression()
                self.expect(";")
            else:
                raise self.error("Expected an equation, output, region or option statement")

        missing = [s for s in states if s not in equations]
        if missing:
            raise ModelError(f"Dimension mismatch: no equation for state(s) {', '.join(missing)}")
        if sorted(outputs) != list(range(1, len(outputs) + 1)):
            raise ModelError(f"Dimension mismatch: outputs must be y1..y{len(outputs)}, got {sorted(outputs)}")
        return SystemModel(
            states=tuple(states),
            inputs=tuple(inputs),
            f=tuple(equations[s] for s in states),
            h=tuple(outputs[j] for j in sorted(outputs)),
            region=Region(tuple(variables), box, tuple(ineqs)),
            options=tuple(options),
            name=name,
        )

    def _name_list(self) -> List[str]:
        names: List[str] = []
        while not (self.current.kind == "op" and self.current.text == ";"):
            token = self.expect_name()
            if token.text in names:
                raise ModelError(f"Duplicate name '{token.text}'", token.line, token.column)
            names.append(token.text)
            self.accept(",")
        self.expect(";")
        return names

    def _constant(self) -> float:
        token = self.current
        expr = self.parse_expression()
        if free_vars(expr):
            raise ModelError("Interval bounds must be constants", token.line, token.column)
        return eval_point(expr, {})

    def _region(self, variables: List[str], box: Dict[str, Interval], ineqs: List[Polynomial]) -> None:
        token = self.current
        if token.kind == "name" and token.text == "ineq":
            self.advance()
            lhs = self.parse_expression()
            self.expect("<=")
            rhs = self.parse_expression()
            self.expect(";")
            poly = to_polynomial(lhs, variables)
            rhs_poly = to_polynomial(rhs, variables)
            if poly is None or rhs_poly is None:
                raise ModelError("Region inequalities must be polynomial", token.line, token.column)
            ineqs.append(poly - rhs_poly)
            return
        name = self.expect_name()
        if name.text not in variables:
            raise ModelError(f"Region for undeclared variable '{name.text}'", name.line, name.column)
        if name.text in box:
            raise ModelError(f"Duplicate interval for '{name.text}'", name.line, name.column)
        self.expect("in")
        self.expect("[")
        lo = self._constant()
        self.expect(",")
        hi = self._constant()
        self.expect("]")
        self.expect(";")
        if not lo < hi:
            raise ModelError(f"Empty interval [{lo}, {hi}] for '{name.text}'", name.line, name.column)
        box[name.text] = Interval(lo, hi)

    def _option(self) -> Tuple[str, str]:
        key = self.expect_name()
        self.expect("=")
        parts = []
        while not (self.current.kind == "op" and self.current.text == ";"):
            if self.current.kind == "eof":
                raise self.error("Unterminated option")
            parts.append(self.advance().text)
        self.expect(";")
        return key.text, "".join(parts)


def load_system(path) -> SystemModel:
    """Read and parse a .sys file; the file stem names the system."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ModelError(f"Cannot read system file {path}: {e}")
    return parse_system(text, name=path.stem)
