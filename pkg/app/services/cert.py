"""
Certificates: storage / Lyapunov functions with their Gram evidence, and an
independent validator.

Validation never trusts the solver: every SOS constraint is rebuilt from its
Gram matrix and compared coefficient by coefficient, and the dissipation
inequality is sampled with the true nonlinear dynamics over the region.
"""
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.models import (
    SCHEMA_VERSION,
    CertificateDoc,
    GramDoc,
    PolynomialDoc,
    RegionDoc,
    ReportDoc,
    SupplyDoc,
)
from app.services.interval import Interval
from app.services.polycore import AffineMap, MultiIndex, Polynomial
from app.services.sdp import SdpProblem, SdpSolution
from app.services.sos import INDEX_KEY, SosProblem, SupplyRate, decision_values
from app.services.system import Region, SystemModel
from app.utils import halton_points, sha256_hex

logger = logging.getLogger(__name__)

GRAM_TOL = 1e-8
VALID_TOL = 1e-6
MARGINAL_TOL = 1e-4
V0_TOL = 1e-9
RESAMPLE_ROUNDS = 20


class CertificateError(ValueError):
    """Certificate does not match the model, or no index can be read from a solution."""


@dataclass
class GramRecord:
    """An SOS polynomial with its Gram matrix; `poly` is set for program constraints."""

    name: str
    role: str
    vars: Tuple[str, ...]
    basis: Tuple[MultiIndex, ...]
    gram: np.ndarray
    poly: Optional[Polynomial] = None

    def reconstruct(self) -> Polynomial:
        return gram_polynomial(self.vars, self.basis, self.gram)

    def min_eig(self) -> float:
        if self.gram.size == 0:
            return 0.0
        return float(np.min(np.linalg.eigvalsh(0.5 * (self.gram + self.gram.T))))


@dataclass
class ValidationReport:
    gram_min_eigs: Dict[str, float]
    residual: float
    margin: float
    storage_margin: float
    dissipation_margin: float
    v0: float
    samples: int
    verdict: str
    messages: List[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return self.verdict == "valid"


@dataclass
class Certificate:
    """V with the supply it certifies; supply None means a stability (Lyapunov) certificate."""

    kind: str
    states: Tuple[str, ...]
    inputs: Tuple[str, ...]
    V: Polynomial
    region: Region
    supply: Optional[SupplyRate] = None
    index: Optional[float] = None
    index_name: Optional[str] = None
    index_width: Optional[float] = None
    grams: List[GramRecord] = field(default_factory=list)
    approx: Dict = field(default_factory=dict)
    system: str = "system"
    report: Optional[ValidationReport] = None

    @property
    def is_stability(self) -> bool:
        return self.supply is None

    def with_index(self, value: float) -> "Certificate":
        """Same certificate claimed for another index value (grams no longer apply)."""
        if self.index_name is None or self.supply is None:
            raise CertificateError("Certificate has no index")
        supply = replace(self.supply, **{self.index_name: float(value)})
        return replace(self, supply=supply, index=float(value), grams=[], report=None)


@dataclass(frozen=True)
class IndexResult:
    value: float
    width: Optional[float] = None


def gram_polynomial(variables: Sequence[str], basis: Sequence[MultiIndex], gram: np.ndarray) -> Polynomial:
    """z' G z as a Polynomial."""
    acc: Dict[MultiIndex, float] = {}
    size = len(basis)
    for a in range(size):
        for b in range(size):
            v = float(gram[a, b])
            if v == 0.0:
                continue
            alpha = tuple(x + y for x, y in zip(basis[a], basis[b]))
            acc[alpha] = acc.get(alpha, 0.0) + v
    return Polynomial(variables, acc)


def build_certificate(
    prob: SosProblem,
    sdp: SdpProblem,
    solution: SdpSolution,
    kind: str,
    region: Region,
    system: str = "system",
    approx: Optional[Dict] = None,
) -> Certificate:
    """Read decisions from a solved program and pull V back to the original coordinates."""
    values = decision_values(prob, sdp, solution.X, solution.y)
    states = prob.states
    if prob.storage is not None:
        V = prob.storage.evaluate(values)
        if prob.coordinate_map is not None:
            n = len(states)
            cmap = prob.coordinate_map
            V = V.compose_affine(AffineMap(states, cmap.scale[:n], cmap.offset[:n]))
    else:
        V = Polynomial.zero(states)

    block_index = {block.name: k for k, block in enumerate(sdp.blocks)}
    grams: List[GramRecord] = []
    for d in prob.decisions:
        if d.sos:
            grams.append(GramRecord(d.name, "multiplier", d.vars, d.basis, solution.X[block_index[d.name]]))
    for constraint in prob.constraints:
        poly = constraint.poly.evaluate_decisions(values)
        label = f"gram:{constraint.name}"
        if label in block_index:
            k = block_index[label]
            grams.append(GramRecord(constraint.name, "constraint", prob.indeterminates,
                                    sdp.blocks[k].basis, solution.X[k], poly))
        else:
            grams.append(GramRecord(constraint.name, "constraint", prob.indeterminates, (),
                                    np.zeros((0, 0)), poly))

    supply, index, index_name = prob.supply, None, None
    if supply is not None and supply.index is not None:
        index_name = supply.index
        index = float(values[INDEX_KEY])
        supply = supply.with_index(index)
    meta = dict(prob.meta)
    meta.update(approx or {})
    meta.update({"theorem": prob.theorem, "variant": prob.variant, "error_bounds": dict(prob.error_bounds)})
    cert = Certificate(
        kind=kind,
        states=states,
        inputs=prob.inputs if prob.supply is not None else (),
        V=V,
        region=region,
        supply=supply,
        index=index,
        index_name=index_name,
        grams=grams,
        approx=meta,
        system=system,
    )
    logger.info(f"Certificate built: V = {V.to_string()}" + (f", {index_name} = {index:.6g}" if index_name else ""))
    return cert


def _sample(region: Region, variables: Sequence[str], count: int, seed: int) -> np.ndarray:
    """Halton points inside the region; unbounded variables are sampled on +/- unbounded_sample_width."""
    box = region.bounding_box()
    width = settings.unbounded_sample_width
    bounds = [(box[v].lo, box[v].hi) if v in box else (-width, width) for v in variables]
    if not variables:
        return np.zeros((1, 0))
    kept: List[np.ndarray] = []
    total = 0
    for round_ in range(RESAMPLE_ROUNDS):
        points = halton_points(bounds, count, seed + round_, include_corners=round_ == 0)
        inside = points[region.contains(points, tol=1e-12)]
        kept.append(inside)
        total += inside.shape[0]
        if total >= count:
            break
    points = np.vstack(kept)[:count]
    # the equilibrium itself is always checked
    return np.vstack([np.zeros((1, len(variables))), points])


def _check_dimensions(cert: Certificate, model: SystemModel) -> None:
    if tuple(cert.states) != tuple(model.states):
        raise CertificateError(f"Certificate states {cert.states} do not match the model states {model.states}")
    if cert.V.vars != tuple(model.states):
        raise CertificateError(f"V is over {cert.V.vars}, expected {model.states}")
    if cert.supply is not None:
        if cert.supply.m != model.m or cert.supply.p != model.p:
            raise CertificateError(
                f"Supply rate is for m={cert.supply.m}, p={cert.supply.p}; model has m={model.m}, p={model.p}"
            )


def validate(
    cert: Certificate,
    model: SystemModel,
    samples: Optional[int] = None,
    seed: Optional[int] = None,
) -> ValidationReport:
    """Gram re-check plus sampled V >= 0 and V' <= w with the true dynamics."""
    samples = settings.validation_samples if samples is None else samples
    seed = settings.seed if seed is None else seed
    if cert.is_stability and model.m:
        model = model.without_inputs()
    _check_dimensions(cert, model)
    messages: List[str] = []

    eigs: Dict[str, float] = {}
    residual = 0.0
    for record in cert.grams:
        eigs[record.name] = record.min_eig()
        if record.poly is None:
            continue
        diff = record.poly - record.reconstruct()
        scale = max([1.0] + [abs(c) for c in record.poly.terms.values()])
        worst = max((abs(c) for c in diff.terms.values()), default=0.0) / scale
        residual = max(residual, worst)
    grams_ok = all(v >= -GRAM_TOL for v in eigs.values())
    if not grams_ok:
        bad = min(eigs, key=eigs.get)
        messages.append(f"Gram matrix {bad} has eigenvalue {eigs[bad]:.3e}")

    v0 = cert.V.constant_term()
    if abs(v0) > V0_TOL:
        messages.append(f"V(0) = {v0:.3e}")

    region = cert.region if set(cert.region.variables) == set(model.variables) else model.region
    points = _sample(region.restricted(model.variables), model.variables, samples, seed)
    n = model.n
    x = points[:, :n]
    u = points[:, n:]
    f_vals, h_vals = model.evaluate(points)
    V_vals = cert.V.evaluate_many(x)
    Vdot = np.zeros(points.shape[0])
    for i, name in enumerate(model.states):
        Vdot += cert.V.diff(name).evaluate_many(x) * f_vals[:, i]
    if cert.is_stability:
        slack = -Vdot
    else:
        slack = cert.supply.evaluate(u, h_vals) - Vdot
    finite = np.isfinite(slack) & np.isfinite(V_vals)
    if not np.all(finite):
        messages.append(f"{int(np.sum(~finite))} sample points gave non-finite values")
    storage_margin = float(np.min(V_vals[finite])) if np.any(finite) else -np.inf
    dissipation_margin = float(np.min(slack[finite])) if np.any(finite) else -np.inf
    margin = min(storage_margin, dissipation_margin)
    if storage_margin < -VALID_TOL:
        worst = points[int(np.argmin(np.where(finite, V_vals, np.inf)))]
        messages.append(f"V < 0 at {np.round(worst, 6).tolist()}")
    if dissipation_margin < -VALID_TOL:
        worst = points[int(np.argmin(np.where(finite, slack, np.inf)))]
        messages.append(f"Dissipation inequality violated at {np.round(worst, 6).tolist()}")

    if grams_ok and abs(v0) <= V0_TOL and residual <= VALID_TOL and margin >= -VALID_TOL:
        verdict = "valid"
    elif grams_ok and abs(v0) <= V0_TOL and residual < MARGINAL_TOL and margin > -MARGINAL_TOL:
        verdict = "marginal"
    else:
        verdict = "invalid"
    report = ValidationReport(
        gram_min_eigs=eigs,
        residual=residual,
        margin=margin,
        storage_margin=storage_margin,
        dissipation_margin=dissipation_margin,
        v0=v0,
        samples=int(points.shape[0]),
        verdict=verdict,
        messages=messages,
    )
    logger.info(
        f"Validation {verdict}: residual {residual:.2e}, margin {margin:.3e} over {report.samples} samples"
    )
    return report


def extract_index(solution: SdpSolution, prob: SosProblem) -> IndexResult:
    """The optimized index from a solved program."""
    if prob.objective is None:
        raise CertificateError("Program has no index objective")
    if not solution.optimal:
        raise CertificateError(f"Cannot read an index from a {solution.status} solve")
    try:
        position = solution.free_labels.index(INDEX_KEY)
    except ValueError:
        raise CertificateError("Solution carries no index variable")
    return IndexResult(float(solution.y[position]))


def bisect_index(
    feasible: Callable[[float], bool],
    low: Optional[float] = None,
    high: Optional[float] = None,
    tol: Optional[float] = None,
    maximize: bool = True,
) -> IndexResult:
    """Bisection on a monotone feasibility test; returns the final bracket midpoint and width.

    For maximize=True the feasible set is (-inf, index]; otherwise [index, inf).
    """
    low = settings.bisection_low if low is None else low
    high = settings.bisection_high if high is None else high
    tol = settings.bisection_tol if tol is None else tol
    good, bad = (low, high) if maximize else (high, low)
    if not feasible(good):
        raise CertificateError(f"Not feasible even at the bracket end {good}")
    if feasible(bad):
        return IndexResult(bad, 0.0)
    while abs(bad - good) > tol:
        mid = 0.5 * (good + bad)
        if feasible(mid):
            good = mid
        else:
            bad = mid
        logger.debug(f"Bisection bracket [{min(good, bad):.6g}, {max(good, bad):.6g}]")
    return IndexResult(0.5 * (good + bad), abs(bad - good))


# ============ JSON documents ============

def polynomial_doc(poly: Polynomial) -> PolynomialDoc:
    terms = poly.sorted_terms()
    return PolynomialDoc(
        vars=list(poly.vars),
        monomials=[list(alpha) for alpha, _c in terms],
        coeffs=[float(c) for _a, c in terms],
        text=poly.to_string(),
    )


def polynomial_from_doc(doc: PolynomialDoc) -> Polynomial:
    if len(doc.monomials) != len(doc.coeffs):
        raise CertificateError("Polynomial document has mismatched monomials and coefficients")
    return Polynomial(doc.vars, {tuple(alpha): c for alpha, c in zip(doc.monomials, doc.coeffs)})


def _gram_doc(record: GramRecord) -> GramDoc:
    return GramDoc(
        name=record.name,
        role=record.role,
        vars=list(record.vars),
        basis=[list(alpha) for alpha in record.basis],
        gram=record.gram.tolist(),
        poly=None if record.poly is None else polynomial_doc(record.poly),
    )


def _gram_from_doc(doc: GramDoc) -> GramRecord:
    size = len(doc.basis)
    gram = np.array(doc.gram, dtype=float).reshape(size, size)
    poly = None if doc.poly is None else polynomial_from_doc(doc.poly)
    return GramRecord(doc.name, doc.role, tuple(doc.vars), tuple(tuple(a) for a in doc.basis), gram, poly)


def report_doc(report: ValidationReport) -> ReportDoc:
    return ReportDoc(**asdict(report))


def certificate_to_document(cert: Certificate) -> CertificateDoc:
    supply = None
    if cert.supply is not None:
        s = cert.supply
        supply = SupplyDoc(
            kind=s.kind,
            m=s.m,
            p=s.p,
            Q=[list(r) for r in s.Q],
            S=[list(r) for r in s.S],
            R=[list(r) for r in s.R],
            rho=s.rho,
            nu=s.nu,
            gamma2=s.gamma2,
            custom=None if s.custom is None else polynomial_doc(s.custom),
        )
    region = RegionDoc(
        variables=list(cert.region.variables),
        box={k: [v.lo, v.hi] for k, v in cert.region.box.items()},
        ineqs=[polynomial_doc(g) for g in cert.region.extra_ineqs],
    )
    return CertificateDoc(
        kind=cert.kind,
        system=cert.system,
        states=list(cert.states),
        inputs=list(cert.inputs),
        V=polynomial_doc(cert.V),
        supply=supply,
        index=cert.index,
        index_name=cert.index_name,
        index_width=cert.index_width,
        region=region,
        approx=_jsonable(cert.approx),
        multipliers=[_gram_doc(g) for g in cert.grams if g.role == "multiplier"],
        constraints=[_gram_doc(g) for g in cert.grams if g.role == "constraint"],
        report=None if cert.report is None else report_doc(cert.report),
    )


def certificate_digest(cert: Certificate) -> str:
    """sha256 of the canonical certificate document, validation report excluded."""
    return sha256_hex(certificate_to_document(cert).model_dump(exclude={"report"}))


def certificate_from_document(doc: CertificateDoc) -> Certificate:
    if doc.schema_version != SCHEMA_VERSION:
        raise CertificateError(f"Unsupported certificate schema version {doc.schema_version}")
    supply = None
    if doc.supply is not None:
        s = doc.supply
        supply = SupplyRate(
            kind=s.kind,
            m=s.m,
            p=s.p,
            Q=tuple(tuple(r) for r in s.Q),
            S=tuple(tuple(r) for r in s.S),
            R=tuple(tuple(r) for r in s.R),
            rho=s.rho,
            nu=s.nu,
            gamma2=s.gamma2,
            custom=None if s.custom is None else polynomial_from_doc(s.custom),
        )
    region = Region(
        tuple(doc.region.variables),
        {k: Interval(v[0], v[1]) for k, v in doc.region.box.items()},
        tuple(polynomial_from_doc(g) for g in doc.region.ineqs),
    )
    report = None if doc.report is None else ValidationReport(**doc.report.model_dump())
    return Certificate(
        kind=doc.kind,
        states=tuple(doc.states),
        inputs=tuple(doc.inputs),
        V=polynomial_from_doc(doc.V),
        region=region,
        supply=supply,
        index=doc.index,
        index_name=doc.index_name,
        index_width=doc.index_width,
        grams=[_gram_from_doc(g) for g in doc.multipliers + doc.constraints],
        approx=dict(doc.approx),
        system=doc.system,
        report=report,
    )


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value
