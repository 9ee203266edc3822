"""
Certification pipelines shared by the command line and the HTTP API.

One run: choose a surrogate, assemble the SOS program for the requested
mode, compile and solve it, then build and validate the certificate.
"""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from app.config import settings
from app.models import RunConfig, SurrogateDoc
from app.services.approx import (
    ApproxModel,
    BernsteinSurrogate,
    build_bernstein,
    build_taylor,
    detect_polynomial,
)
from app.services.cert import (
    Certificate,
    CertificateError,
    IndexResult,
    ValidationReport,
    bisect_index,
    build_certificate,
    certificate_digest,
    extract_index,
    validate,
)
from app.services.exprlang import ModelError
from app.services.sdp import SdpProblem, SdpSolution, check_dimensions, solve_sdp
from app.services.sdpa import export_sdpa
from app.services.sos import (
    SosOptions,
    SosProblem,
    SupplyRate,
    build_dissipativity_bernstein,
    build_dissipativity_taylor,
    build_stability_bernstein,
    build_stability_taylor,
    compile_to_sdp,
    make_supply,
)
from app.services.system import SystemModel
from app.utils import parse_float_list

logger = logging.getLogger(__name__)

INDEX_MODES = {"ofp": "rho", "ifp": "nu", "l2gain": "gamma2"}
_LIST_KEYS = ("Q", "S", "R")


@dataclass
class RunOutcome:
    certified: bool
    status: str
    mode: str
    system: str
    approx: Optional[ApproxModel] = None
    problem: Optional[SosProblem] = None
    sdp: Optional[SdpProblem] = None
    solution: Optional[SdpSolution] = None
    certificate: Optional[Certificate] = None
    report: Optional[ValidationReport] = None
    index: Optional[IndexResult] = None
    message: str = ""
    dimensions: Dict = field(default_factory=dict)


def config_values(raw: Dict[str, str]) -> Dict:
    """String key=value pairs (config file or system options) into RunConfig field values."""
    values: Dict = {}
    for key, value in raw.items():
        if key == "radii":
            values[key] = parse_float_list(value)
        elif key in _LIST_KEYS:
            values[key] = json.loads(value)
        else:
            values[key] = value
    return values


def apply_system_options(model: SystemModel, config: RunConfig) -> RunConfig:
    """Fill fields the caller left unset from the system document's option statements."""
    options = {k: v for k, v in config_values(model.options_dict).items() if k not in config.model_fields_set}
    if not options:
        return config
    logger.debug(f"{model.name}: options from system document {sorted(options)}")
    return RunConfig(**{**config.model_dump(exclude_unset=True), **options})


def prepare_model(model: SystemModel, config: RunConfig) -> SystemModel:
    """Apply the radius option and drop inputs for stability runs."""
    if config.radius is not None:
        model = model.with_radius(config.radius)
    if config.mode == "stability":
        model = model.without_inputs()
    return model


def choose_approximation(model: SystemModel, config: RunConfig) -> ApproxModel:
    """Surrogate for the run; `auto` prefers the exact polynomial, then Taylor near the origin, else Bernstein."""
    kind = config.approx
    if kind in ("auto", "exact"):
        exact = detect_polynomial(model)
        if exact is not None:
            logger.info(f"{model.name}: dynamics are polynomial, using them exactly")
            return exact
        if kind == "exact":
            raise ModelError("approx=exact needs polynomial dynamics")
        radius = model.region.radius(model.variables)
        kind = "taylor" if radius <= 1.0 or not model.region.is_box() else "bernstein"
        logger.info(f"{model.name}: auto approximation picked {kind} (region radius {radius:.3g})")
    if kind == "taylor":
        order = config.order or settings.default_taylor_order
        return build_taylor(model, order, config.remainder_mode)
    if not model.region.is_box():
        raise ModelError("Bernstein approximation needs a box region over every state and input")
    degree = config.degree or settings.default_bernstein_degree
    return build_bernstein(model, degree, mode=config.error_mode or settings.bernstein_error_mode)


def make_run_supply(model: SystemModel, config: RunConfig, fixed_index: Optional[float] = None) -> Optional[SupplyRate]:
    """Supply rate for the mode; index modes optimize their index unless it is given."""
    mode = config.mode
    if mode == "stability":
        return None
    m, p = model.m, model.p
    if mode == "passivity":
        return make_supply("passivity", m, p)
    if mode in ("qsr", "dissipativity"):
        if mode == "dissipativity" and config.rho is not None and config.nu is not None:
            return make_supply("if-ofp", m, p, rho=config.rho, nu=config.nu)
        return make_supply(
            "qsr", m, p,
            Q=config.Q if config.Q is not None else 0.0,
            S=config.S if config.S is not None else 0.0,
            R=config.R if config.R is not None else 0.0,
        )
    index = INDEX_MODES[mode]
    given = {"rho": config.rho, "nu": config.nu, "gamma2": None if config.gamma is None else config.gamma ** 2}[index]
    if fixed_index is not None:
        given = fixed_index
    kind = {"rho": "ofp", "nu": "ifp", "gamma2": "l2gain"}[index]
    if given is None:
        return make_supply(kind, m, p, index=index)
    if index == "gamma2":
        return make_supply(kind, m, p, gamma=given ** 0.5)
    return make_supply(kind, m, p, **{index: given})


def sos_options(config: RunConfig) -> SosOptions:
    return SosOptions(
        vdeg=config.vdeg or settings.default_vdeg,
        multiplier_degree=config.sdeg if config.sdeg is not None else settings.multiplier_degree,
        margin=settings.margin_lambda,
        variant=config.variant,
        error_model=config.error_model or settings.bernstein_error_model,
    )


def build_problem(approx: ApproxModel, supply: Optional[SupplyRate], config: RunConfig) -> SosProblem:
    opts = sos_options(config)
    surrogate = approx.surrogate
    region = approx.model.region
    if isinstance(surrogate, BernsteinSurrogate):
        if supply is None:
            return build_stability_bernstein(surrogate, opts)
        return build_dissipativity_bernstein(surrogate, supply, opts)
    if supply is None:
        return build_stability_taylor(surrogate, region, opts)
    return build_dissipativity_taylor(surrogate, region, supply, opts)


def compile_problem(problem: SosProblem) -> Tuple[SdpProblem, Dict]:
    sdp = compile_to_sdp(problem)
    check_dimensions(sdp)
    dims = {
        "constraints": sdp.m,
        "blocks": len(sdp.blocks),
        "gram_dimension": sdp.total_gram_dim,
        "block_sizes": [b.size for b in sdp.blocks],
        "free_variables": sdp.n_free,
        "error_symbols": len(problem.error_symbols),
        "multipliers": problem.multiplier_counts(),
    }
    return sdp, dims


def _kind(config: RunConfig) -> str:
    return config.mode if config.mode != "dissipativity" else "qsr"


def _solve_once(
    model: SystemModel,
    approx: ApproxModel,
    supply: Optional[SupplyRate],
    config: RunConfig,
) -> RunOutcome:
    problem = build_problem(approx, supply, config)
    sdp, dims = compile_problem(problem)
    solution = solve_sdp(sdp, tol=config.tol)
    outcome = RunOutcome(
        certified=False,
        status=solution.status,
        mode=config.mode,
        system=model.name,
        approx=approx,
        problem=problem,
        sdp=sdp,
        solution=solution,
        dimensions=dims,
    )
    if not solution.optimal:
        outcome.message = f"SDP {solution.status}"
        if sdp.infeasible_rows:
            outcome.message += f": {sdp.infeasible_rows[0]} cannot be matched"
        return outcome
    cert = build_certificate(problem, sdp, solution, _kind(config), model.region, model.name, approx.meta)
    report = validate(cert, model, config.samples, config.seed)
    cert.report = report
    outcome.certificate = cert
    outcome.report = report
    outcome.certified = report.valid
    outcome.status = "certified" if report.valid else f"validation {report.verdict}"
    outcome.message = "; ".join(report.messages)
    return outcome


def run_verify(model: SystemModel, config: RunConfig) -> RunOutcome:
    """Certify the mode's property with fixed supply parameters (or the optimal index for index modes)."""
    model = prepare_model(model, config)
    if config.mode in INDEX_MODES:
        return run_index(model, config, prepared=True)
    approx = choose_approximation(model, config)
    supply = make_run_supply(model, config)
    outcome = _solve_once(model, approx, supply, config)
    logger.info(f"{model.name}: {config.mode} {outcome.status}")
    return outcome


def run_index(model: SystemModel, config: RunConfig, prepared: bool = False) -> RunOutcome:
    """Optimize the OFP / IFP / L2-gain index; falls back to bisection when the direct solve fails."""
    if config.mode not in INDEX_MODES:
        raise ModelError(f"Mode '{config.mode}' has no index (use ofp, ifp or l2gain)")
    if not prepared:
        model = prepare_model(model, config)
    if model.p < 1:
        raise ModelError("Index modes need at least one output")
    approx = choose_approximation(model, config)
    supply = make_run_supply(model, config)
    outcome = _solve_once(model, approx, supply, config)
    if outcome.solution.optimal:
        result = extract_index(outcome.solution, outcome.problem)
        outcome.index = result
        if outcome.certificate is not None:
            outcome.certificate.index_width = result.width
        logger.info(f"{model.name}: {INDEX_MODES[config.mode]} = {result.value:.6g}")
        return outcome
    if outcome.solution.status == "infeasible":
        return outcome

    logger.warning(f"{model.name}: direct index solve {outcome.solution.status}, bisecting")
    maximize = config.mode != "l2gain"

    def feasible(value: float) -> bool:
        trial = _solve_once(model, approx, make_run_supply(model, config, fixed_index=value), config)
        return trial.solution.optimal

    try:
        if maximize:
            result = bisect_index(feasible, maximize=True)
        else:
            result = bisect_index(feasible, low=0.0, high=settings.bisection_high ** 2, maximize=False)
    except CertificateError as exc:
        outcome.message = str(exc)
        return outcome
    half = 0.5 * (result.width or 0.0)
    proven = result.value - half if maximize else result.value + half
    final = _solve_once(model, approx, make_run_supply(model, config, fixed_index=proven), config)
    final.index = result
    if final.certificate is not None:
        final.certificate.index_name = INDEX_MODES[config.mode]
        final.certificate.index = proven
        final.certificate.index_width = result.width
    return final


def run_export(model: SystemModel, config: RunConfig) -> Tuple[str, Dict]:
    """SDPA text of the compiled program, without solving."""
    model = prepare_model(model, config)
    approx = choose_approximation(model, config)
    problem = build_problem(approx, make_run_supply(model, config), config)
    sdp, dims = compile_problem(problem)
    return export_sdpa(sdp), dims


SweepRow = Tuple[float, Optional[float], str, Optional[str]]


def _sweep_row(args: Tuple[SystemModel, RunConfig, float]) -> SweepRow:
    model, config, radius = args
    try:
        outcome = run_index(model, config.model_copy(update={"radius": radius}))
    except Exception as exc:
        logger.warning(f"Sweep row r={radius} failed: {exc}")
        return radius, None, "error", None
    digest = certificate_digest(outcome.certificate) if outcome.certificate is not None else None
    if outcome.index is None:
        return radius, None, outcome.status, digest
    return radius, outcome.index.value, outcome.status, digest


def run_sweep(model: SystemModel, config: RunConfig, radii: List[float], workers: Optional[int] = None) -> List[SweepRow]:
    """Index and certificate digest per radius; rows come back in input order, failed rows carry an empty index."""
    if not radii:
        raise ModelError("Sweep needs at least one radius")
    if any(r <= 0 for r in radii) or list(radii) != sorted(radii):
        raise ModelError("Sweep radii must be positive and ascending")
    workers = workers if workers is not None else (settings.workers or os.cpu_count() or 1)
    jobs = [(model, config, float(r)) for r in radii]
    if workers <= 1 or len(jobs) == 1:
        return [_sweep_row(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as executor:
        return list(executor.map(_sweep_row, jobs))


def surrogate_document(approx: ApproxModel) -> SurrogateDoc:
    surrogate = approx.surrogate
    bounds: Dict[str, float] = {}
    if isinstance(surrogate, BernsteinSurrogate):
        for i, b in enumerate(surrogate.f_bounds):
            bounds[f"f{i + 1}"] = float(b)
        for j, b in enumerate(surrogate.h_bounds):
            bounds[f"h{j + 1}"] = float(b)
    else:
        for label, table in (("f", surrogate.f_remainders), ("h", surrogate.h_remainders)):
            for i, row in enumerate(table):
                for beta, b in row.items():
                    if b > 0:
                        bounds[f"{label}{i + 1}[{','.join(str(e) for e in beta)}]"] = float(b)
    return SurrogateDoc(
        kind=approx.kind,
        states=list(surrogate.states),
        inputs=list(surrogate.inputs),
        f=[p.to_string() for p in surrogate.f_polys],
        h=[p.to_string() for p in surrogate.h_polys],
        error_bounds=bounds,
        meta={k: v for k, v in approx.meta.items() if isinstance(v, (int, float, str, type(None)))},
    )
