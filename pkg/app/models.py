"""Pydantic schemas for Passicert: run configuration and JSON documents."""
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator

SCHEMA_VERSION = 1

MODES = ("stability", "dissipativity", "passivity", "ofp", "ifp", "qsr", "l2gain")
APPROX_KINDS = ("auto", "exact", "taylor", "bernstein")
VARIANTS = ("box", "ellipsoid")
ERROR_MODELS = ("box", "anchored")


class RunConfig(BaseModel):
    """Options of one certification run (config file keys and CLI flags)."""

    mode: str = "stability"
    approx: str = "auto"
    order: Optional[int] = None
    degree: Optional[int] = None
    variant: str = "ellipsoid"
    error_model: Optional[str] = None
    error_mode: Optional[str] = None
    remainder_mode: str = "per-beta"
    vdeg: Optional[int] = None
    sdeg: Optional[int] = None
    tol: Optional[float] = None
    seed: Optional[int] = None
    samples: Optional[int] = None
    radius: Optional[float] = None
    radii: List[float] = Field(default_factory=list)
    rho: Optional[float] = None
    nu: Optional[float] = None
    gamma: Optional[float] = None
    Q: Optional[List[List[float]]] = None
    S: Optional[List[List[float]]] = None
    R: Optional[List[List[float]]] = None
    out: Optional[str] = None

    model_config = {"extra": "forbid"}

    @field_validator("mode")
    @classmethod
    def check_mode(cls, value: str) -> str:
        if value not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}")
        return value

    @field_validator("approx")
    @classmethod
    def check_approx(cls, value: str) -> str:
        if value not in APPROX_KINDS:
            raise ValueError(f"approx must be one of {', '.join(APPROX_KINDS)}")
        return value

    @field_validator("variant")
    @classmethod
    def check_variant(cls, value: str) -> str:
        if value not in VARIANTS:
            raise ValueError(f"variant must be one of {', '.join(VARIANTS)}")
        return value

    @field_validator("error_model")
    @classmethod
    def check_error_model(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and value not in ERROR_MODELS:
            raise ValueError(f"error_model must be one of {', '.join(ERROR_MODELS)}")
        return value

    @field_validator("order", "degree", "vdeg", "sdeg", "samples")
    @classmethod
    def check_positive(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value < 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("radius", "tol")
    @classmethod
    def check_strictly_positive(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value <= 0:
            raise ValueError("must be positive")
        return value


# ============ Documents ============

class PolynomialDoc(BaseModel):
    vars: List[str]
    monomials: List[List[int]]
    coeffs: List[float]
    text: str = ""


class RegionDoc(BaseModel):
    variables: List[str]
    box: Dict[str, List[float]] = Field(default_factory=dict)
    ineqs: List[PolynomialDoc] = Field(default_factory=list)


class SupplyDoc(BaseModel):
    kind: str
    m: int
    p: int
    Q: List[List[float]] = Field(default_factory=list)
    S: List[List[float]] = Field(default_factory=list)
    R: List[List[float]] = Field(default_factory=list)
    rho: Optional[float] = None
    nu: Optional[float] = None
    gamma2: Optional[float] = None
    custom: Optional[PolynomialDoc] = None


class GramDoc(BaseModel):
    name: str
    role: str
    vars: List[str]
    basis: List[List[int]]
    gram: List[List[float]]
    poly: Optional[PolynomialDoc] = None


class ReportDoc(BaseModel):
    gram_min_eigs: Dict[str, float]
    residual: float
    margin: float
    storage_margin: float
    dissipation_margin: float
    v0: float
    samples: int
    verdict: str
    messages: List[str] = Field(default_factory=list)


class CertificateDoc(BaseModel):
    schema_version: int = SCHEMA_VERSION
    kind: str
    system: str
    states: List[str]
    inputs: List[str]
    V: PolynomialDoc
    supply: Optional[SupplyDoc] = None
    index: Optional[float] = None
    index_name: Optional[str] = None
    index_width: Optional[float] = None
    region: RegionDoc
    approx: Dict[str, Any] = Field(default_factory=dict)
    multipliers: List[GramDoc] = Field(default_factory=list)
    constraints: List[GramDoc] = Field(default_factory=list)
    report: Optional[ReportDoc] = None


class SurrogateDoc(BaseModel):
    schema_version: int = SCHEMA_VERSION
    kind: str
    states: List[str]
    inputs: List[str]
    f: List[str]
    h: List[str]
    error_bounds: Dict[str, float] = Field(default_factory=dict)
    meta: Dict[str, Any] = Field(default_factory=dict)


class DiagnosticDoc(BaseModel):
    schema_version: int = SCHEMA_VERSION
    certified: bool = False
    status: str
    message: str = ""
    system: str
    mode: str
    dimensions: Dict[str, Any] = Field(default_factory=dict)
    residuals: Dict[str, float] = Field(default_factory=dict)
    report: Optional[ReportDoc] = None


# ============ API payloads ============

class SystemRequest(BaseModel):
    text: str
    name: str = "system"


class SystemInfo(BaseModel):
    name: str
    states: List[str]
    inputs: List[str]
    outputs: List[str]
    polynomial: bool
    region: Dict[str, Any]


class RunRequest(BaseModel):
    system: str
    name: str = "system"
    config: RunConfig = Field(default_factory=RunConfig)


class RunResponse(BaseModel):
    certified: bool
    status: str
    index: Optional[float] = None
    index_width: Optional[float] = None
    surrogate: Optional[SurrogateDoc] = None
    certificate: Optional[CertificateDoc] = None
    diagnostic: Optional[DiagnosticDoc] = None


class ExportResponse(BaseModel):
    sdpa: str
    dimensions: Dict[str, Any]
