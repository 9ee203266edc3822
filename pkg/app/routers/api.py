"""API endpoints for Passicert."""
import logging

from fastapi import APIRouter, HTTPException

from app.models import DiagnosticDoc, ExportResponse, RunRequest, RunResponse, SystemInfo, SystemRequest
from app.services.cert import certificate_to_document, report_doc
from app.services.pipeline import (
    RunOutcome,
    apply_system_options,
    run_export,
    run_index,
    run_verify,
    surrogate_document,
)
from app.services.system import SystemModel, parse_system

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api", tags=["api"])


def _parse(text: str, name: str) -> SystemModel:
    try:
        return parse_system(text, name)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))


def _response(outcome: RunOutcome) -> RunResponse:
    diagnostic = None
    if not outcome.certified:
        diagnostic = DiagnosticDoc(
            certified=False,
            status=outcome.status,
            message=outcome.message,
            system=outcome.system,
            mode=outcome.mode,
            dimensions=outcome.dimensions,
            residuals=outcome.solution.residuals if outcome.solution is not None else {},
            report=None if outcome.report is None else report_doc(outcome.report),
        )
    return RunResponse(
        certified=outcome.certified,
        status=outcome.status,
        index=None if outcome.index is None else outcome.index.value,
        index_width=None if outcome.index is None else outcome.index.width,
        surrogate=None if outcome.approx is None else surrogate_document(outcome.approx),
        certificate=certificate_to_document(outcome.certificate) if outcome.certified else None,
        diagnostic=diagnostic,
    )


# ============ Systems ============

@router.post("/systems/parse", response_model=SystemInfo)
def parse_system_text(data: SystemRequest):
    """Parse a system document and report its dimensions."""
    model = _parse(data.text, data.name)
    return SystemInfo(
        name=model.name,
        states=list(model.states),
        inputs=list(model.inputs),
        outputs=list(model.outputs),
        polynomial=model.polynomial_parts() is not None,
        region=model.region.describe(),
    )


# ============ Certification ============

@router.post("/verify", response_model=RunResponse)
def verify(data: RunRequest):
    """Certify stability or dissipativity of a system."""
    model = _parse(data.system, data.name)
    try:
        outcome = run_verify(model, apply_system_options(model, data.config))
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return _response(outcome)


@router.post("/index", response_model=RunResponse)
def index(data: RunRequest):
    """Largest OFP / IFP index, or smallest L2 gain."""
    model = _parse(data.system, data.name)
    try:
        config = apply_system_options(model, data.config)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    if config.mode not in ("ofp", "ifp", "l2gain"):
        config = config.model_copy(update={"mode": "ofp"})
    try:
        outcome = run_index(model, config)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return _response(outcome)


@router.post("/export", response_model=ExportResponse)
def export(data: RunRequest):
    """SDPA text of the compiled program."""
    model = _parse(data.system, data.name)
    try:
        text, dims = run_export(model, apply_system_options(model, data.config))
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return ExportResponse(sdpa=text, dimensions=dims)
