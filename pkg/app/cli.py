"""Command-line entry point: python -m app.cli {verify,index,sweep,export} SYSTEM [options]."""
import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from app.config import settings
from app.models import DiagnosticDoc, RunConfig
from app.services.cert import certificate_digest, certificate_to_document, report_doc
from app.services.pipeline import (
    RunOutcome,
    apply_system_options,
    config_values,
    run_export,
    run_index,
    run_sweep,
    run_verify,
)
from app.services.system import load_system
from app.utils import parse_float_list, parse_key_value

logger = logging.getLogger(__name__)

EXIT_CERTIFIED = 0
EXIT_USER_ERROR = 1
EXIT_NOT_CERTIFIED = 2
EXIT_INTERNAL = 3

def load_config(path: Optional[str]) -> Dict:
    """Flat key=value config file into RunConfig fields."""
    if not path:
        return {}
    return config_values(parse_key_value(Path(path).read_text(encoding="utf-8")))


def build_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config)
    flags = {
        "mode": args.mode,
        "approx": args.approx,
        "order": args.order,
        "degree": args.degree,
        "variant": args.variant,
        "error_model": args.error_model,
        "vdeg": args.vdeg,
        "sdeg": args.sdeg,
        "tol": args.tol,
        "seed": args.seed,
        "samples": args.samples,
        "radius": args.radius,
        "rho": args.rho,
        "nu": args.nu,
        "gamma": args.gamma,
        "out": args.out,
    }
    if args.radii:
        flags["radii"] = parse_float_list(args.radii)
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.command == "index" and "mode" not in values:
        values["mode"] = "ofp"
    if args.command == "sweep" and "mode" not in values:
        values["mode"] = "ofp"
    return RunConfig(**values)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        logger.info(f"Wrote {out}")
    else:
        sys.stdout.write(text)


def _diagnostic(outcome: RunOutcome) -> DiagnosticDoc:
    return DiagnosticDoc(
        certified=outcome.certified,
        status=outcome.status,
        message=outcome.message,
        system=outcome.system,
        mode=outcome.mode,
        dimensions=outcome.dimensions,
        residuals=outcome.solution.residuals if outcome.solution is not None else {},
        report=None if outcome.report is None else report_doc(outcome.report),
    )


def _finish(outcome: RunOutcome, config: RunConfig) -> int:
    if outcome.certified:
        doc = certificate_to_document(outcome.certificate)
        _emit(doc.model_dump_json(indent=2) + "\n", config.out)
        return EXIT_CERTIFIED
    _emit(_diagnostic(outcome).model_dump_json(indent=2) + "\n", config.out)
    return EXIT_NOT_CERTIFIED


def cmd_verify(args: argparse.Namespace) -> int:
    model = load_system(args.system)
    config = apply_system_options(model, build_config(args))
    return _finish(run_verify(model, config), config)


def cmd_index(args: argparse.Namespace) -> int:
    model = load_system(args.system)
    config = apply_system_options(model, build_config(args))
    outcome = run_index(model, config)
    if outcome.certified and outcome.index is not None:
        name = outcome.certificate.index_name
        line = f"{name} = {outcome.index.value:.6g}"
        if outcome.index.width:
            line += f" (bracket width {outcome.index.width:.2g})"
        digest = certificate_digest(outcome.certificate)
        sys.stderr.write(f"{line}\ncertificate sha256 {digest}\n")
    return _finish(outcome, config)


def cmd_sweep(args: argparse.Namespace) -> int:
    model = load_system(args.system)
    config = apply_system_options(model, build_config(args))
    if not config.radii:
        raise ValueError("sweep needs --radii (comma-separated, ascending)")
    rows = run_sweep(model, config, config.radii, workers=args.workers)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["r", "index", "status"])
    for radius, index, status, digest in rows:
        writer.writerow([f"{radius:g}", "" if index is None else f"{index:.6g}", status])
        if digest is not None:
            sys.stderr.write(f"r={radius:g} certificate sha256 {digest}\n")
    _emit(buffer.getvalue(), config.out)
    return EXIT_CERTIFIED


def cmd_export(args: argparse.Namespace) -> int:
    model = load_system(args.system)
    config = apply_system_options(model, build_config(args))
    text, dims = run_export(model, config)
    _emit(text, config.out)
    sys.stderr.write(
        f"constraints {dims['constraints']}, blocks {dims['blocks']}, "
        f"gram dimension {dims['gram_dimension']}, free variables {dims['free_variables']}\n"
    )
    return EXIT_CERTIFIED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="passicert", description="Local stability and passivity certificates")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {"verify": cmd_verify, "index": cmd_index, "sweep": cmd_sweep, "export": cmd_export}
    for name, handler in handlers.items():
        p = sub.add_parser(name)
        p.set_defaults(handler=handler)
        p.add_argument("system", help="system file (.sys)")
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--mode")
        p.add_argument("--approx")
        p.add_argument("--order", type=int, help="Taylor order k")
        p.add_argument("--degree", type=int, help="Bernstein degree per variable")
        p.add_argument("--variant", help="box or ellipsoid error sets")
        p.add_argument("--error-model", dest="error_model", help="Bernstein error model: box or anchored")
        p.add_argument("--vdeg", type=int, help="storage function degree")
        p.add_argument("--sdeg", type=int, help="multiplier degree (default: automatic)")
        p.add_argument("--tol", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--samples", type=int)
        p.add_argument("--radius", type=float, help="state region ||x|| <= r")
        p.add_argument("--radii", help="comma-separated radii for sweep")
        p.add_argument("--rho", type=float)
        p.add_argument("--nu", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--workers", type=int)
        p.add_argument("--out")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CERTIFIED if exc.code == 0 else EXIT_USER_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose or settings.debug else logging.INFO)
    try:
        return args.handler(args)
    except (ValidationError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USER_ERROR
    except Exception:
        logger.exception("Internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
