"""Command line front end: ``lot cost|solve|interp|verify --config <path>``.

Exit codes: 0 when every gate passes, 1 for configuration and input
errors, 2 for numerical or verification failures.  Errors are written to
stderr as one JSON object.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from sqlalchemy.engine import Engine

from app.database import record_run
from app.errors import ConfigError, LotError, NumericalError
from app.models import RunConfig, SuiteName
from app.serialization import load_config, to_json, write_json
from app.startup import configure_logging, startup
from app.transport_service import TransportModel, transport_service
from app.verification_service import verification_service

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise ConfigError(f"invalid arguments: {message}", key="argv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lot", description="Optimal transport for Tonelli Lagrangian costs")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="run configuration (JSON)")
    common.add_argument("--out", type=Path, default=None, help="output directory, overrides config.output")
    common.add_argument("--ledger", action="store_true", help="record the run in the run ledger")
    common.add_argument("--log-level", default=None, help="overrides LOT_LOG_LEVEL")

    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cost = commands.add_parser("cost", parents=[common], help="action-minimizing cost of one pair")
    cost.add_argument("--x", type=float, nargs="+", required=True)
    cost.add_argument("--y", type=float, nargs="+", required=True)
    commands.add_parser("solve", parents=[common], help="optimal plan, potentials and map")
    interp = commands.add_parser("interp", parents=[common], help="displacement interpolation")
    interp.add_argument("--s", type=float, nargs="+", required=True)
    verify = commands.add_parser("verify", parents=[common], help="seeded invariant suites")
    verify.add_argument("--suite", default=SuiteName.ALL.value)
    verify.add_argument("--full", action="store_true", help="acceptance-scale sample counts")
    return parser


def _output_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    return args.out if args.out is not None else Path(config.output)


def cmd_cost(model: TransportModel, args: argparse.Namespace, out: Path) -> tuple[int, dict[str, Any]]:
    record = transport_service.cost_record(model, args.x, args.y)
    write_json(out / "cost.json", record)
    return EXIT_OK, record


def cmd_solve(model: TransportModel, args: argparse.Namespace, out: Path) -> tuple[int, dict[str, Any]]:
    mu, nu = transport_service.load_measures(model)
    result = transport_service.solve(model, mu, nu)
    report = transport_service.write_solve(result, out)
    return (EXIT_OK if result.passed else EXIT_FAILED), report


def cmd_interp(model: TransportModel, args: argparse.Namespace, out: Path) -> tuple[int, dict[str, Any]]:
    mu, nu = transport_service.load_measures(model)
    result = transport_service.interpolate(model, mu, nu, args.s)
    report = transport_service.write_interpolation(result, out)
    return (EXIT_OK if result.passed else EXIT_FAILED), report


def cmd_verify(model: TransportModel, args: argparse.Namespace, out: Path) -> tuple[int, dict[str, Any]]:
    suites = verification_service.run(model, args.suite, full=args.full)
    passed = all(suite.passed for suite in suites)
    report = {"passed": passed, "seed": model.config.seed, "suites": suites}
    write_json(out / "verify.json", report)
    return (EXIT_OK if passed else EXIT_FAILED), report


COMMANDS = {"cost": cmd_cost, "solve": cmd_solve, "interp": cmd_interp, "verify": cmd_verify}


def error_record(error: LotError) -> dict[str, Any]:
    return {"error": type(error).__name__, "message": error.message, **error.details()}


def _record(engine: Optional[Engine], command: str, config: Optional[RunConfig], code: int, report: Any) -> None:
    if engine is None or config is None:
        return
    record_run(engine, command, to_json(config), config.seed, code, to_json(report))


def main(argv: Optional[Sequence[str]] = None) -> int:
    command = "unknown"
    config: Optional[RunConfig] = None
    engine: Optional[Engine] = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        configure_logging(args.log_level)
        config = load_config(args.config)
        engine = startup(args.log_level, config.ledger_url, args.ledger)
        model = transport_service.build(config)
        try:
            code, report = COMMANDS[command](model, args, _output_dir(args, config))
        except (np.linalg.LinAlgError, FloatingPointError) as e:
            raise NumericalError(f"linear algebra failure: {e}")
    except LotError as e:
        logger.error("%s failed: %s", command, e.message)
        record = error_record(e)
        sys.stderr.write(to_json(record))
        _record(engine, command, config, e.exit_code, record)
        return e.exit_code
    sys.stdout.write(to_json(report))
    _record(engine, command, config, code, report)
    logger.info("%s finished with exit code %d", command, code)
    return code
