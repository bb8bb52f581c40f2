"""
Command-line entry point.

    python -m app.cli solve  --tree data/toy_tree.json --divergence kl --confidence 0.95
    python -m app.cli verify --tree data/toy_tree.json --divergence burg --rho 0.5
    python -m app.cli solve  --network data/two_zone_network.json --demands demands/ --config IPR
    python -m app.cli generate-demands --network data/two_zone_network.json --out demands/
    python -m app.cli schema results

Exit codes: 0 converged (verify: PASS), 1 engine failure or verify FAIL,
2 input error, 3 not converged.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from app.config import Settings, get_settings
from app.core.exceptions import MDROError
from app.schemas.run import RunConfig
from app.services.divergence import VALID_NAMES
from app.services.reporting import SCHEMA_DOCUMENTS, json_schema, write_artifacts
from app.services.runner import load_instance, run_config, verify_tree
from app.services.scenario_tree import validation_to_input_error
from app.services.water_model import (
    DEFAULT_ZONES,
    DemandKnobs,
    TreeScale,
    generate_demands,
    generate_network,
    load_network,
    save_network,
)

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_NOT_CONVERGED = 3


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    instance = parser.add_argument_group("instance")
    instance.add_argument("--tree", type=Path, help="scenario tree document")
    instance.add_argument("--network", type=Path, help="water network document")
    instance.add_argument("--demands", type=Path, help="directory of demand series CSV files")
    instance.add_argument("--config", choices=["NI", "WWTP", "IPR"], default="NI", help="infrastructure option")
    instance.add_argument("--infrastructure", type=Path, help="capacity/cost overrides for the infrastructure option")
    instance.add_argument("--scale", default="reduced:2", help="water tree scale: full or reduced:k")
    instance.add_argument("--stages", type=int, default=5)
    instance.add_argument("--periods", type=int, default=8, help="years per stage after the first")

    solver = parser.add_argument_group("solver")
    solver.add_argument("--divergence", default="kl", help=f"one of {', '.join(VALID_NAMES)}")
    radius = solver.add_mutually_exclusive_group()
    radius.add_argument("--confidence", type=float, help="confidence level for rho calibration, e.g. 0.95")
    radius.add_argument("--rho", type=float, nargs="+", help="rho for every stage, or one value per stage")
    solver.add_argument("--sample-size", type=int, help="N in the calibration (default: branch count)")
    solver.add_argument("--layout", choices=["single", "multi"], default="single")
    solver.add_argument("--tol", type=float)
    solver.add_argument("--secondary-tol", type=float)
    solver.add_argument("--secondary-scope", choices=["root", "all"], default="root")
    solver.add_argument("--epsilon", type=float)
    solver.add_argument("--lambda-min", type=float)
    solver.add_argument("--max-iter", type=int)
    solver.add_argument("--threads", type=int, help="worker threads; 0 uses every core")
    solver.add_argument("--seed", type=int)
    solver.add_argument("--backend", choices=["bundled", "highs"])
    solver.add_argument("--inject-cut-fault", type=float, default=0.0, help=argparse.SUPPRESS)
    parser.add_argument("--out", type=Path, help="output directory (default: MDRO_OUTPUT_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdro", description="Multistage distributionally robust optimization engine")
    parser.add_argument("--debug", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    _add_run_arguments(commands.add_parser("solve", help="solve an instance and write the result artifacts"))
    _add_run_arguments(commands.add_parser("verify", help="solve and compare against the brute-force oracles"))

    schema = commands.add_parser("schema", help="print the JSON Schema of a document")
    schema.add_argument("document", choices=sorted(SCHEMA_DOCUMENTS))

    demands = commands.add_parser("generate-demands", help="write synthetic demand series")
    demands.add_argument("--network", type=Path, required=True)
    demands.add_argument("--out", type=Path, required=True)
    demands.add_argument("--scale", default="full", help="combinations to write: full or reduced:k")
    demands.add_argument("--last-year", type=int, default=2050)
    demands.add_argument("--noise", type=float, default=0.0, help="relative noise on every value")
    demands.add_argument("--seed", type=int)

    network = commands.add_parser("generate-network", help="write a zoned water network document")
    network.add_argument("--out", type=Path, required=True)
    network.add_argument("--zones", nargs="+", default=list(DEFAULT_ZONES))
    network.add_argument("--base-demand", type=float, default=20_000.0)
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    fields = {
        key: getattr(args, key)
        for key in RunConfig.model_fields
        if getattr(args, key, None) is not None
    }
    try:
        return RunConfig(**fields)
    except ValidationError as e:
        raise validation_to_input_error(e, "arguments")


def _out_dir(args: argparse.Namespace, settings: Settings) -> Path:
    return args.out if args.out is not None else settings.output_dir


def cmd_solve(args: argparse.Namespace, settings: Settings) -> int:
    config = _run_config(args)
    outcome = run_config(config, settings)
    out = _out_dir(args, settings)
    write_artifacts(outcome, out)
    state = outcome.state
    print(
        f"{state.status.value}: z_L={state.lower_bound:.10g} z_U={state.upper_bound:.10g} "
        f"gap={state.gap:.3e} iterations={state.iteration} -> {out}"
    )
    return EXIT_OK if state.converged else EXIT_NOT_CONVERGED


def cmd_verify(args: argparse.Namespace, settings: Settings) -> int:
    config = _run_config(args)
    tree, water = load_instance(config, settings)
    outcome, report = verify_tree(tree, config, settings, water)
    out = _out_dir(args, settings)
    write_artifacts(outcome, out, report)

    print(f"{'oracle':<24} {'status':<8} {'oracle value':>16} {'z_L':>16} {'z_U':>16}  detail")
    for c in report.comparisons:
        row = c.to_dict()
        value = "-" if c.oracle_value is None else f"{c.oracle_value:.10g}"
        print(f"{c.oracle:<24} {row['status']:<8} {value:>16} {c.lower_bound:>16.10g} {c.upper_bound:>16.10g}  {c.detail}")
    if not report.bound_discipline:
        print(f"bound discipline: FAIL ({report.detail})")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_schema(args: argparse.Namespace, settings: Settings) -> int:
    print(json.dumps(json_schema(args.document), indent=2))
    return EXIT_OK


def cmd_generate_demands(args: argparse.Namespace, settings: Settings) -> int:
    network = load_network(args.network)
    scale = TreeScale.parse(args.scale)
    written = generate_demands(
        network,
        args.out,
        scenarios=scale.scenarios(),
        last_year=args.last_year,
        knobs=DemandKnobs(noise=args.noise),
        seed=settings.seed if args.seed is None else args.seed,
    )
    print(f"wrote {len(written)} demand series to {args.out}")
    return EXIT_OK


def cmd_generate_network(args: argparse.Namespace, settings: Settings) -> int:
    document = generate_network(args.zones, base_demand=args.base_demand)
    save_network(document, args.out)
    print(f"wrote network with {len(document.nodes)} nodes and {len(document.arcs)} arcs to {args.out}")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "verify": cmd_verify,
    "schema": cmd_schema,
    "generate-demands": cmd_generate_demands,
    "generate-network": cmd_generate_network,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=logging.DEBUG if args.debug or settings.debug else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    try:
        return COMMANDS[args.command](args, settings)
    except MDROError as e:
        logger.error(e.detail)
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
