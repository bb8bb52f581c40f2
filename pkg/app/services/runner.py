"""
Run orchestration shared by the command line and the HTTP surface:
instance loading, radius resolution, solver option layering and the
engine/oracle calls.
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional

from pydantic import ValidationError

from app.config import Settings
from app.core.exceptions import IngestionError, InputError
from app.schemas.network import InfrastructureDocument
from app.schemas.run import RunConfig, RunOptions
from app.services.benders import NestedBenders, SolveState, SolverOptions
from app.services.divergence import DivergenceSpec, calibrate_rho, parse_divergence
from app.services.lp_backend import LpBackend, get_backend
from app.services.oracle import VerifyReport, verify
from app.services.scenario_tree import ScenarioTree, load_tree, validation_to_input_error
from app.services.water_model import (
    InfrastructureConfig,
    TreeScale,
    build_water_tree,
    load_demands,
    load_network,
)

logger = logging.getLogger(__name__)

ENGINE_VERSION = "1.0.0"

# Engine tolerance used under verify so the bounds sit inside the oracle tolerance
VERIFY_TOL = 1e-5
ORACLE_TOL = 1e-4


@dataclass
class RunOutcome:
    tree: ScenarioTree
    spec: DivergenceSpec
    options: SolverOptions
    state: SolveState
    seed: int
    water: bool = False

    @property
    def instance(self) -> Optional[str]:
        return self.tree.name


def resolve_radii(tree: ScenarioTree, spec: DivergenceSpec, options: RunOptions) -> ScenarioTree:
    """
    Explicit ρ (one value, or one per stage) or calibration from a
    confidence level with n = descendant count at each node and N = n
    unless a sample size is given.
    """
    stages = tree.stage_count - 1
    if options.rho is not None:
        rho = list(options.rho)
        if len(rho) == 1:
            rho = rho * stages
        if len(rho) != stages:
            raise InputError(f"rho needs 1 or {stages} values for a {tree.stage_count}-stage tree, got {len(rho)}")
        return tree.with_rho(rho)

    alpha = 1.0 - options.confidence
    per_node: dict[int, float] = {}
    for node_id in tree.interior_nodes():
        n = max(len(tree.children(node_id)), 2)
        per_node[node_id] = calibrate_rho(spec, n, options.sample_size or n, alpha)
    stage_rho = [per_node[tree.nodes_at(t)[0]] for t in range(1, stages + 1)]
    overrides = {
        node_id: value
        for node_id, value in per_node.items()
        if value != stage_rho[tree.node(node_id).stage - 1]
    }
    logger.info(
        f"Calibrated rho at {options.confidence:.0%} confidence: "
        + ", ".join(f"t={t}: {r:.4f}" for t, r in enumerate(stage_rho, start=1))
    )
    calibrated = tree.with_rho(stage_rho)
    return calibrated.with_node_rho(overrides) if overrides else calibrated


def solver_options(options: RunOptions, settings: Settings, **overrides) -> SolverOptions:
    threads = options.threads
    if threads == 0:
        threads = os.cpu_count() or 1
    values = dict(
        layout=options.layout,
        tol=options.tol,
        secondary_tol=options.secondary_tol,
        secondary_scope=options.secondary_scope,
        epsilon=options.epsilon,
        lambda_min=options.lambda_min,
        max_iter=options.max_iter,
        threads=threads,
        cut_fault=options.inject_cut_fault,
    )
    values.update(overrides)
    return SolverOptions.from_settings(settings, **values)


def backend_for(options: RunOptions, settings: Settings) -> LpBackend:
    return get_backend(options.backend or settings.lp_backend, settings.lp_feasibility_tol, settings.lp_pivot_tol)


def load_instance(config: RunConfig, settings: Settings) -> tuple[ScenarioTree, bool]:
    """Tree file, or a water tree composed from network + demand series. Returns (tree, is_water)."""
    if config.tree is not None:
        return load_tree(config.tree), False

    network = load_network(config.network)
    infrastructure = InfrastructureConfig(config.config)
    if config.infrastructure is not None:
        try:
            doc = InfrastructureDocument.model_validate_json(config.infrastructure.read_text(encoding="utf-8"))
        except OSError as e:
            raise IngestionError(f"cannot read infrastructure file {config.infrastructure}: {e}")
        except ValidationError as e:
            raise validation_to_input_error(e, str(config.infrastructure))
        infrastructure = InfrastructureConfig(config.config, dict(doc.capacities), dict(doc.arc_costs))
    scale = TreeScale.parse(config.scale)
    demands = load_demands(config.demands, scale.scenarios())
    tree = build_water_tree(
        network,
        demands,
        infrastructure,
        scale,
        stages=config.stages,
        periods=config.periods,
        max_nodes=settings.max_tree_nodes,
    )
    return tree, True


def solve_tree(
    tree: ScenarioTree,
    options: RunOptions,
    settings: Settings,
    water: bool = False,
    **overrides,
) -> RunOutcome:
    spec = parse_divergence(options.divergence)
    tree = resolve_radii(tree, spec, options)
    solver = solver_options(options, settings, **overrides)
    logger.info(
        f"Solving {tree.name or 'tree'}: {len(tree)} nodes, divergence={spec.name}, "
        f"layout={solver.layout.value}, tol={solver.tol:g}, threads={solver.threads}"
    )
    state = NestedBenders(tree, spec, solver, backend_for(options, settings)).run()
    logger.info(
        f"Finished with status={state.status.value} after {state.iteration} iterations "
        f"in {state.elapsed:.2f}s: z_L={state.lower_bound:.8g} z_U={state.upper_bound:.8g}"
    )
    seed = settings.seed if options.seed is None else options.seed
    return RunOutcome(tree, spec, solver, state, seed, water)


def run_config(config: RunConfig, settings: Settings) -> RunOutcome:
    tree, water = load_instance(config, settings)
    return solve_tree(tree, config, settings, water)


def verify_tree(tree: ScenarioTree, options: RunOptions, settings: Settings, water: bool = False) -> tuple[RunOutcome, VerifyReport]:
    """Solve with the tightened engine tolerance, then compare against every applicable oracle."""
    tol = min(options.tol or settings.tol, VERIFY_TOL)
    outcome = solve_tree(tree, options, settings, water, tol=tol)
    report = verify(
        outcome.tree, outcome.spec, outcome.state, ORACLE_TOL, node_cap=settings.extensive_node_cap, seed=outcome.seed
    )
    logger.info(f"Verify {'PASS' if report.passed else 'FAIL'}")
    return outcome, report
