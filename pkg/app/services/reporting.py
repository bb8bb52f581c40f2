"""
Result documents and artifact files for finished runs.
"""
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from pydantic import BaseModel

from app.core.exceptions import InputError
from app.schemas.network import InfrastructureDocument, NetworkDocument
from app.schemas.results import (
    ComparisonEntry,
    DiagnosticsDocument,
    DocumentHeader,
    IterationEntry,
    NodePolicyEntry,
    ResultsBody,
    ResultsDocument,
    VerifyBody,
    VerifyDocument,
    WorstCaseEntry,
)
from app.schemas.run import RunConfig
from app.schemas.tree import TreeDocument
from app.services.oracle import VerifyReport
from app.services.runner import ENGINE_VERSION, RunOutcome
from app.services.water_model import shortage_report

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.json"
ITERATIONS_FILE = "iterations.jsonl"
DIAGNOSTICS_FILE = "diagnostics.json"
VERIFY_FILE = "verify.json"

SCHEMA_DOCUMENTS: dict[str, type[BaseModel]] = {
    "tree": TreeDocument,
    "network": NetworkDocument,
    "infrastructure": InfrastructureDocument,
    "run": RunConfig,
    "results": ResultsDocument,
    "verify": VerifyDocument,
    "diagnostics": DiagnosticsDocument,
}


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def _header(outcome: RunOutcome) -> DocumentHeader:
    return DocumentHeader(
        created_at=datetime.now(timezone.utc),
        engine_version=ENGINE_VERSION,
        elapsed_seconds=outcome.state.elapsed,
    )


def results_document(outcome: RunOutcome) -> ResultsDocument:
    state, tree = outcome.state, outcome.tree
    history = [
        IterationEntry(
            iter=r.iteration,
            z_L=_finite(r.lower_bound),
            z_U=_finite(r.upper_bound),
            gap=_finite(r.gap),
            opt_cuts=r.optimality_cuts,
            feas_cuts=r.feasibility_cuts,
        )
        for r in state.history
    ]
    policy = [
        NodePolicyEntry(
            node=p.node_id,
            stage=tree.node(p.node_id).stage,
            x=[float(v) for v in p.x],
            stage_cost=p.stage_cost,
            recourse=p.recourse,
            lam=p.lam,
            mu=p.mu,
            mu_bar=p.mu_bar,
            lambda_zero=p.lambda_zero,
        )
        for p in sorted(state.incumbent.values(), key=lambda p: p.node_id)
    ]
    worst = [
        WorstCaseEntry(
            node=w.node_id,
            descendants=list(w.descendants),
            nominal=tree.descendant_probabilities(w.node_id).tolist(),
            probabilities=np.asarray(w.probabilities, dtype=float).tolist(),
            sum_residual=w.sum_residual,
            divergence_residual=w.divergence_residual,
            degenerate=w.degenerate,
        )
        for w in sorted(state.worst_case.values(), key=lambda w: w.node_id)
    ]
    body = ResultsBody(
        instance=outcome.instance,
        divergence=outcome.spec.name,
        layout=outcome.options.layout.value,
        rho=list(tree.rho),
        tol=outcome.options.tol,
        secondary_tol=outcome.options.secondary_tol,
        seed=outcome.seed,
        status=state.status.value,
        converged=state.converged,
        iterations=state.iteration,
        lower_bound=_finite(state.lower_bound),
        upper_bound=_finite(state.upper_bound),
        gap=_finite(state.gap),
        optimality_cuts=state.optimality_cuts,
        feasibility_cuts=state.feasibility_cuts,
        max_sum_residual=max((w.sum_residual for w in worst), default=None),
        max_divergence_residual=max((w.divergence_residual for w in worst), default=None),
        history=history,
        policy=policy,
        worst_case=worst,
    )
    return ResultsDocument(header=_header(outcome), body=body)


def verify_document(outcome: RunOutcome, report: VerifyReport) -> VerifyDocument:
    body = VerifyBody(
        instance=outcome.instance,
        divergence=outcome.spec.name,
        seed=outcome.seed,
        status="PASS" if report.passed else "FAIL",
        engine_status=outcome.state.status.value,
        iterations=outcome.state.iteration,
        bound_discipline=report.bound_discipline,
        detail=report.detail,
        comparisons=[
            ComparisonEntry(**{**c.to_dict(), "z_L": _finite(c.lower_bound), "z_U": _finite(c.upper_bound)})
            for c in report.comparisons
        ],
    )
    return VerifyDocument(header=_header(outcome), body=body)


def _write_json(path: Path, document: BaseModel) -> Path:
    path.write_text(document.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def write_artifacts(
    outcome: RunOutcome,
    out_dir: Union[str, Path],
    report: Optional[VerifyReport] = None,
) -> list[Path]:
    """Write the results document, iteration log, diagnostics and shortage tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = outcome.state
    written = [_write_json(out_dir / RESULTS_FILE, results_document(outcome))]

    log_path = out_dir / ITERATIONS_FILE
    with log_path.open("w", encoding="utf-8") as f:
        for record in state.history:
            f.write(json.dumps({k: _finite(v) if isinstance(v, float) else v for k, v in record.to_dict().items()}) + "\n")
    written.append(log_path)

    if not state.converged:
        diagnostics = DiagnosticsDocument(
            status=state.status.value,
            last_iterations=state.diagnostics.get("last_iterations", [r.to_dict() for r in state.history[-10:]]),
            nodes=state.diagnostics.get("nodes", []),
        )
        written.append(_write_json(out_dir / DIAGNOSTICS_FILE, diagnostics))

    if outcome.water and state.incumbent:
        written.extend(shortage_report(state, outcome.tree).write(out_dir))

    if report is not None:
        written.append(_write_json(out_dir / VERIFY_FILE, verify_document(outcome, report)))

    logger.info(f"Wrote {len(written)} artifacts to {out_dir}")
    return written


def json_schema(name: str) -> dict[str, Any]:
    """JSON Schema of one of the documented file formats."""
    try:
        model = SCHEMA_DOCUMENTS[name]
    except KeyError:
        raise InputError(f"unknown document '{name}'; valid: {', '.join(SCHEMA_DOCUMENTS)}")
    return model.model_json_schema()
