import asyncio
import math
from typing import Annotated

from fastapi import APIRouter, Depends

from app.config import Settings, get_settings
from app.core.exceptions import MDROError, to_http_exception
from app.schemas.results import ResultsDocument, VerifyDocument
from app.schemas.run import DivergenceInfo, RhoRequest, RhoResponse, SolveRequest
from app.services.divergence import DivergenceKind, DivergenceSpec, calibrate_rho, parse_divergence
from app.services.reporting import results_document, verify_document
from app.services.runner import solve_tree, verify_tree
from app.services.scenario_tree import from_document

router = APIRouter()

SettingsDep = Annotated[Settings, Depends(get_settings)]


@router.get("/divergences", response_model=list[DivergenceInfo])
async def list_divergences():
    """Supported divergences with their conjugate-domain bound and curvature."""
    entries = []
    for kind in DivergenceKind:
        if kind is DivergenceKind.INTERVAL_CVAR:
            entries.append(DivergenceInfo(name="cvar:kappa,alpha", sbar=None, curvature_at_one=None, feasibility_cuts=False))
            continue
        spec = DivergenceSpec(kind)
        entries.append(
            DivergenceInfo(
                name=spec.name,
                sbar=spec.sbar if math.isfinite(spec.sbar) else None,
                curvature_at_one=spec.curvature_at_one,
                feasibility_cuts=spec.has_feasibility_constraints,
            )
        )
    return entries


@router.post("/rho", response_model=RhoResponse)
async def calibrate(request: RhoRequest):
    """Calibrate ρ from a confidence level, n outcomes and sample size N (defaults to n)."""
    try:
        spec = parse_divergence(request.divergence)
        N = request.N or request.n
        rho = calibrate_rho(spec, request.n, N, 1.0 - request.confidence)
    except MDROError as e:
        raise to_http_exception(e)
    return RhoResponse(divergence=spec.name, n=request.n, N=N, confidence=request.confidence, rho=rho)


@router.post("/solve", response_model=ResultsDocument)
async def solve(request: SolveRequest, settings: SettingsDep):
    """Solve an inline tree and return the results document."""
    try:
        tree = from_document(request.tree)
        outcome = await asyncio.to_thread(solve_tree, tree, request.options, settings)
    except MDROError as e:
        raise to_http_exception(e)
    return results_document(outcome)


@router.post("/verify", response_model=VerifyDocument)
async def verify(request: SolveRequest, settings: SettingsDep):
    """Solve an inline tree and compare it against the applicable oracles."""
    try:
        tree = from_document(request.tree)
        outcome, report = await asyncio.to_thread(verify_tree, tree, request.options, settings)
    except MDROError as e:
        raise to_http_exception(e)
    return verify_document(outcome, report)
