# app/routes/powerflow.py
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel
from typing import List
from functools import lru_cache
import logging
import numpy as np

from app.services.config import load_run_config
from app.services.errors import ConfigurationError, SolverError
from app.services.grid import InjectionVector, PowerFlowSolver, violation_report
from app.services.harness import build_network

logger = logging.getLogger(__name__)

router = APIRouter()


class PowerFlowRequest(BaseModel):
    # Net consumption per bus (bus 1 first); generation is negative
    p_kw: List[float]
    q_kvar: List[float]


class ViolationItem(BaseModel):
    bus: int  # 1-based
    magnitude: float
    limit: str


class PowerFlowResponse(BaseModel):
    success: bool
    converged: bool
    iterations: int
    max_residual: float
    slack_p_kw: float
    voltages: List[float]
    voltage_limits: List[float]
    violations: List[ViolationItem]


@lru_cache(maxsize=1)
def get_solver() -> PowerFlowSolver:
    """Solver for the network of the service configuration ($SA2CO_CONFIG or defaults)"""
    config = load_run_config()
    network = build_network(config.env)
    logger.info(f"Power-flow service using a {network.bus_count}-bus network")
    return PowerFlowSolver(network)


@router.post("/powerflow", response_model=PowerFlowResponse)
async def solve_powerflow(request: PowerFlowRequest):
    """
    Exact AC power flow on the configured feeder

    Args:
        request: per-bus net consumption in kW / kvar

    Returns:
        Voltage magnitudes (p.u., bus 1 first), slack draw and limit violations
    """
    try:
        solver = get_solver()
        network = solver.network
        if len(request.p_kw) != network.bus_count or len(request.q_kvar) != network.bus_count:
            raise HTTPException(
                status_code=400,
                detail=f"p_kw and q_kvar need {network.bus_count} entries each"
            )

        inj = InjectionVector(
            p=np.asarray(request.p_kw, dtype=float) / network.s_base,
            q=np.asarray(request.q_kvar, dtype=float) / network.s_base,
        )
        if not (np.all(np.isfinite(inj.p)) and np.all(np.isfinite(inj.q))):
            raise HTTPException(status_code=400, detail="Injections must be finite")

        solution = solver.solve(inj)
        if not solution.converged:
            logger.warning(f"Power flow request did not converge (residual {solution.max_residual:.3e})")
            raise HTTPException(
                status_code=422,
                detail=f"Power flow did not converge after {solution.iterations} iterations"
            )

        violations = [
            ViolationItem(bus=v.bus + 1, magnitude=v.magnitude, limit=v.limit)
            for v in violation_report(solution, network.voltage_limits)
        ]
        logger.info(f"Power flow request solved in {solution.iterations} iterations, {len(violations)} violations")
        return PowerFlowResponse(
            success=True,
            converged=True,
            iterations=solution.iterations,
            max_residual=solution.max_residual,
            slack_p_kw=float(solution.slack_p * network.s_base),
            voltages=[float(v) for v in solution.magnitude],
            voltage_limits=list(network.voltage_limits),
            violations=violations,
        )

    except HTTPException:
        raise
    except ConfigurationError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except SolverError as e:
        logger.warning(f"Power flow request failed: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Power flow error: {e}")
        raise HTTPException(status_code=500, detail=str(e))
