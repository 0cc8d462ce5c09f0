# app/routes/runs.py
from fastapi import APIRouter, HTTPException, Depends, Query
from pydantic import BaseModel
from typing import Optional, List
import logging
from sqlalchemy.orm import Session

from app.services.connection import get_db
from app.services.run_registry import RunRegistry
from app.models.models import TrainingRun

logger = logging.getLogger(__name__)

router = APIRouter()


class RunSummary(BaseModel):
    id: int
    run_name: str
    kind: Optional[str] = None
    screening: Optional[str] = None
    seed: Optional[int] = None
    status: Optional[str] = None
    episodes_planned: Optional[int] = None
    episodes_logged: int = 0
    guard_ready_episode: Optional[int] = None
    training_minutes: Optional[float] = None
    output_dir: Optional[str] = None
    error: Optional[str] = None
    created_at: Optional[str] = None


class RunListResponse(BaseModel):
    success: bool
    runs: List[RunSummary]
    total: int


class RunDetailResponse(BaseModel):
    success: bool
    run: RunSummary
    episodes: List[dict]
    evaluations: List[dict]


def _summary(run: TrainingRun) -> RunSummary:
    return RunSummary(
        id=run.id,
        run_name=run.run_name,
        kind=run.kind,
        screening=run.screening,
        seed=run.seed,
        status=run.status,
        episodes_planned=run.episodes_planned,
        episodes_logged=len(run.episodes),
        guard_ready_episode=run.guard_ready_episode,
        training_minutes=run.training_minutes,
        output_dir=run.output_dir,
        error=run.error,
        created_at=run.created_at.isoformat() if run.created_at else None,
    )


@router.get("/runs", response_model=RunListResponse)
async def list_runs(
    limit: int = Query(50, ge=1, le=500),
    offset: int = Query(0, ge=0),
    db: Session = Depends(get_db)
):
    """List registered training and evaluation runs, newest first"""
    try:
        runs = RunRegistry(db).list_runs(limit=limit, offset=offset)
        summaries = [_summary(run) for run in runs]
        return RunListResponse(success=True, runs=summaries, total=len(summaries))

    except Exception as e:
        logger.error(f"List runs error: {e}")
        raise HTTPException(status_code=500, detail=str(e))


@router.get("/runs/{run_id}", response_model=RunDetailResponse)
async def get_run(run_id: int, db: Session = Depends(get_db)):
    """
    One run with its training curve and evaluation results

    Args:
        run_id: Registry id of the run

    Returns:
        Run summary, one entry per logged episode and one per evaluated method
    """
    try:
        run = RunRegistry(db).get_run(run_id)
        if not run:
            raise HTTPException(status_code=404, detail=f"Run {run_id} not found")

        episodes = [
            {
                "episode": e.episode,
                "cum_reward": e.cum_reward,
                "total_cost": e.total_cost,
                "mean_q_loss": e.mean_q_loss,
                "mean_pi_loss": e.mean_pi_loss,
                "unsafe_proposals": e.unsafe_proposals,
                "executed_violations": e.executed_violations,
                "fallback_count": e.fallback_count,
                "guard_ready": bool(e.guard_ready),
            }
            for e in run.episodes
        ]
        evaluations = [
            {
                "method": ev.method,
                "days": ev.days,
                "average_daily_cost": ev.average_daily_cost,
                "improvement_pct": ev.improvement_pct,
                "executed_violations": ev.executed_violations,
                "unsafe_proposals": ev.unsafe_proposals,
                "fallback_count": ev.fallback_count,
                "execution_seconds": ev.execution_seconds,
            }
            for ev in run.evaluations
        ]
        return RunDetailResponse(success=True, run=_summary(run), episodes=episodes, evaluations=evaluations)

    except HTTPException:
        raise
    except Exception as e:
        logger.error(f"Get run {run_id} error: {e}")
        raise HTTPException(status_code=500, detail=str(e))
