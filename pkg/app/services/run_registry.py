# app/services/run_registry.py
from sqlalchemy.orm import Session
from typing import Any, Dict, List, Optional
import logging

from app.models.models import TrainingRun, EpisodeRecord, EvaluationRecord
from app.services.connection import get_db_context

logger = logging.getLogger(__name__)


class RunRegistry:
    """Reads and writes run records in the SQL registry"""

    def __init__(self, db: Session):
        self.db = db

    def start_run(
        self,
        run_name: str,
        kind: str,
        screening: str,
        seed: int,
        episodes_planned: int,
        output_dir: str,
        config: Dict[str, Any],
    ) -> TrainingRun:
        run = TrainingRun(
            run_name=run_name,
            kind=kind,
            screening=screening,
            seed=seed,
            episodes_planned=episodes_planned,
            output_dir=output_dir,
            config=config,
            status='running',
        )
        self.db.add(run)
        self.db.commit()
        self.db.refresh(run)
        logger.info(f"Registered {kind} run {run.id} ({run_name}, screening={screening}, seed={seed})")
        return run

    def record_episode(self, run_id: int, row: Dict[str, Any]) -> EpisodeRecord:
        """
        Store one training-curve row

        Args:
            run_id: Registry id of the run
            row: Training-curve row (episode, cum_reward, mean_q_loss, ...)
        """
        record = EpisodeRecord(
            run_id=run_id,
            episode=int(row["episode"]),
            cum_reward=_maybe_float(row.get("cum_reward")),
            total_cost=_maybe_float(row.get("total_cost")),
            mean_q_loss=_maybe_float(row.get("mean_q_loss")),
            mean_pi_loss=_maybe_float(row.get("mean_pi_loss")),
            unsafe_proposals=int(row.get("unsafe_proposals", 0)),
            executed_violations=int(row.get("executed_violations", 0)),
            fallback_count=int(row.get("fallback_count", 0)),
            guard_ready=bool(row.get("guard_ready", False)),
        )
        self.db.add(record)
        self.db.commit()
        return record

    def record_evaluation(self, run_id: int, method: str, report: Dict[str, Any]) -> EvaluationRecord:
        record = EvaluationRecord(
            run_id=run_id,
            method=method,
            days=int(report.get("days", 0)),
            average_daily_cost=_maybe_float(report.get("average_daily_cost")),
            improvement_pct=_maybe_float(report.get("improvement_pct")),
            executed_violations=int(report.get("executed_violations", 0)),
            unsafe_proposals=int(report.get("unsafe_proposals", 0)),
            fallback_count=int(report.get("fallback_count", 0)),
            execution_seconds=_maybe_float(report.get("mean_decision_seconds")),
        )
        self.db.add(record)
        self.db.commit()
        return record

    def finish_run(self, run_id: int, status: str, **fields) -> Optional[TrainingRun]:
        run = self.get_run(run_id)
        if not run:
            return None
        run.status = status
        for key, value in fields.items():
            setattr(run, key, value)
        self.db.commit()
        logger.info(f"Run {run_id} marked {status}")
        return run

    def list_runs(self, limit: int = 50, offset: int = 0) -> List[TrainingRun]:
        return (
            self.db.query(TrainingRun)
            .order_by(TrainingRun.id.desc())
            .offset(offset)
            .limit(limit)
            .all()
        )

    def get_run(self, run_id: int) -> Optional[TrainingRun]:
        return self.db.query(TrainingRun).filter(TrainingRun.id == run_id).first()


def _maybe_float(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if value == value else None  # NaN -> NULL


class RegistryRecorder:
    """Best-effort registry writes for long runs: failures are logged, never raised"""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.run_id: Optional[int] = None

    def _call(self, action: str, fn):
        if not self.enabled:
            return None
        try:
            with get_db_context() as db:
                return fn(RunRegistry(db))
        except Exception as e:
            logger.error(f"Run registry {action} failed, continuing without it: {e}")
            self.enabled = False
            return None

    def start(self, **fields) -> Optional[int]:
        self.run_id = self._call("start", lambda registry: registry.start_run(**fields).id)
        return self.run_id

    def episode(self, row: Dict[str, Any]):
        if self.run_id is not None:
            self._call("episode", lambda registry: registry.record_episode(self.run_id, row))

    def evaluation(self, method: str, report: Dict[str, Any]):
        if self.run_id is not None:
            self._call("evaluation", lambda registry: registry.record_evaluation(self.run_id, method, report))

    def finish(self, status: str, **fields):
        if self.run_id is not None:
            self._call("finish", lambda registry: registry.finish_run(self.run_id, status, **fields))
