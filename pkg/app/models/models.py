# app/models/models.py
from sqlalchemy import Column, Integer, DateTime, ForeignKey, Text, Float, Boolean, JSON, Index
from sqlalchemy.orm import declarative_base, relationship
from datetime import datetime, timezone

Base = declarative_base()


class TrainingRun(Base):
    __tablename__ = 'training_runs'

    id = Column(Integer, primary_key=True, index=True)
    run_name = Column(Text, nullable=False, index=True)
    kind = Column(Text, default='train')  # train | execute | baseline
    screening = Column(Text, default='guard')  # guard | acpf | none
    seed = Column(Integer, default=0)
    status = Column(Text, default='running')  # running | finished | aborted
    episodes_planned = Column(Integer, default=0)
    output_dir = Column(Text)
    config = Column(JSON)
    error = Column(Text)
    guard_ready_episode = Column(Integer)
    training_minutes = Column(Float)
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
    updated_at = Column(DateTime, default=lambda: datetime.now(timezone.utc), onupdate=lambda: datetime.now(timezone.utc))

    # Relationships
    episodes = relationship("EpisodeRecord", back_populates="run", cascade="all, delete-orphan",
                            order_by="EpisodeRecord.episode")
    evaluations = relationship("EvaluationRecord", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<TrainingRun(id={self.id}, run_name='{self.run_name}', status='{self.status}')>"


class EpisodeRecord(Base):
    __tablename__ = 'episode_records'

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey('training_runs.id', ondelete='CASCADE'), nullable=False)
    episode = Column(Integer, nullable=False)
    cum_reward = Column(Float)
    total_cost = Column(Float)
    mean_q_loss = Column(Float)
    mean_pi_loss = Column(Float)
    unsafe_proposals = Column(Integer, default=0)
    executed_violations = Column(Integer, default=0)
    fallback_count = Column(Integer, default=0)
    guard_ready = Column(Boolean, default=False)
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))

    # Relationship
    run = relationship("TrainingRun", back_populates="episodes")

    __table_args__ = (
        Index('idx_episode_run_episode', 'run_id', 'episode'),
    )

    def __repr__(self):
        return f"<EpisodeRecord(run_id={self.run_id}, episode={self.episode}, cum_reward={self.cum_reward})>"


class EvaluationRecord(Base):
    __tablename__ = 'evaluation_records'

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey('training_runs.id', ondelete='CASCADE'), nullable=False)
    method = Column(Text, nullable=False)
    days = Column(Integer, default=0)
    average_daily_cost = Column(Float)
    improvement_pct = Column(Float)
    executed_violations = Column(Integer, default=0)
    unsafe_proposals = Column(Integer, default=0)
    fallback_count = Column(Integer, default=0)
    execution_seconds = Column(Float)
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))

    # Relationship
    run = relationship("TrainingRun", back_populates="evaluations")

    def __repr__(self):
        return f"<EvaluationRecord(run_id={self.run_id}, method='{self.method}', cost={self.average_daily_cost})>"
