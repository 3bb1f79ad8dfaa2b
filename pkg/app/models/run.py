from sqlalchemy import Column, String, Text, Integer, Float, DateTime, Enum as SQLEnum
from datetime import datetime
from enum import Enum
from app.db.session import Base


class RunStatus(str, Enum):
    """Run lifecycle in the registry"""
    QUEUED = "queued"
    RUNNING = "running"
    PASSED = "passed"
    FAILED = "failed"


class RunRecord(Base):
    """One queued or finished experiment run, keyed by its config hash"""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    config_hash = Column(String(64), nullable=False, index=True)
    preset = Column(String(100), nullable=True)
    kind = Column(String(40), nullable=False)
    config_text = Column(Text, nullable=False)

    status = Column(SQLEnum(RunStatus), default=RunStatus.QUEUED, nullable=False, index=True)
    output_dir = Column(String(500), nullable=True)
    failure_stage = Column(String(40), nullable=True)
    error = Column(Text, nullable=True)
    worst_margin = Column(Float, nullable=True)

    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)
    started_at = Column(DateTime, nullable=True)
    finished_at = Column(DateTime, nullable=True)

    def __repr__(self):
        return f"<RunRecord(id={self.id}, kind={self.kind}, hash={self.config_hash[:12]}, status={self.status})>"
