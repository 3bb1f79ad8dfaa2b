from sqlalchemy.orm import Session
from app.models.run import RunRecord, RunStatus
from app.schemas.experiment import ExperimentConfig, RunManifest
from datetime import datetime
from typing import Optional, List


def create_run(db: Session, config: ExperimentConfig, preset: Optional[str] = None) -> RunRecord:
    """Queue a run for the worker"""
    db_run = RunRecord(
        config_hash=config.config_hash,
        preset=preset,
        kind=config.experiment.kind.value,
        config_text=config.canonical_text(),
        status=RunStatus.QUEUED,
        created_at=datetime.utcnow(),
    )
    db.add(db_run)
    db.commit()
    db.refresh(db_run)
    return db_run


def get_run_by_id(db: Session, run_id: int) -> Optional[RunRecord]:
    return db.query(RunRecord).filter(RunRecord.id == run_id).first()


def get_runs_by_hash(db: Session, config_hash: str) -> List[RunRecord]:
    """All runs whose hash starts with `config_hash` (full or 12-character prefix)"""
    return db.query(RunRecord).filter(
        RunRecord.config_hash.startswith(config_hash)
    ).order_by(RunRecord.created_at.desc()).all()


def get_runs(
    db: Session,
    status: Optional[RunStatus] = None,
    skip: int = 0,
    limit: int = 100
) -> List[RunRecord]:
    query = db.query(RunRecord)
    if status is not None:
        query = query.filter(RunRecord.status == status)
    return query.order_by(RunRecord.created_at.desc()).offset(skip).limit(limit).all()


def get_queued_runs(db: Session, limit: int) -> List[RunRecord]:
    """Oldest queued runs first"""
    return db.query(RunRecord).filter(
        RunRecord.status == RunStatus.QUEUED
    ).order_by(RunRecord.created_at.asc()).limit(limit).all()


def mark_running(db: Session, run: RunRecord) -> RunRecord:
    run.status = RunStatus.RUNNING
    run.started_at = datetime.utcnow()
    db.commit()
    db.refresh(run)
    return run


def record_manifest(db: Session, run: RunRecord, manifest: RunManifest) -> RunRecord:
    """Copy the outcome of a finished run into its registry row"""
    run.status = RunStatus.PASSED if manifest.passed else RunStatus.FAILED
    run.output_dir = manifest.output_dir
    run.failure_stage = manifest.failure_stage
    run.error = manifest.error
    run.worst_margin = manifest.worst_margin
    run.finished_at = datetime.utcnow()
    db.commit()
    db.refresh(run)
    return run


def mark_failed(db: Session, run: RunRecord, stage: str, error: str) -> RunRecord:
    run.status = RunStatus.FAILED
    run.failure_stage = stage
    run.error = error
    run.finished_at = datetime.utcnow()
    db.commit()
    db.refresh(run)
    return run
