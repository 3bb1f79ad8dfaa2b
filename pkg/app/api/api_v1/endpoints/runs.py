from fastapi import APIRouter, Depends, HTTPException, status, Query, Body
from sqlalchemy.orm import Session
from typing import List, Optional
import logging

from app.api.deps import get_preset_config
from app.core.exceptions import LabError
from app.crud import run as crud_run
from app.db.session import get_db
from app.models.run import RunStatus
from app.schemas.experiment import PresetResponse, RunRecordResponse, RunRequest
from app.services import harness

logger = logging.getLogger(__name__)
router = APIRouter()


@router.get("/presets", response_model=List[PresetResponse], tags=["Presets"])
async def list_presets():
    """Shipped experiment presets with their config hashes"""
    out = []
    for name in harness.list_presets():
        config = get_preset_config(name)
        out.append(PresetResponse(
            name=name,
            kind=config.experiment.kind.value,
            description=config.experiment.description,
            config_hash=config.config_hash,
        ))
    return out


@router.post(
    "/runs",
    response_model=RunRecordResponse,
    status_code=status.HTTP_201_CREATED,
    tags=["Runs"],
)
async def enqueue_run(
    request: RunRequest = Body(...),
    db: Session = Depends(get_db),
):
    """
    Queue a preset for the run-queue worker.

    An optional hbar list replaces the preset's [physics] hbar.
    """
    config = get_preset_config(request.preset)
    try:
        if request.hbar is not None:
            config = config.with_overrides("physics", hbar=request.hbar)
    except LabError as e:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=str(e),
        )
    record = crud_run.create_run(db, config, preset=request.preset)
    logger.info(f"Queued run {record.id}: preset {request.preset}, hash {config.short_hash}")
    return record


@router.get("/runs", response_model=List[RunRecordResponse], tags=["Runs"])
async def list_runs(
    status_filter: Optional[RunStatus] = Query(None, alias="status"),
    skip: int = Query(0, ge=0),
    limit: int = Query(100, ge=1, le=1000),
    db: Session = Depends(get_db),
):
    return crud_run.get_runs(db, status=status_filter, skip=skip, limit=limit)


@router.get("/runs/{config_hash}", response_model=List[RunRecordResponse], tags=["Runs"])
async def get_runs_for_hash(
    config_hash: str,
    db: Session = Depends(get_db),
):
    """Runs whose config hash starts with `config_hash`"""
    if len(config_hash) < 6:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="Give at least 6 characters of the config hash",
        )
    records = crud_run.get_runs_by_hash(db, config_hash)
    if not records:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"No runs for config {config_hash}",
        )
    return records
