from fastapi import HTTPException, status
import logging

from app.core.exceptions import ConfigError
from app.schemas.experiment import ExperimentConfig
from app.services import harness

logger = logging.getLogger(__name__)


def get_preset_config(preset: str) -> ExperimentConfig:
    """Resolve a shipped preset or answer 404"""
    if preset not in harness.list_presets():
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Preset '{preset}' not found",
        )
    try:
        return harness.load_preset(preset)
    except ConfigError as e:
        logger.error(f"Preset {preset} does not parse: {e}")
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=str(e),
        )
