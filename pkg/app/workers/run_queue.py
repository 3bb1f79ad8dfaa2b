"""
Run Queue Worker

A standalone background worker that polls the run registry for QUEUED runs
and executes them, at most MAX_PARALLEL_RUNS at a time.

Flow:
    1. Every RUN_QUEUE_POLL_SECONDS, fetch up to MAX_PARALLEL_RUNS queued runs.
    2. Mark each RUNNING and execute its stored config in a worker process
       (in-process when MAX_PARALLEL_RUNS is 1).
    3. Copy the run manifest back into the registry as PASSED or FAILED.
       A crash in one run is recorded against that run only.

Usage:
    python -m app.workers.run_queue
"""

import sys
import time
import logging
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from typing import Optional

# Ensure the app package is importable when running as __main__
sys.path.insert(0, ".")

from app.core.config import settings
from app.crud import run as crud_run
from app.db.session import Base, SessionLocal, engine
from app.schemas.experiment import ExperimentConfig, RunManifest

logger = logging.getLogger("run_queue")


def execute_config_text(config_text: str) -> str:
    """Worker-process entry point: run one config, return the manifest as JSON"""
    from app.services.harness import run

    return run(ExperimentConfig.from_ini(config_text)).model_dump_json()


def process_queue_once(max_parallel: Optional[int] = None) -> int:
    """
    Execute one batch of queued runs.

    Returns the number of runs finished in this cycle.
    """
    max_parallel = max_parallel or settings.MAX_PARALLEL_RUNS
    db = SessionLocal()
    finished = 0

    try:
        queued = crud_run.get_queued_runs(db, limit=max_parallel)
        if not queued:
            logger.debug("No queued runs found.")
            return 0

        logger.info(f"Found {len(queued)} queued run(s), starting...")
        for record in queued:
            crud_run.mark_running(db, record)

        if max_parallel == 1:
            results = {}
            for record in queued:
                try:
                    results[record.id] = execute_config_text(record.config_text)
                except Exception as e:
                    results[record.id] = e
        else:
            with ProcessPoolExecutor(max_workers=max_parallel) as pool:
                futures = {record.id: pool.submit(execute_config_text, record.config_text) for record in queued}
                results = {}
                for run_id, future in futures.items():
                    try:
                        results[run_id] = future.result()
                    except Exception as e:
                        results[run_id] = e

        for record in queued:
            outcome = results[record.id]
            try:
                if isinstance(outcome, Exception):
                    logger.error(f"Run {record.id} ({record.kind}) crashed: {outcome}")
                    crud_run.mark_failed(db, record, "worker", str(outcome))
                else:
                    manifest = RunManifest.model_validate_json(outcome)
                    crud_run.record_manifest(db, record, manifest)
                    logger.info(f"Run {record.id} ({record.kind}) {'PASSED' if manifest.passed else 'FAILED'}")
                finished += 1
            except Exception as e:
                logger.error(f"Error recording run {record.id}: {e}")
                db.rollback()

    except Exception as e:
        logger.exception(f"Unexpected error during queue cycle: {e}")
    finally:
        db.close()

    return finished


def run_queue_worker():
    """Main loop: drain the queue every RUN_QUEUE_POLL_SECONDS."""
    interval = settings.RUN_QUEUE_POLL_SECONDS
    Base.metadata.create_all(bind=engine)

    logger.info("=" * 60)
    logger.info("Run Queue Worker starting...")
    logger.info(f"Poll interval: {interval} seconds, parallel runs: {settings.MAX_PARALLEL_RUNS}")
    logger.info("=" * 60)

    while True:
        cycle_start = datetime.utcnow()
        logger.info(f"[{cycle_start.strftime('%H:%M:%S')}] Checking run queue...")
        try:
            done = process_queue_once()
            logger.info(f"Queue cycle complete, {done} run(s) finished. Next check in {interval}s.")
        except Exception as e:
            logger.exception(f"Queue cycle failed: {e}")
        time.sleep(interval)


if __name__ == "__main__":
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    run_queue_worker()
