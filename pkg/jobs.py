# jobs.py
"""
Job registry: runs one named job with run-ledger bookkeeping and log banners.

A job function takes the ledger run id (None when the ledger is off) as its
first argument and returns a meta dict stored with the finished run.
"""
import logging
import sys
from typing import Any, Callable, Dict, Optional

from config import log_level, output_dir, runs_database_url
from db import finish_run, start_run
from errors import MimError

logger = logging.getLogger(__name__)

JobFn = Callable[..., Optional[Dict[str, Any]]]


def trigger_job(job_name: str, fn: JobFn, *args: Any, label: str = "", **kwargs: Any) -> Dict[str, Any]:
    """
    Run `fn(run_id, *args, **kwargs)` between STARTED and FINISHED/ERROR banners.

    Failures are recorded on the run (status 'error', category and message in
    meta) and re-raised.
    """
    if not job_name:
        raise ValueError("Missing job_name.")
    banner = job_name.upper().replace("-", " ")
    logger.info("=== %s JOB STARTED ===", banner)
    logger.info("python: %s", sys.version.split()[0])
    # never log the URL itself
    logger.info("MIM_RUNS_DATABASE_URL set: %s", bool(runs_database_url()))
    logger.info("MIM_OUTPUT_DIR: %s", output_dir())
    logger.info("MIM_LOG_LEVEL: %s", log_level())

    run_id = start_run(job_name, label)
    try:
        meta = fn(run_id, *args, **kwargs) or {}
    except Exception as e:
        logger.error("=== %s JOB ERROR ===", banner)
        logger.debug("traceback", exc_info=True)
        category = e.category if isinstance(e, MimError) else "internal"
        finish_run(run_id, "error", meta={"error": str(e), "category": category})
        raise
    finish_run(run_id, "ok", meta=meta)
    logger.info("=== %s JOB FINISHED OK ===", banner)
    return {"ok": True, "run_id": run_id, "meta": meta}
