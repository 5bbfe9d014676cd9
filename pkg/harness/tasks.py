from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
import logging
import time
import traceback

import pandas as pd
from billiard import Pool
from celery import group, shared_task
from django.conf import settings

from .experiments import Experiment, get_experiment
from .models import JobRecord, JobSpec, RunConfig
from .serializers import dump_run_config
from .utils import (
    clear_failure_marker,
    config_hash,
    timestamp,
    write_aggregate,
    write_failure_marker,
    write_job_outputs,
)

logger = logging.getLogger(__name__)


def execute_job(experiment: Experiment, config: RunConfig, job: JobSpec, out_dir: Path) -> JobRecord:
    """
    Run one job and persist whatever it produced.

    A job that raises leaves only a ``.FAILED`` marker with the traceback; a
    job that diverges keeps its partial CSV and also gets a marker.

    Returns:
        JobRecord: Status ``'ok'``, ``'diverged'`` or ``'failed'``.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    logger.info("Starting job %s", job.name)
    start = time.perf_counter()
    try:
        output = experiment.runner(config.at(job.cell), job, out_dir)
    except Exception as exc:
        logger.exception("Job %s raised: %s", job.name, exc)
        write_failure_marker(out_dir, job, traceback.format_exc())
        return JobRecord(job, digest, 'failed', wall_clock=time.perf_counter() - start, message=str(exc),
                         code_version=settings.OMD_CODE_VERSION, timestamp=timestamp())

    record = JobRecord(
        job=job,
        config_hash=digest,
        status=output.status,
        summary=experiment.summarise(output.frame),
        wall_clock=time.perf_counter() - start,
        message=output.message,
        code_version=settings.OMD_CODE_VERSION,
        timestamp=timestamp(),
    )
    write_job_outputs(out_dir, record, output.frame, output.extras)
    if record.status == 'ok':
        clear_failure_marker(out_dir, job)
    else:
        write_failure_marker(out_dir, job, record.message or record.status)
    logger.info("Finished job %s in %.1fs (%s): %s", job.name, record.wall_clock, record.status, record.summary)
    return record


def execute_job_payload(config_payload: Dict[str, Any], job_payload: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
    """JSON-in, JSON-out wrapper of :func:`execute_job` for task queues and process pools."""
    config = RunConfig.from_dict(config_payload)
    job = JobSpec.from_dict(job_payload)
    return execute_job(get_experiment(job.experiment), config, job, Path(out_dir)).to_meta()


@shared_task
def run_job(config_payload: Dict[str, Any], job_payload: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
    """
    Celery task running one (sweep cell, agent, seed) job.

    Returns:
        dict: The job's sidecar metadata.
    """
    return execute_job_payload(config_payload, job_payload, out_dir)


def _dispatch(arguments: List[Tuple], workers: int) -> List[Dict[str, Any]]:
    if not settings.CELERY_TASK_ALWAYS_EAGER:
        logger.info("Dispatching %d jobs to the Celery broker", len(arguments))
        return group(run_job.s(*args) for args in arguments).apply_async().get()
    if workers > 1 and len(arguments) > 1:
        logger.info("Running %d jobs on %d local processes", len(arguments), min(workers, len(arguments)))
        with Pool(processes=min(workers, len(arguments))) as pool:
            return pool.starmap(execute_job_payload, arguments)
    logger.info("Running %d jobs in process", len(arguments))
    return [run_job.delay(*args).get() for args in arguments]


def run_experiment(config: RunConfig, out_dir: Optional[Union[str, Path]] = None,
                   workers: Optional[int] = None) -> Tuple[List[JobRecord], Optional[pd.DataFrame]]:
    """
    Run every job of ``config`` and aggregate the successful ones.

    Writes ``config.yaml``, one ``<job>.csv`` (plus sidecar) per job and
    ``<experiment>_aggregate.csv`` into ``out_dir`` (default
    ``OMD_OUTPUT_ROOT/<experiment>``). Per-job files depend only on the config
    and the job's seed, so re-running reproduces them exactly.

    Returns:
        Tuple[List[JobRecord], Optional[pd.DataFrame]]: The job records and the
        aggregate table, or ``None`` when no job succeeded.
    """
    experiment = get_experiment(config.experiment)
    out_dir = Path(out_dir) if out_dir is not None else Path(settings.OMD_OUTPUT_ROOT) / experiment.name
    workers = workers or settings.OMD_WORKERS
    jobs = experiment.jobs(config)
    logger.info("Running %s: %d jobs, %s workers, output %s", experiment.name, len(jobs), workers, out_dir)

    dump_run_config(config, out_dir / 'config.yaml')
    payload = config.to_dict()
    metas = _dispatch([(payload, job.to_dict(), str(out_dir)) for job in jobs], workers)
    records = [JobRecord.from_meta(meta) for meta in metas]

    failures = [record.job.name for record in records if record.status != 'ok']
    if failures:
        logger.warning("%d of %d jobs did not finish cleanly: %s", len(failures), len(records), failures)
    if len(failures) == len(records):
        logger.error("No job of %s succeeded; skipping aggregation", experiment.name)
        return records, None
    summary = write_aggregate(records, out_dir / f'{experiment.name}_aggregate.csv')
    return records, summary
