from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import hashlib
import json
import logging

import numpy as np
import pandas as pd
import yaml
from django.conf import settings
from django.core.exceptions import ValidationError
from django.utils import timezone

from .models import JobRecord, JobSpec, RunConfig, format_cell_value

logger = logging.getLogger(__name__)

META_SUFFIX = '.meta.json'
FAILED_SUFFIX = '.FAILED'


def config_hash(config: RunConfig) -> str:
    """
    SHA-256 of the canonical YAML dump of ``config``.

    Seeds are left out so that runs extended with more seeds still aggregate
    with the ones already on disk.
    """
    payload = config.to_dict()
    payload.pop('seeds')
    canonical = yaml.safe_dump(payload, sort_keys=True, default_flow_style=True)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def sidecar_path(csv_path: Union[str, Path]) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.name + META_SUFFIX)


def timestamp() -> str:
    return timezone.now().isoformat()


def write_frame(frame: pd.DataFrame, path: Union[str, Path], meta: Dict[str, Any]) -> Path:
    """Write ``frame`` as UTF-8 CSV with a header row and ``meta`` as its JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding='utf-8')
    meta = {**meta, 'code_version': settings.OMD_CODE_VERSION, 'timestamp': meta.get('timestamp') or timestamp()}
    with sidecar_path(path).open('w', encoding='utf-8') as handle:
        json.dump(meta, handle, indent=2, sort_keys=True, default=str)
    logger.debug("Wrote %d rows to %s", len(frame), path)
    return path


def write_failure_marker(out_dir: Union[str, Path], job: JobSpec, text: str) -> Path:
    """``<job>.FAILED`` holding the traceback or divergence message."""
    marker = Path(out_dir) / f'{job.name}{FAILED_SUFFIX}'
    marker.parent.mkdir(parents=True, exist_ok=True)
    marker.write_text(text, encoding='utf-8')
    logger.error("Job %s failed; see %s", job.name, marker)
    return marker


def clear_failure_marker(out_dir: Union[str, Path], job: JobSpec) -> None:
    (Path(out_dir) / f'{job.name}{FAILED_SUFFIX}').unlink(missing_ok=True)


def write_job_outputs(out_dir: Union[str, Path], record: JobRecord, frame: pd.DataFrame,
                      extras: Optional[Dict[str, pd.DataFrame]] = None) -> Path:
    """
    Persist one job: ``<job>.csv`` with its sidecar, plus ``<job>.<extra>.csv`` per extra table.

    Returns:
        Path: The main CSV.
    """
    out_dir = Path(out_dir)
    path = write_frame(frame, out_dir / f'{record.job.name}.csv', record.to_meta())
    for label, table in (extras or {}).items():
        write_frame(table, out_dir / f'{record.job.name}.{label}.csv',
                    {'kind': label, **record.job.to_dict(), 'config_hash': record.config_hash})
    return path


def read_job_records(directory: Union[str, Path]) -> List[JobRecord]:
    """Every job sidecar under ``directory``, in file-name order."""
    records = []
    for path in sorted(Path(directory).glob(f'*{META_SUFFIX}')):
        with path.open('r', encoding='utf-8') as handle:
            meta = json.load(handle)
        if meta.get('kind') == 'job':
            records.append(JobRecord.from_meta(meta))
    logger.info("Read %d job records from %s", len(records), directory)
    return records


def _sort_key(value: Any) -> Tuple[int, Any]:
    if isinstance(value, (bool, int, float, np.integer, np.floating)):
        return 0, float(value)
    return 1, format_cell_value(value)


def standard_error(values: np.ndarray) -> float:
    """Sample standard deviation (``ddof=1``) over ``sqrt(n)``; zero for a single value."""
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def aggregate(records: Sequence[JobRecord]) -> pd.DataFrame:
    """
    Mean and standard error of every summary metric per (sweep cell, agent).

    Only jobs that finished with status ``'ok'`` contribute. The result does not
    depend on the order of ``records``: cells are sorted by value, agents by
    name, and seeds by number before any sum is taken.

    Returns:
        pd.DataFrame: One row per cell and agent; columns are the sweep keys,
        ``agent`` and ``<metric>_mean`` / ``<metric>_stderr`` per metric.

    Raises:
        ValidationError: If the records are empty or come from different
            experiments or configs.
    """
    if not records:
        raise ValidationError("Nothing to aggregate.")
    experiments = sorted({record.job.experiment for record in records})
    if len(experiments) > 1:
        raise ValidationError(f"Records from several experiments cannot be aggregated together: {experiments}.")
    hashes = sorted({record.config_hash for record in records})
    if len(hashes) > 1:
        raise ValidationError(f"Records were produced by {len(hashes)} different configs; aggregate them separately.")

    usable = [record for record in records if record.status == 'ok']
    if len(usable) < len(records):
        skipped = sorted(record.job.name for record in records if record.status != 'ok')
        logger.warning("Skipping %d unsuccessful jobs: %s", len(skipped), skipped)
    if not usable:
        raise ValidationError("No job finished successfully.")

    cell_keys = list(usable[0].job.cell)
    metrics = sorted({metric for record in usable for metric in record.summary})
    groups: Dict[Tuple, List[JobRecord]] = {}
    for record in usable:
        key = tuple(_sort_key(record.job.cell[name]) for name in cell_keys) + ((1, record.job.agent),)
        groups.setdefault(key, []).append(record)

    rows = []
    seed_counts = set()
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda record: record.job.seed)
        first = members[0].job
        seed_counts.add(len(members))
        if len(members) == 1:
            logger.warning("Cell %s / %s has a single seed; standard error reported as 0", first.cell_label, first.agent)
        row = {name: first.cell[name] for name in cell_keys}
        row['agent'] = first.agent
        for metric in metrics:
            values = np.array([record.summary.get(metric, np.nan) for record in members], dtype=np.float64)
            row[f'{metric}_mean'] = float(np.mean(values))
            row[f'{metric}_stderr'] = standard_error(values)
        rows.append(row)
    if len(seed_counts) > 1:
        logger.warning("Cells were aggregated over different seed counts: %s", sorted(seed_counts))

    columns = cell_keys + ['agent'] + [f'{metric}_{stat}' for metric in metrics for stat in ('mean', 'stderr')]
    return pd.DataFrame(rows, columns=columns)


def write_aggregate(records: Sequence[JobRecord], path: Union[str, Path]) -> pd.DataFrame:
    """Aggregate ``records`` and write the table with its sidecar."""
    summary = aggregate(records)
    first = records[0]
    write_frame(summary, path, {
        'kind': 'aggregate',
        'experiment': first.job.experiment,
        'config_hash': first.config_hash,
        'n_jobs': len(records),
    })
    logger.info("Wrote aggregate of %d jobs to %s", len(records), path)
    return summary
