import json
import random
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings
from pandas.testing import assert_frame_equal

from harness.models import JobRecord, JobSpec, RunConfig
from harness.utils import (
    aggregate,
    config_hash,
    read_job_records,
    sidecar_path,
    standard_error,
    write_aggregate,
    write_job_outputs,
)


def record(value: float, seed: int = 0, kappa: float = 1.0, agent: str = 'mle', digest: str = 'abc',
           status: str = 'ok', experiment: str = 'fig3') -> JobRecord:
    return JobRecord(JobSpec(experiment, agent, seed, {'kappa': kappa}), digest, status, {'J': value})


class AggregateTestCase(SimpleTestCase):

    def test_two_seeds(self):
        """Values 1 and 3 give mean 2 and standard error 1."""
        summary = aggregate([record(1.0, seed=0), record(3.0, seed=1)])
        self.assertEqual(list(summary.columns), ['kappa', 'agent', 'J_mean', 'J_stderr'])
        self.assertEqual(summary.loc[0, 'J_mean'], 2.0)
        self.assertAlmostEqual(summary.loc[0, 'J_stderr'], 1.0, places=12)

    def test_single_seed_warns(self):
        """A lone seed reports zero standard error and logs a warning."""
        with self.assertLogs('harness.utils', level='WARNING') as logs:
            summary = aggregate([record(5.0)])
        self.assertEqual(summary.loc[0, 'J_stderr'], 0.0)
        self.assertTrue(any('single seed' in line for line in logs.output))

    def test_order_independent(self):
        """Shuffling the records leaves the summary unchanged."""
        rng = np.random.default_rng(0)
        records = [record(float(rng.normal()), seed, kappa, agent)
                   for kappa in (0.5, 2.0, 10.0) for agent in ('mle', 'omd_return') for seed in range(4)]
        expected = aggregate(records)
        shuffled = list(records)
        random.Random(1).shuffle(shuffled)
        assert_frame_equal(aggregate(shuffled), expected)
        self.assertEqual(expected['kappa'].tolist(), [0.5, 0.5, 2.0, 2.0, 10.0, 10.0])
        self.assertEqual(expected['agent'].tolist(), ['mle', 'omd_return'] * 3)

    def test_mismatched_configs(self):
        """Records of different configs or experiments refuse to aggregate."""
        with self.assertRaises(ValidationError):
            aggregate([record(1.0, digest='abc'), record(2.0, seed=1, digest='def')])
        with self.assertRaises(ValidationError):
            aggregate([record(1.0), record(2.0, seed=1, experiment='appendix_c')])
        with self.assertRaises(ValidationError):
            aggregate([])

    def test_unsuccessful_jobs_are_skipped(self):
        """Diverged or failed jobs do not enter the averages."""
        summary = aggregate([record(1.0), record(3.0, seed=1), record(100.0, seed=2, status='diverged')])
        self.assertEqual(summary.loc[0, 'J_mean'], 2.0)
        with self.assertRaises(ValidationError):
            aggregate([record(1.0, status='failed')])

    def test_standard_error(self):
        """Standard error uses the sample deviation."""
        self.assertAlmostEqual(standard_error(np.array([2.0, 4.0, 6.0])), 2.0 / np.sqrt(3), places=12)
        self.assertEqual(standard_error(np.array([3.0])), 0.0)


class ConfigHashTestCase(SimpleTestCase):

    def test_seeds_do_not_change_hash(self):
        """Adding seeds keeps the hash; changing a hyperparameter does not."""
        base = RunConfig('fig3', ('mle',), seeds=(0,), sweep={'kappa': [1.0]})
        self.assertEqual(config_hash(base), config_hash(RunConfig('fig3', ('mle',), seeds=(0, 1, 2),
                                                                  sweep={'kappa': [1.0]})))
        self.assertNotEqual(config_hash(base), config_hash(RunConfig('fig3', ('mle',), seeds=(0,),
                                                                     sweep={'kappa': [2.0]})))
        self.assertEqual(len(config_hash(base)), 64)


@override_settings(OMD_CODE_VERSION='omdlab-test')
class JobOutputTestCase(SimpleTestCase):

    def test_sidecars_and_reading_back(self):
        """Job CSVs carry a header and sidecar; only job sidecars are read back as records."""
        job_record = record(0.25, seed=3)
        frame = pd.DataFrame({'step': [0, 1], 'J': [0.1, 0.25]})
        with tempfile.TemporaryDirectory() as tmp:
            path = write_job_outputs(tmp, job_record, frame, {'trace': pd.DataFrame({'t': [0]})})
            self.assertEqual(path.name, 'fig3__kappa=1.0__mle__seed3.csv')
            self.assertEqual(path.read_text(encoding='utf-8').splitlines()[0], 'step,J')
            meta = json.loads(sidecar_path(path).read_text(encoding='utf-8'))
            self.assertEqual(meta['config_hash'], 'abc')
            self.assertEqual(meta['code_version'], 'omdlab-test')
            self.assertIn('timestamp', meta)
            self.assertTrue((Path(tmp) / 'fig3__kappa=1.0__mle__seed3.trace.csv').is_file())

            write_aggregate([job_record], Path(tmp) / 'fig3_aggregate.csv')
            records = read_job_records(tmp)
        self.assertEqual(len(records), 1)
        self.assertEqual(records[0].job, job_record.job)
        self.assertEqual(records[0].summary, {'J': 0.25})
