import tempfile
from io import StringIO
from pathlib import Path

import pandas as pd
import yaml
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from pandas.testing import assert_frame_equal

FIG3 = {
    'experiment': 'fig3',
    'agents': ['omd_return', 'mle'],
    'env': 'default',
    'seeds': [0, 1, 2, 3],
    'tabular_steps': 2,
    'use_identity_inverse': False,
    'sweep': {'kappa': [1.0]},
}


def write_config(directory: Path, **overrides) -> Path:
    path = directory / 'run.yaml'
    path.write_text(yaml.safe_dump({**FIG3, **overrides}), encoding='utf-8')
    return path


class ListExperimentsTestCase(SimpleTestCase):

    def test_lists_every_experiment(self):
        """Each named experiment is printed with its agents."""
        out = StringIO()
        call_command('list_experiments', stdout=out)
        for name in ('fig3', 'fig2_right', 'lemma', 'appendix_c', 'fig5_distractors', 'cartpole'):
            self.assertIn(name, out.getvalue())
        self.assertIn('omd_return, omd_bellman, mle', out.getvalue())


class RunCommandTestCase(SimpleTestCase):

    def test_run_and_aggregate(self):
        """``run`` writes job files and an aggregate that ``aggregate`` reproduces from the sidecars."""
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            out = StringIO()
            call_command('run', 'fig3', '--config', str(write_config(tmp)), '--out', str(tmp / 'results'),
                         stdout=out, stderr=StringIO())
            self.assertEqual(len(list((tmp / 'results').glob('fig3__*.csv'))), 8)
            self.assertIn('J_mean', out.getvalue())
            self.assertIn('8 of 8 jobs succeeded', out.getvalue())

            call_command('aggregate', '--in', str(tmp / 'results'), '--out', str(tmp / 'summary.csv'),
                         stdout=StringIO())
            assert_frame_equal(pd.read_csv(tmp / 'summary.csv'), pd.read_csv(tmp / 'results' / 'fig3_aggregate.csv'))

    def test_fast_keeps_three_seeds(self):
        """``--fast`` trims the seed list to three."""
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            call_command('run', 'fig3', '--config', str(write_config(tmp, agents=['mle'])), '--fast',
                         '--out', str(tmp / 'results'), stdout=StringIO(), stderr=StringIO())
            seeds = sorted(path.name.rsplit('seed', 1)[1] for path in (tmp / 'results').glob('fig3__*.csv'))
        self.assertEqual(seeds, ['0.csv', '1.csv', '2.csv'])

    def test_invalid_config(self):
        """Field-level problems surface as a command error naming the field."""
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(Path(tmp), gamma=2.0)
            with self.assertRaisesMessage(CommandError, 'gamma'):
                call_command('run', 'fig3', '--config', str(path), '--out', tmp, stdout=StringIO())

    def test_rejected_invocations(self):
        """Unknown experiments, missing files, mismatched configs and bad worker counts are refused."""
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(Path(tmp))
            with self.assertRaises(CommandError):
                call_command('run', 'fig9', '--config', str(path), stdout=StringIO())
            with self.assertRaises(CommandError):
                call_command('run', 'fig3', '--config', str(Path(tmp) / 'missing.yaml'), stdout=StringIO())
            with self.assertRaisesMessage(CommandError, 'appendix_c'):
                call_command('run', 'appendix_c', '--config', str(path), stdout=StringIO())
            with self.assertRaises(CommandError):
                call_command('run', 'fig3', '--config', str(path), '--workers', '0', stdout=StringIO())

    def test_aggregate_needs_records(self):
        """Aggregating a directory without job sidecars fails."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError):
                call_command('aggregate', '--in', tmp, '--out', str(Path(tmp) / 'x.csv'), stdout=StringIO())
