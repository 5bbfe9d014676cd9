import dataclasses
import itertools
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
from django.conf import settings
from django.test import SimpleTestCase
from pandas.testing import assert_frame_equal

from funcapprox.models import AgentKind, RunRecord
from harness.models import RunConfig
from harness.serializers import load_run_config
from harness.tasks import run_experiment
from envs.tabular import default_two_state_mdp
from mdp_core.exceptions import NumericalError
from mdp_core.operators import optimal_return


def tiny_fig3(**overrides) -> RunConfig:
    payload = {
        'experiment': 'fig3',
        'agents': ['omd_return', 'mle'],
        'env': 'default',
        'seeds': [0, 1],
        'tabular_steps': 3,
        'use_identity_inverse': False,
        'sweep': {'kappa': [0.5, 5.0]},
    }
    payload.update(overrides)
    return RunConfig.from_dict(payload)


class InlinePool:
    """Stands in for a process pool and runs everything in this process."""

    sizes = []

    def __init__(self, processes: int):
        self.sizes.append(processes)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        return False

    def starmap(self, function, arguments):
        return list(itertools.starmap(function, arguments))


class RunExperimentTestCase(SimpleTestCase):

    def test_tabular_sweep_outputs(self):
        """A kappa sweep writes one CSV and sidecar per job, the config and the aggregate."""
        config = tiny_fig3()
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            records, summary = run_experiment(config, out, workers=1)
            job_files = sorted(path.name for path in out.glob('fig3__*.csv'))
            frame = pd.read_csv(out / 'fig3__kappa=0.5__omd_return__seed1.csv')
            self.assertTrue((out / 'fig3__kappa=0.5__omd_return__seed1.csv.meta.json').is_file())
            self.assertTrue((out / 'fig3_aggregate.csv.meta.json').is_file())
            self.assertEqual(load_run_config(out / 'config.yaml'), config)
            on_disk = pd.read_csv(out / 'fig3_aggregate.csv')

        self.assertEqual(len(records), 8)
        self.assertTrue(all(record.status == 'ok' for record in records))
        self.assertEqual(len(job_files), 8)
        self.assertEqual(list(frame.columns), ['step', 'J', 'avg_kl', 'theta_norm', 'optimal_J'])
        self.assertEqual(frame['step'].tolist(), [0, 1, 2, 3])
        self.assertTrue(np.all(frame['J'] <= frame['optimal_J'] + 1e-9))
        self.assertTrue(np.all(frame['theta_norm'] <= 0.5 + 1e-12))
        self.assertEqual(list(summary.columns), ['kappa', 'agent', 'J_mean', 'J_stderr'])
        self.assertEqual(len(summary), 4)
        assert_frame_equal(on_disk, summary, check_dtype=False)

    def test_reproducible_and_seed_isolated(self):
        """Re-running reproduces per-seed CSVs, and adding seeds leaves existing ones unchanged."""
        name = 'fig3__kappa=5.0__mle__seed0.csv'
        with tempfile.TemporaryDirectory() as tmp:
            run_experiment(tiny_fig3(seeds=[0]), Path(tmp) / 'a', workers=1)
            run_experiment(tiny_fig3(seeds=[0]), Path(tmp) / 'b', workers=1)
            run_experiment(tiny_fig3(seeds=[0, 1, 2]), Path(tmp) / 'c', workers=1)
            first = (Path(tmp) / 'a' / name).read_bytes()
            second = (Path(tmp) / 'b' / name).read_bytes()
            extended = (Path(tmp) / 'c' / name).read_bytes()
        self.assertEqual(first, second)
        self.assertEqual(first, extended)

    def test_failure_marker(self):
        """A job that raises leaves a marker with the traceback and no CSV."""
        error = NumericalError('Gradient became non-finite at step 2.', step=2)
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            with mock.patch('harness.experiments.train_tabular', side_effect=error), \
                    self.assertLogs('harness', level='ERROR'):
                records, summary = run_experiment(tiny_fig3(seeds=[0], sweep={'kappa': [1.0]}), out, workers=1)
            marker = out / 'fig3__kappa=1.0__mle__seed0.FAILED'
            self.assertTrue(marker.is_file())
            self.assertIn('non-finite at step 2', marker.read_text(encoding='utf-8'))
            self.assertFalse((out / 'fig3__kappa=1.0__mle__seed0.csv').exists())
        self.assertIsNone(summary)
        self.assertEqual([record.status for record in records], ['failed', 'failed'])

    def test_diverged_run_keeps_partial_rows(self):
        """A diverged training run keeps its rows next to a failure marker."""
        diverged = RunRecord(AgentKind.OMD, 0, status='diverged', message='step 7: gradient is NaN')
        diverged.record(5, 12.0, 1.0, 0.5, 0.1, 0.2)
        config = RunConfig.from_dict({'experiment': 'cartpole', 'agents': ['omd'], 'seeds': [0]})
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            with mock.patch('harness.experiments.train_agent', return_value=diverged), \
                    self.assertLogs('harness', level='ERROR'):
                records, summary = run_experiment(config, out, workers=1)
            frame = pd.read_csv(out / 'cartpole__base__omd__seed0.csv')
            marker_text = (out / 'cartpole__base__omd__seed0.FAILED').read_text(encoding='utf-8')
        self.assertEqual(frame['step'].tolist(), [5])
        self.assertIn('step 7', marker_text)
        self.assertEqual(records[0].status, 'diverged')
        self.assertEqual(records[0].summary['return'], 12.0)
        self.assertIsNone(summary)

    def test_lemma_holds(self):
        """Random lemma pairs never exceed the bound."""
        config = RunConfig.from_dict({'experiment': 'lemma', 'agents': ['lemma'], 'seeds': [0, 1], 'n_pairs': 20})
        with tempfile.TemporaryDirectory() as tmp:
            _, summary = run_experiment(config, tmp, workers=1)
        self.assertEqual(summary.loc[0, 'holds_fraction_mean'], 1.0)
        self.assertLessEqual(summary.loc[0, 'max_slack_violation_mean'], 1e-9)

    def test_bounds_hold(self):
        """Both trained models stay within their approximation bounds."""
        config = RunConfig.from_dict({
            'experiment': 'fig2_right', 'agents': ['omd_bellman'], 'env': 'random', 'n_states': 3,
            'n_actions': 2, 'seeds': [0], 'tabular_steps': 3, 'learning_rate': 0.01,
            'use_identity_inverse': False,
        })
        with tempfile.TemporaryDirectory() as tmp:
            records, summary = run_experiment(config, tmp, workers=1)
        self.assertEqual(records[0].status, 'ok')
        self.assertEqual(summary.loc[0, 'bounds_hold_mean'], 1.0)
        self.assertLessEqual(summary.loc[0, 'q_err_omd_mean'], summary.loc[0, 'bound_omd_mean'] + 1e-9)

    def test_prediction_trace(self):
        """The fig4 runner checkpoints the agent and records one-step predictions along a rollout."""
        config = RunConfig.from_dict({
            'experiment': 'fig4', 'agents': ['omd'], 'seeds': [0], 'total_steps': 20, 'warmup_steps': 10,
            'batch_size': 8, 'buffer_capacity': 100, 'eval_interval': 10, 'eval_episodes': 1,
            'q_hidden': [4], 'model_hidden': [4], 'model_width': 1, 'trace_steps': 5,
        })
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            records, _ = run_experiment(config, out, workers=1)
            self.assertTrue((out / 'fig4__base__omd__seed0.ckpt').is_file())
            trace = pd.read_csv(out / 'fig4__base__omd__seed0.trace.csv')
        self.assertEqual(records[0].status, 'ok')
        self.assertEqual(list(trace.columns[:2]), ['t', 'action'])
        self.assertIn('true_3', trace.columns)
        self.assertIn('pred_3', trace.columns)
        self.assertLessEqual(len(trace), 5)

    def test_process_pool_matches_sequential(self):
        """Several workers go through the pool and give the same aggregate as one."""
        config = RunConfig.from_dict({'experiment': 'lemma', 'agents': ['lemma'], 'seeds': [0, 1, 2],
                                      'n_pairs': 5})
        with tempfile.TemporaryDirectory() as tmp:
            _, sequential = run_experiment(config, Path(tmp) / 'one', workers=1)
            with mock.patch('harness.tasks.Pool', InlinePool):
                _, pooled = run_experiment(config, Path(tmp) / 'many', workers=2)
        self.assertEqual(InlinePool.sizes[-1], 2)
        assert_frame_equal(pooled, sequential)

    def test_job_logs_defer_formatting(self):
        """Job progress is logged with a fixed template and the job name passed as an argument."""
        config = RunConfig.from_dict({'experiment': 'lemma', 'agents': ['lemma'], 'seeds': [0], 'n_pairs': 3})
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertLogs('harness.tasks', level='INFO') as logs:
                run_experiment(config, tmp, workers=1)
        starts = [record for record in logs.records if record.msg == "Starting job %s"]
        self.assertEqual(len(starts), 1)
        self.assertTrue(starts[0].args[0].startswith('lemma__'))
        self.assertTrue(all(record.args for record in logs.records))
        self.assertTrue(any(line.endswith(f"Starting job {starts[0].args[0]}") for line in logs.output))

    def test_shipped_kappa_sweep_separates_agents(self):
        """With the shipped kappa-sweep settings OMD wins clearly in the tightest balls and both agents solve the widest."""
        shipped = load_run_config(Path(settings.OMD_CONFIG_ROOT) / 'fig3.yaml')
        kappas = sorted(shipped.sweep['kappa'])
        config = dataclasses.replace(shipped, seeds=shipped.seeds[:2],
                                     sweep={'kappa': kappas[:2] + kappas[-1:]})
        optimum = optimal_return(default_two_state_mdp())
        with tempfile.TemporaryDirectory() as tmp:
            _, summary = run_experiment(config, tmp, workers=1)
        final = summary.set_index(['kappa', 'agent'])['J_mean']

        for kappa in kappas[:2]:
            self.assertGreaterEqual(final[(kappa, 'omd_return')] - final[(kappa, 'mle')], 0.05 * optimum,
                                    msg=f"kappa={kappa}")
        for agent in ('omd_return', 'mle'):
            self.assertGreaterEqual(final[(kappas[-1], agent)], 0.99 * optimum, msg=agent)
        for kappa in kappas[:2] + kappas[-1:]:
            self.assertGreaterEqual(final[(kappa, 'omd_return')], final[(kappa, 'mle')] - 1e-6, msg=f"kappa={kappa}")
