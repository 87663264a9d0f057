#!/usr/bin/env python3
"""
Tests for problem assembly, the closed loop and run statistics
"""
import io
import math
import os
import tempfile
import unittest

import numpy as np

from ofmpc import registry
from ofmpc.config import ConfigError, SimConfig
from ofmpc.context import Trace, TraceRow, merge_rows, read_csv, write_summaries
from ofmpc.core import ContractViolation, UnsupportedCertificate
from ofmpc.simulation import (build_context, compare_traces, compute_metrics, gen_disturbance, run_closed_loop,
                              run_sweep, verify_certificates)
from ofmpc.tubempc import InitialInfeasibility, disturbance_limit

SLOW = os.environ.get('OFMPC_SLOW_TESTS') == '1'
CONFIGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')

SCALAR = '''
model.name = scalar
controller.N = 5
run.steps = 6
initial.x0 = 0.5
initial.x_hat0 = 0.5
initial.e0 = 0
'''


def scalar_config(**overrides) -> SimConfig:
    return SimConfig.from_text(SCALAR, '<scalar>', **overrides)


def manual_trace(true_errors, e_bars, margins, statuses=None) -> Trace:
    trace = Trace(label='manual', parameters=dict(seed=4, stage_bound=1.0))
    for t, (true_error, e_bar, margin) in enumerate(zip(true_errors, e_bars, margins)):
        trace.append(TraceRow(t=t, x=[0.0], x_hat=[0.0], u=[0.0], y=[0.0], e_bar=e_bar, true_error=true_error,
                              margin=margin, status=(statuses or ['optimal'] * len(e_bars))[t],
                              estimator_time=0.5, controller_time=1.0, extra=dict(stage_cost=2.0 * t)))
    return trace


class TestDisturbance(unittest.TestCase):
    def test_sphere(self):
        W = gen_disturbance(3, 0.2, 50, 4)
        self.assertEqual(W.shape, (50, 4))
        np.testing.assert_allclose(np.linalg.norm(W, axis=1), 0.2)
        np.testing.assert_array_equal(W, gen_disturbance(3, 0.2, 50, 4))
        self.assertFalse(np.array_equal(W, gen_disturbance(4, 0.2, 50, 4)))

    def test_outliers(self):
        W = gen_disturbance(0, 0.1, 10, 2, outliers={3: 10.0})
        self.assertAlmostEqual(np.linalg.norm(W[3]), 1.0)
        self.assertAlmostEqual(np.linalg.norm(W[4]), 0.1)

    def test_contracts(self):
        with self.assertRaises(ContractViolation):
            gen_disturbance(0, 0.1, 0, 1)


class TestBuildContext(unittest.TestCase):
    def test_scalar(self):
        context = build_context(scalar_config())
        self.assertEqual(context.model.name, 'scalar')
        self.assertEqual(context.w_bar, 0.01)
        self.assertEqual(context.setup.N, 5)
        self.assertTrue(context.setup.cert_iss.V.root)
        self.assertFalse(context.cert_obs.Vo.root)
        self.assertEqual(context.mhe_cfg.M, 10)
        self.assertIsNone(context.observability)

    def test_defaults_to_setpoint(self):
        cfg = SimConfig.from_text('model.name = scalar')
        build_context(cfg)
        np.testing.assert_allclose(cfg.x0, [0.0])
        np.testing.assert_allclose(cfg.x_hat0, [0.0])

    def test_errors(self):
        with self.assertRaises(ConfigError):
            build_context(SimConfig.from_text('model.name = pendulum'))
        with self.assertRaises(ConfigError):
            build_context(SimConfig.from_text('model.name = scalar\nmodel.mass = 2'))
        with self.assertRaises(ConfigError):
            build_context(scalar_config(x0=np.array([0.5, 0.0])))
        with self.assertRaises(ConfigError):
            build_context(scalar_config(x_hat0=np.array([0.0])))

    def test_verify(self):
        reports = verify_certificates(build_context(scalar_config()), samples=500)
        self.assertEqual(len(reports), 3)
        self.assertTrue(all(report.passed for report in reports))

    def test_auto_disturbance_bound(self):
        context = build_context(SimConfig.from_file(os.path.join(CONFIGS, 'double_integrator.cfg')))
        setup = context.setup
        values = setup.constraints.evaluate(setup.term.x_s, setup.term.u_s)
        tightened = values + setup.constraints.tightening(setup.rpi.s_max, setup.rpi.e_max)
        self.assertLess(float(np.max(tightened)), 0.0)
        self.assertGreater(context.w_bar, 0.0)
        self.assertAlmostEqual(context.w_bar / disturbance_limit(setup), 0.5, places=6)

    def test_auto_scalar(self):
        cfg = SimConfig.from_text(SCALAR + 'model.w_bar = auto\ndisturbance.limit_fraction = 0.25\n')
        context = build_context(cfg)
        self.assertAlmostEqual(context.w_bar / disturbance_limit(context.setup), 0.25, places=6)
        self.assertEqual(context.setup.w_bar, context.w_bar)
        with self.assertRaises(ConfigError):
            SimConfig.from_text(SCALAR + 'model.w_bar = auto\ndisturbance.limit_fraction = 0\n')
        with self.assertRaises(ConfigError):
            SimConfig.from_text(SCALAR + 'disturbance.limit_fraction = 1.5\n')


class TestClosedLoop(unittest.TestCase):
    def setUp(self):
        registry.reset_plugins()
        self.addCleanup(registry.reset_plugins)

    def assertSound(self, trace):
        for row in trace.rows:
            self.assertTrue(row.bound_holds, row)
        self.assertTrue(compute_metrics(trace)['sound'])

    def test_run(self):
        trace = run_closed_loop(build_context(scalar_config()))
        self.assertEqual(len(trace), 6)
        self.assertEqual(trace.label, 'scalar/ioss/homothetic/seed=0')
        self.assertEqual(trace.rows[0].branch, 'init')
        self.assertEqual(trace.rows[1].branch, 'ioss')
        self.assertSound(trace)
        # the estimate is updated before every solve but the first
        self.assertEqual([what for t, what in trace.events if t == 0], ['solve', 'apply', 'advance'])
        self.assertEqual([what for t, what in trace.events if t == 1], ['estimate', 'solve', 'apply', 'advance'])
        self.assertEqual(trace.parameters['e_max'], build_context(scalar_config()).setup.rpi.e_max)

    def test_deterministic(self):
        texts = [run_closed_loop(build_context(scalar_config())).to_csv(timing=False) for _ in range(2)]
        self.assertEqual(texts[0], texts[1])
        self.assertTrue(texts[0].startswith('# ofmpc trace schema 1 scalar/ioss/homothetic/seed=0\n'))

    def test_zero_disturbance(self):
        context = build_context(scalar_config())
        trace = run_closed_loop(context, disturbances=np.zeros((6, 1)))
        np.testing.assert_allclose(trace.column('true_error'), 0.0, atol=1e-12)
        with self.assertRaises(ContractViolation):
            run_closed_loop(context, disturbances=np.zeros((5, 1)))

    def test_estimators(self):
        for estimator in ('apriori', 'ioss', 'general', 'mhe', 'combined'):
            trace = run_closed_loop(build_context(scalar_config(estimator=estimator, mhe_M=2)))
            self.assertEqual(len(trace), 6)
            self.assertSound(trace)

    def test_setmember(self):
        trace = run_closed_loop(build_context(scalar_config(estimator='setmember', M=2)))
        self.assertEqual(len(trace), 6)
        self.assertLessEqual({row.branch for row in trace.rows}, {'init', 'apriori', 'setmember'})
        self.assertEqual(trace.rows[1].branch, 'apriori')
        self.assertSound(trace)

    def test_observability(self):
        with self.assertRaises(UnsupportedCertificate):
            run_closed_loop(build_context(scalar_config(estimator='observability')))
        cfg = SimConfig.from_text('model.name = shift-register\nestimator.name = observability\n'
                                  'controller.N = 4\nrun.steps = 6')
        trace = run_closed_loop(build_context(cfg))
        self.assertEqual(trace.rows[1].branch, 'apriori')
        self.assertEqual(trace.rows[2].branch, 'observability')
        self.assertSound(trace)

    def test_controllers(self):
        for controller in ('tightened', 'rigid', 'mhe-mpc'):
            trace = run_closed_loop(build_context(scalar_config(controller=controller, mhe_M=2)))
            self.assertEqual(len(trace), 6)
            self.assertSound(trace)

    def test_initial_infeasibility(self):
        with self.assertRaises(InitialInfeasibility):
            run_closed_loop(build_context(scalar_config(x0=np.array([11.0]), x_hat0=np.array([11.0]))))

    def test_outlier_column(self):
        cfg = SimConfig.from_text(SCALAR + 'disturbance.outlier_steps = 2\n')
        trace = run_closed_loop(build_context(cfg))
        bounds = trace.column('outlier_bound')
        self.assertEqual(len(bounds), 6)
        self.assertTrue(np.all(bounds >= trace.column('e_bar')))

    def test_sweep(self):
        summaries = run_sweep(build_context(scalar_config()), [2, 0, 1], max_workers=2)
        self.assertEqual([s['seed'] for s in summaries], [2, 0, 1])
        self.assertTrue(all(s['sound'] for s in summaries))
        self.assertEqual([s['seed'] for s in merge_rows(summaries)], [0, 1, 2])
        with tempfile.TemporaryDirectory() as directory:
            pattern = os.path.join(directory, 'trace-{seed}.csv')
            run_sweep(build_context(scalar_config()), [5], trace_pattern=pattern)
            columns = read_csv(pattern.format(seed=5))
        np.testing.assert_array_equal(columns['t'], np.arange(6))
        self.assertEqual(list(columns['branch'][:2]), ['init', 'ioss'])

    @unittest.skipUnless(SLOW, 'set OFMPC_SLOW_TESTS=1 for quadrotor runs')
    def test_quadrotor(self):
        cfg = SimConfig.from_file(os.path.join(CONFIGS, 'quadrotor.cfg'))
        trace = run_closed_loop(build_context(cfg))
        self.assertSound(trace)


class TestShippedConfigs(unittest.TestCase):
    """ Every configuration under configs/ builds and runs soundly. """

    def setUp(self):
        registry.reset_plugins()
        self.addCleanup(registry.reset_plugins)

    def check(self, name):
        cfg = SimConfig.from_file(os.path.join(CONFIGS, name), steps=10)
        trace = run_closed_loop(build_context(cfg))
        self.assertEqual(len(trace), 10)
        metrics = compute_metrics(trace)
        self.assertTrue(metrics['bound_valid'], metrics)
        self.assertTrue(metrics['constraints_ok'], metrics)
        self.assertEqual(metrics['infeasible_steps'], 0)

    def test_double_integrator(self):
        self.check('double_integrator.cfg')

    def test_quadrotor(self):
        self.check('quadrotor.cfg')


class TestSeedSweeps(unittest.TestCase):
    """ Certified bounds over many disturbance realizations, not just the default seed. """

    def setUp(self):
        registry.reset_plugins()
        self.addCleanup(registry.reset_plugins)

    def assertAllSound(self, context, seeds):
        for summary in run_sweep(context, seeds, max_workers=4):
            self.assertTrue(summary['bound_valid'], summary)
            self.assertTrue(summary['constraints_ok'], summary)
            self.assertEqual(summary['infeasible_steps'], 0, summary)

    def test_double_integrator(self):
        for estimator in ('apriori', 'ioss', 'general', 'setmember', 'mhe', 'combined'):
            cfg = SimConfig.from_file(os.path.join(CONFIGS, 'double_integrator.cfg'), estimator=estimator,
                                      N=6, steps=5, M=2, mhe_M=2)
            self.assertAllSound(build_context(cfg), range(100))

    def test_scalar(self):
        for estimator in ('apriori', 'ioss', 'general', 'setmember', 'mhe', 'combined'):
            self.assertAllSound(build_context(scalar_config(estimator=estimator, M=2, mhe_M=2)), range(100))

    def test_observability(self):
        cfg = SimConfig.from_text('model.name = shift-register\nestimator.name = observability\n'
                                  'controller.N = 4\nrun.steps = 6')
        self.assertAllSound(build_context(cfg), range(100))

    def test_outlier(self):
        for estimator in ('ioss', 'general', 'setmember', 'mhe'):
            cfg = SimConfig.from_text(SCALAR + 'disturbance.outlier_steps = 3\n', estimator=estimator)
            for seed in range(20):
                context = build_context(cfg.copy(seed=seed))
                trace = run_closed_loop(context)
                W = gen_disturbance(seed, context.w_bar, len(trace), context.model.n_w, cfg.outliers)
                self.assertAlmostEqual(np.linalg.norm(W[3]), 10.0 * context.w_bar)
                for row in trace.rows:
                    self.assertLessEqual(row.true_error, row.extra['outlier_bound'] * (1.0 + 1e-9) + 1e-12, row)


class TestMetrics(unittest.TestCase):
    def test_compute(self):
        trace = manual_trace([0.1, 0.3, 0.2], [0.2, 0.2, 0.4], [1.0, 0.5, -0.1],
                             ['optimal', 'candidate-accepted', 'infeasible'])
        metrics = compute_metrics(trace)
        self.assertEqual(metrics['label'], 'manual')
        self.assertEqual(metrics['seed'], 4)
        self.assertEqual(metrics['steps'], 3)
        self.assertFalse(metrics['bound_valid'])
        self.assertEqual(metrics['bound_violations'], 1)
        self.assertEqual(metrics['first_violation'], 1)
        self.assertAlmostEqual(metrics['mean_e_bar'], 0.8 / 3)
        self.assertAlmostEqual(metrics['mean_true_error'], 0.2)
        self.assertEqual(metrics['min_margin'], -0.1)
        self.assertFalse(metrics['constraints_ok'])
        self.assertEqual(metrics['infeasible_steps'], 1)
        self.assertEqual(metrics['candidate_steps'], 1)
        self.assertAlmostEqual(metrics['mean_stage_cost'], 2.0)
        self.assertFalse(metrics['performance_ok'])
        self.assertEqual(metrics['mean_controller_time'], 1.0)
        self.assertFalse(metrics['sound'])
        with self.assertRaises(ContractViolation):
            compute_metrics(Trace())

    def test_sound(self):
        metrics = compute_metrics(manual_trace([0.1, 0.1], [0.2, 0.1], [1.0, 1.0]))
        self.assertTrue(metrics['sound'])
        self.assertTrue(metrics['performance_ok'])
        self.assertEqual(metrics['first_violation'], -1)

    def test_outlier_bound_counts(self):
        trace = manual_trace([0.5], [0.2], [1.0])
        self.assertFalse(trace.bounds_hold)
        trace.rows[0].extra['outlier_bound'] = 0.6
        self.assertTrue(trace.bounds_hold)

    def test_compare(self):
        ratios = compare_traces({'a': manual_trace([0.1], [0.2], [1.0]), 'b': manual_trace([0.0], [0.1], [1.0])},
                                'a')
        self.assertEqual(ratios['a'], dict(e_bar_ratio=1.0, true_error_ratio=1.0, estimator_time_ratio=1.0))
        self.assertAlmostEqual(ratios['b']['e_bar_ratio'], 0.5)
        self.assertEqual(ratios['b']['true_error_ratio'], 0.0)
        zero = compare_traces({'z': manual_trace([0.0], [0.0], [1.0]), 'w': manual_trace([0.0], [0.1], [1.0])}, 'z')
        self.assertEqual(zero['w']['e_bar_ratio'], math.inf)

    def test_summaries_csv(self):
        stream = io.StringIO()
        write_summaries([dict(seed=1, sound=True), dict(seed=2, mean_e_bar=0.5)], stream)
        self.assertEqual(stream.getvalue().splitlines(), ['mean_e_bar,seed,sound', ',1,True', '0.5,2,'])


if __name__ == '__main__':
    unittest.main()
