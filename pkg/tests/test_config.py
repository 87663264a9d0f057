#!/usr/bin/env python3
"""
Tests for run configuration files
"""
import os
import unittest

import numpy as np

from ofmpc.config import DESK_SCALE, FULL_SCALE, ConfigError, SimConfig, expand_seed_range, parse_text

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')


class TestParse(unittest.TestCase):
    def test_parse_text(self):
        text = '# header\n\nmodel.name = scalar  # trailing\n run.seed=3\n'
        self.assertEqual(parse_text(text), {'model.name': 'scalar', 'run.seed': '3'})

    def test_malformed(self):
        with self.assertRaises(ConfigError):
            parse_text('model.name scalar')
        with self.assertRaises(ConfigError):
            parse_text('= scalar')
        with self.assertRaises(ConfigError):
            parse_text('run.seed = 1\nrun.seed = 2')

    def test_seed_ranges(self):
        self.assertEqual(list(expand_seed_range('3')), [3])
        self.assertEqual(list(expand_seed_range('3-5')), [3, 4, 5])
        self.assertEqual(list(expand_seed_range('1,4-6')), [1, 4, 5, 6])
        for text in ('', '5-3', 'a', '1-b'):
            with self.assertRaises(ValueError):
                list(expand_seed_range(text))


class TestSimConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = SimConfig()
        self.assertEqual(cfg.model, 'double-integrator')
        self.assertEqual(cfg.estimator, 'ioss')
        self.assertEqual(cfg.controller, 'homothetic')
        self.assertEqual((cfg.N, cfg.steps), (DESK_SCALE['N'], DESK_SCALE['steps']))
        self.assertIsNone(cfg.x0)
        self.assertEqual(cfg.outliers, {})
        full = SimConfig(full_scale=True)
        self.assertEqual((full.N, full.steps), (FULL_SCALE['N'], FULL_SCALE['steps']))

    def test_values(self):
        cfg = SimConfig.from_text('model.name = scalar\nmodel.a = 0.9\ncontroller.N = 7\nrun.strict = yes\n'
                                  'initial.x0 = 1, 2 3\ndisturbance.outlier_steps = 2, 4\n')
        self.assertEqual(cfg.model, 'scalar')
        self.assertEqual(cfg.model_parameters, {'a': 0.9})
        self.assertEqual(cfg.N, 7)
        self.assertTrue(cfg.strict)
        np.testing.assert_allclose(cfg.x0, [1.0, 2.0, 3.0])
        self.assertEqual(cfg.outliers, {2: 10.0, 4: 10.0})

    def test_invalid(self):
        for text in ('model.colour = blue', 'runs.seed = 1', 'controller.N = 0', 'run.strict = maybe',
                     'initial.e0 = -1', 'controller.terminal = box', 'disturbance.outlier_steps = 500',
                     'controller.N = 2.5'):
            with self.assertRaises(ConfigError, msg=text):
                SimConfig.from_text(text)
        with self.assertRaises(ConfigError):
            SimConfig(colour='blue')

    def test_plugin_names_are_open(self):
        cfg = SimConfig.from_text('estimator.name = custom\ncontroller.name = other')
        self.assertEqual((cfg.estimator, cfg.controller), ('custom', 'other'))

    def test_overrides(self):
        cfg = SimConfig.from_text('run.seed = 1\nrun.steps = 10', seed=5, steps=None)
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.steps, 10)

    def test_copy(self):
        cfg = SimConfig.from_text('initial.x0 = 1, 2')
        other = cfg.copy(seed=3)
        self.assertEqual(other.seed, 3)
        self.assertEqual(cfg.seed, 0)
        with self.assertRaises(ConfigError):
            cfg.copy(N=0)
        data = cfg.as_dict()
        self.assertEqual(data['x0'], [1.0, 2.0])
        self.assertEqual(data['model'], 'double-integrator')

    def test_files(self):
        cfg = SimConfig.from_file(os.path.join(CONFIG_DIR, 'double_integrator.cfg'), steps=5)
        self.assertEqual(cfg.model_parameters, {'h': 0.5})
        self.assertEqual(cfg.w_bar, 1e-5)
        self.assertEqual(cfg.N, 15)
        self.assertEqual(cfg.steps, 5)
        np.testing.assert_allclose(cfg.x_hat0, [0.5, 0.0])
        quadrotor = SimConfig.from_file(os.path.join(CONFIG_DIR, 'quadrotor.cfg'))
        self.assertEqual((quadrotor.model, quadrotor.estimator, quadrotor.M), ('quadrotor', 'setmember', 4))
        with self.assertRaises(ConfigError):
            SimConfig.from_file(os.path.join(CONFIG_DIR, 'missing.cfg'))


if __name__ == '__main__':
    unittest.main()
