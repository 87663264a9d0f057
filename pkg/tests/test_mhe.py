#!/usr/bin/env python3
"""
Tests for the moving horizon estimator and its combination with the observer
"""
import math
import unittest

import numpy as np

from ofmpc.certificates import QuadraticForm, Sampler
from ofmpc.core import ContractViolation, Gain, LazyGain, UnsupportedCertificate, model_output, model_step
from ofmpc.mhe import (MheConfig, MheProblem, check_linear_bound, combined_update, estimate_sigma_f,
                       mhe_apriori_bound, mhe_update, mismatch_bound, sigma_delta_quadratic, solve_mhe, window_of)
from ofmpc.models import build_scalar, synthesize_scalar
from ofmpc.nlp import check_gradients
from ofmpc.observer import EstimatorState, LuenbergerObserver, error_update_identical, observer_step


class TestMheConfig(unittest.TestCase):
    def setUp(self):
        self.model, _ = build_scalar(w_bar=0.1)
        self.bundle = synthesize_scalar(self.model)

    def test_sigma_delta_majorizes(self):
        form = QuadraticForm([[2.0, 0.3], [0.3, 1.0]])
        e_cap = 0.5
        sigma = sigma_delta_quadratic(e_cap)
        rng = np.random.RandomState(0)
        for _ in range(200):
            z, b, a = rng.normal(size=(3, 2))
            if form.value(b, z) > e_cap:
                b = z + (b - z) * math.sqrt(e_cap / form.value(b, z))
            self.assertLessEqual(form.value(a, z), form.value(b, z) + sigma(form.norm(a - b)) + 1e-12)
        self.assertEqual(sigma_delta_quadratic(0.0), Gain.quadratic(1.0))
        with self.assertRaises(ContractViolation):
            sigma_delta_quadratic(-1.0)

    def test_contracts(self):
        cert = self.bundle.cert_ioss
        with self.assertRaises(ContractViolation):
            MheConfig.from_certificate(cert, 0, 1.0)
        with self.assertRaises(ContractViolation):
            MheConfig(M=2, eta=cert.eta, sigma1=cert.sigma1, sigma2=cert.sigma2,
                      sigma_delta=LazyGain(lambda r: r + 1.0), alpha1=Gain.quadratic(1.0), metric=cert.W)
        with self.assertRaises(UnsupportedCertificate):
            MheConfig(M=2, eta=cert.eta, sigma1=cert.sigma1, sigma2=cert.sigma2,
                      sigma_delta=Gain.quadratic(1.0), alpha1=Gain.quadratic(1.0), metric=cert.W.as_root())

    def test_arrival_gain_widens(self):
        cfg = MheConfig.from_certificate(self.bundle.cert_ioss, 3, 1.0)
        self.assertEqual(cfg.arrival_gain(0.5), cfg.sigma_delta)
        self.assertEqual(cfg.arrival_gain(4.0), sigma_delta_quadratic(4.0))

    def test_linear_bound_check(self):
        cert = self.bundle.cert_ioss
        quadratic = MheConfig(M=2, eta=cert.eta, sigma1=cert.sigma1, sigma2=cert.sigma2,
                              sigma_delta=Gain.quadratic(1.0), alpha1=Gain.quadratic(1.0), metric=cert.W)
        self.assertTrue(check_linear_bound(quadratic, 1.0))
        capped = MheConfig.from_certificate(cert, 2, 1.0)
        with self.assertLogs('ofmpc.mhe', level='WARNING'):
            self.assertFalse(check_linear_bound(capped, 1.0))

    def test_apriori_bound(self):
        cfg = MheConfig.from_certificate(self.bundle.cert_ioss, 3, 1.0)
        self.assertAlmostEqual(mhe_apriori_bound(cfg, 0, 0.25, 0.1), 0.25 + 0.25 + 2.0 * 0.5)
        limit = cfg.sigma1(0.2) / (1.0 - cfg.eta)
        self.assertAlmostEqual(mhe_apriori_bound(cfg, 200, 0.25, 0.1), limit)

    def test_sigma_f(self):
        sigma_f = estimate_sigma_f(self.model, None, Sampler(count=50, seed=0))
        self.assertAlmostEqual(sigma_f(1.0), 2.0, places=6)
        cfg = MheConfig.from_certificate(self.bundle.cert_ioss, 3, 1.0)
        self.assertAlmostEqual(mismatch_bound(cfg, sigma_f, 0.04, 0.09, 0.1), 2.0 * (0.2 + 0.1) + 0.3)


class TestSolveMhe(unittest.TestCase):
    def setUp(self):
        self.model, _ = build_scalar(w_bar=0.1)
        self.bundle = synthesize_scalar(self.model)
        self.cfg = MheConfig.from_certificate(self.bundle.cert_ioss, 3, 1.0)
        self.observer = LuenbergerObserver(self.model, self.bundle.L, self.bundle.cert_obs)
        self.Vo = self.bundle.cert_obs.Vo

    def plant(self, x0, inputs, seed):
        """ (window, true states) of an open-loop run with |w| = w_bar """
        rng = np.random.RandomState(seed)
        x = np.array(x0, dtype=float)
        window, states = [], [x]
        for u in inputs:
            w = rng.choice([-1.0, 1.0], size=1) * self.model.w_bound
            window.append((np.array([u]), model_output(self.model, x, [u], w)))
            x = model_step(self.model, x, [u], w)
            states.append(x)
        return window, states

    def test_empty_window(self):
        solution = solve_mhe(self.model, self.cfg, [], ([0.3], 0.2), 0.1)
        self.assertEqual(solution.M_t, 0)
        np.testing.assert_allclose(solution.x_hat_t, [0.3])
        self.assertEqual(solution.e_bar, 0.2)
        st = EstimatorState(x_hat=[0.3], e_bar=0.2)
        self.assertEqual(window_of(st, 3)[0], [])

    def test_window_too_long(self):
        window, _ = self.plant([0.0], [0.0] * 4, seed=0)
        with self.assertRaises(ContractViolation):
            solve_mhe(self.model, self.cfg, window, ([0.0], 0.2), 0.1)

    def test_certified_radius_is_sound(self):
        for seed in range(3):
            window, states = self.plant([0.4], [0.1, -0.2, 0.0], seed)
            solution = solve_mhe(self.model, self.cfg, window, ([0.0], 0.2), 0.1)
            self.assertEqual(solution.M_t, 3)
            self.assertLessEqual(self.Vo.value(solution.x_hat_t, states[-1]), solution.e_bar * (1 + 1e-9) + 1e-12)
            self.assertEqual(len(solution.w_seq), 3)

    def test_encode_is_feasible(self):
        window, _ = self.plant([0.4], [0.1, -0.2, 0.0], seed=1)
        problem = MheProblem(self.model, self.cfg, window, ([0.0], 0.2), 0.1)
        xi = problem.encode([0.1], [[0.05], [0.0], [-0.05]])
        self.assertLessEqual(float(np.max(problem.ineq(xi))), 1e-12)
        cost, e_bar, _, _ = problem.certified(xi)
        self.assertAlmostEqual(problem.radius(xi), e_bar)
        self.assertAlmostEqual(e_bar - cost, self.cfg.eta ** 3 * 0.2)

    def test_derivatives(self):
        window, _ = self.plant([0.4], [0.1, -0.2, 0.0], seed=1)
        problem = MheProblem(self.model, self.cfg, window, ([0.0], 0.2), 0.1)
        rng = np.random.RandomState(9)
        points = []
        for _ in range(100):
            v = rng.uniform(-1.0, 1.0, problem.n_vars)
            # epigraph variables stay positive, away from the kinks of the gains
            v[problem.i_nu:] = rng.uniform(0.2, 1.5, problem.n_vars - problem.i_nu)
            points.append(v)
        report = check_gradients(problem.nlp, points)
        self.assertTrue(report.passed(), report)

    def test_mhe_update(self):
        st = EstimatorState(x_hat=[0.0], e_bar=0.2, capacity=self.cfg.M)
        window, states = self.plant([0.4], [0.1, -0.2, 0.0, 0.1], seed=2)
        for k, (u, y) in enumerate(window):
            st, solution = mhe_update(self.model, self.cfg, self.observer, st, u, y, 0.1)
            self.assertEqual(st.branch, 'mhe')
            self.assertEqual(st.t, k + 1)
            self.assertEqual(solution.M_t, min(k + 1, self.cfg.M))
            self.assertLessEqual(self.Vo.value(st.x_hat, states[k + 1]), st.e_bar * (1 + 1e-9) + 1e-12)

    def test_combined_never_worse_than_observer(self):
        st = EstimatorState(x_hat=[0.0], e_bar=0.2, capacity=self.cfg.M)
        window, states = self.plant([0.4], [0.1, -0.2, 0.0, 0.1, 0.0], seed=3)
        cert_ioss, cert_obs = self.bundle.cert_ioss, self.bundle.cert_obs
        for k, (u, y) in enumerate(window):
            luenberger = error_update_identical(observer_step(self.observer, st, u, y), cert_ioss, cert_obs, 0.1)
            st = combined_update(self.model, self.cfg, self.observer, st, u, y, 0.1, cert_ioss, cert_obs)
            self.assertIn(st.branch, ('mhe', 'fallback'))
            self.assertLessEqual(st.e_bar, luenberger)
            self.assertIn('luenberger_e_bar', st.info)
            self.assertLessEqual(self.Vo.value(st.x_hat, states[k + 1]), st.e_bar * (1 + 1e-9) + 1e-12)


if __name__ == '__main__':
    unittest.main()
