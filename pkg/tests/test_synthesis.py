#!/usr/bin/env python3
"""
Tests for gain placement and certificate synthesis
"""
import os
import tempfile
import unittest

import numpy as np
from scipy import linalg

from ofmpc.certificates import Sampler, verify_ioss_decrease, verify_iss_clf, verify_observer
from ofmpc.models import build_double_integrator, synthesize_double_integrator
from ofmpc.observer import LuenbergerObserver
from ofmpc.synthesis import (CertificateBundle, SynthesisError, common_lyapunov, linear_observer_certificate,
                             observer_gain, robust_feedback, robust_observer, state_feedback_gain, synthesize,
                             vertex_matrices)

A = np.array([[1.0, 0.5], [0.0, 1.0]])
B = np.array([[0.0], [0.5]])
C = np.array([[1.0, 0.0]])


class TestGains(unittest.TestCase):
    def test_state_feedback(self):
        K = state_feedback_gain(A, B, [0.4, 0.6])
        np.testing.assert_allclose(sorted(np.linalg.eigvals(A + B @ K).real), [0.4, 0.6], atol=1e-9)

    def test_observer(self):
        L = observer_gain(A, C, [0.3, 0.5])
        self.assertEqual(L.shape, (2, 1))
        np.testing.assert_allclose(sorted(np.linalg.eigvals(A + L @ C).real), [0.3, 0.5], atol=1e-9)

    def test_vertices(self):
        vertices = vertex_matrices(lambda theta: np.diag(theta), [(0.0, 1.0), (2.0, 3.0)])
        self.assertEqual(len(vertices), 4)
        np.testing.assert_allclose(vertices[0], np.diag([0.0, 2.0]))
        np.testing.assert_allclose(vertices[-1], np.diag([1.0, 3.0]))


class TestCommonLyapunov(unittest.TestCase):
    def test_two_vertices(self):
        vertices = [np.array([[0.5, 0.1], [0.0, 0.4]]), np.array([[0.4, 0.0], [0.1, 0.5]])]
        P, decay = common_lyapunov(vertices)
        self.assertLess(decay, 1.0)
        self.assertAlmostEqual(linalg.eigvalsh(P)[0], 1.0)
        for V in vertices:
            self.assertGreaterEqual(linalg.eigvalsh(decay * P - V.T @ P @ V)[0], -1e-9)

    def test_single_scalar_vertex(self):
        P, decay = common_lyapunov([np.array([[0.5]])])
        np.testing.assert_allclose(P, [[1.0]])
        self.assertAlmostEqual(decay, 0.25)

    def test_unstable(self):
        with self.assertRaises(SynthesisError):
            common_lyapunov([np.array([[1.1]])])


class TestRobustLmi(unittest.TestCase):
    vertices = [np.array([[0.5, 0.1], [0.0, 0.4]]), np.array([[1.1, 0.0], [0.1, 0.5]])]

    def assertDecay(self, closed, P, decay):
        self.assertAlmostEqual(linalg.eigvalsh(P)[0], 1.0)
        for V in closed:
            self.assertGreaterEqual(linalg.eigvalsh(decay * P - V.T @ P @ V)[0], -1e-5 * linalg.eigvalsh(P)[-1])

    def test_feedback(self):
        K, P = robust_feedback(self.vertices, np.eye(2), 0.3)
        self.assertEqual(K.shape, (2, 2))
        self.assertDecay([A + K for A in self.vertices], P, 0.3)

    def test_observer(self):
        E_x = np.hstack([np.eye(2), np.zeros((2, 1))])
        E_y = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        L, P = robust_observer(self.vertices, np.eye(2), E_x, E_y, 0.3)
        self.assertEqual(L.shape, (2, 2))
        self.assertDecay([A + L for A in self.vertices], P, 0.3)

    def test_infeasible(self):
        # no input reaches the unstable second state
        with self.assertRaises(SynthesisError):
            robust_feedback([np.diag([0.5, 1.2])], [[1.0], [0.0]], 0.9)

    def test_double_integrator_conditioning(self):
        bundle = synthesize_double_integrator()
        for form in (bundle.cert_obs.Vo, bundle.cert_iss.V):
            eigenvalues = linalg.eigvalsh(form.P)
            self.assertAlmostEqual(eigenvalues[0], 1.0)
            self.assertLess(eigenvalues[-1], 1e4)
        self.assertLessEqual(bundle.cert_obs.eta_tilde, 0.9 + 1e-12)
        self.assertLessEqual(bundle.cert_iss.rho, 0.9 + 1e-12)


class TestCertificates(unittest.TestCase):
    def test_scalar_observer_constants(self):
        cert = linear_observer_certificate([np.array([[0.5]])], [[-0.5]], [[1.0]], [[1.0]], [[0.0]], 0.5)
        self.assertLessEqual(cert.eta_tilde, 0.5 + 1e-12)
        self.assertGreater(cert.eta_tilde, 0.25)
        self.assertAlmostEqual(cert.gamma_L1(4.0), 1.0)
        self.assertTrue(cert.gamma_L2.is_zero)
        # the disturbance enters with gain 1 through E_x
        epsilon = cert.eta_tilde / 0.25 - 1.0
        self.assertAlmostEqual(cert.sigma4(1.0), 1.0 + 1.0 / epsilon)

    def test_missed_target(self):
        with self.assertRaises(SynthesisError):
            synthesize([np.array([[1.0]])], [[1.0]], [[1.0]], [[1.0]], [[0.0]], L=[[-0.5]], K=[[-0.5]],
                       eta_tilde_target=0.2, eta_target=0.3, rho_target=0.5)

    def test_double_integrator_certificates_hold(self):
        model, constraints = build_double_integrator(w_bar=0.01)
        bundle = synthesize_double_integrator(model)
        self.assertLess(bundle.cert_obs.eta_tilde, bundle.cert_ioss.eta)
        self.assertLess(bundle.cert_ioss.eta, 1.0)
        sampler = Sampler(count=1000, seed=5)
        observer = LuenbergerObserver(model, bundle.L, bundle.cert_obs)
        for report in (verify_observer(model, observer, bundle.cert_obs, sampler, constraints),
                       verify_ioss_decrease(model, bundle.cert_ioss, sampler, constraints),
                       verify_iss_clf(model, bundle.cert_iss, sampler, constraints)):
            self.assertTrue(report.passed, report)

    def test_bundle_file(self):
        bundle = synthesize_double_integrator()
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'bundle.json')
            bundle.save(path)
            restored = CertificateBundle.load(path)
        np.testing.assert_allclose(restored.L, bundle.L)
        np.testing.assert_allclose(restored.K, bundle.K)
        self.assertEqual(repr(restored), repr(bundle))
        self.assertEqual(restored.description, 'double integrator')


if __name__ == '__main__':
    unittest.main()
