#!/usr/bin/env python3
"""
Tests for the observer step and the certified radius recursions
"""
import unittest

import numpy as np

from ofmpc.core import ContractViolation, ModelRejected, model_output, model_step
from ofmpc.models import (build_coupled_pair, build_scalar, build_shift_register, shift_register_certificates,
                          shift_register_observability, synthesize_scalar)
from ofmpc.observer import (EstimatorState, LuenbergerObserver, error_update_general, error_update_identical,
                            observability_update, observer_step, outlier_inflation, predict_error)


def simulate(model, observer, update, x0, x_hat0, e0, steps, seed, feedback=-0.5, capacity=5):
    """ Closed loop with u = feedback * x_hat; returns (true errors, radii). """
    rng = np.random.RandomState(seed)
    cert = observer.cert
    st = EstimatorState(x_hat=x_hat0, e_bar=e0, capacity=capacity)
    x = np.asarray(x0, dtype=float)
    errors, radii = [], []
    for _ in range(steps):
        u = np.clip(feedback * st.x_hat[:model.n_u], -1.0, 1.0)
        w = rng.uniform(-1.0, 1.0, model.n_w)
        w *= model.w_bound / np.linalg.norm(w)
        y = model_output(model, x, u, w)
        x = model_step(model, x, u, w)
        new = observer_step(observer, st, u, y)
        st = new.with_bound(update(new, st))
        errors.append(cert.Vo.value(st.x_hat, x))
        radii.append(st.e_bar)
    return errors, radii


class TestObserverStep(unittest.TestCase):
    def setUp(self):
        self.model, _ = build_scalar(w_bar=0.1)
        self.bundle = synthesize_scalar(self.model)
        self.observer = LuenbergerObserver(self.model, self.bundle.L, self.bundle.cert_obs)

    def test_step(self):
        st = EstimatorState(x_hat=[1.0], e_bar=2.0)
        new = observer_step(self.observer, st, [0.0], [0.0])
        np.testing.assert_allclose(new.x_hat, [0.5])
        self.assertEqual(new.t, 1)
        self.assertEqual(new.e_bar, 2.0)
        self.assertEqual(new.branch, 'observer')
        record = new.newest()
        self.assertEqual(record.t, 0)
        self.assertAlmostEqual(record.w_hat_norm, 0.5)
        self.assertEqual(record.e_bar, 2.0)
        self.assertEqual(len(st.history), 0)

    def test_capacity(self):
        st = EstimatorState(x_hat=[1.0], e_bar=1.0, capacity=2)
        for _ in range(3):
            st = observer_step(self.observer, st, [0.0], [0.0])
        self.assertEqual([r.t for r in st.history], [1, 2])

    def test_state_contracts(self):
        with self.assertRaises(ContractViolation):
            EstimatorState(x_hat=[0.0], e_bar=-1.0)
        with self.assertRaises(ContractViolation):
            EstimatorState(x_hat=[0.0], e_bar=1.0, capacity=0)
        with self.assertRaises(ContractViolation):
            EstimatorState(x_hat=[0.0], e_bar=1.0).newest()
        with self.assertRaises(ContractViolation):
            observer_step(self.observer, EstimatorState(x_hat=[0.0], e_bar=1.0), [0.0, 1.0], [0.0])

    def test_rank_deficient_model(self):
        model, _ = build_coupled_pair()
        L = [[-0.5], [-1.0]]
        with self.assertRaises(ModelRejected):
            LuenbergerObserver(model, L)
        observer = LuenbergerObserver(model, L, allow_rank_deficient=True)
        self.assertFalse(observer.exact_disturbance)
        with self.assertRaises(ModelRejected):
            observer.require_exact_disturbance()


class TestErrorUpdates(unittest.TestCase):
    def setUp(self):
        self.model, _ = build_scalar(w_bar=0.1)
        self.bundle = synthesize_scalar(self.model)
        self.observer = LuenbergerObserver(self.model, self.bundle.L, self.bundle.cert_obs)
        self.w_bar = self.model.w_bound

    def identical(self, new, old):
        return error_update_identical(new, self.bundle.cert_ioss, self.bundle.cert_obs, self.w_bar)

    def test_identical_is_min_of_branches(self):
        cert_obs, cert_ioss = self.bundle.cert_obs, self.bundle.cert_ioss
        st = EstimatorState(x_hat=[1.0], e_bar=2.0)
        new = observer_step(self.observer, st, [0.0], [0.2])
        record = new.newest()
        observer_branch = cert_obs.eta_tilde * 2.0 + cert_obs.sigma4(self.w_bar)
        ioss_branch = cert_ioss.eta * 2.0 + cert_ioss.sigma1(self.w_bar + record.w_hat_norm) + \
            cert_ioss.sigma2(record.output_residual)
        self.assertAlmostEqual(self.identical(new, st), min(observer_branch, ioss_branch))
        with self.assertRaises(ContractViolation):
            self.identical(st, st)

    def test_identical_bound_is_sound(self):
        errors, radii = simulate(self.model, self.observer, self.identical, [0.0], [0.3],
                                 self.bundle.cert_obs.Vo.value([0.3], [0.0]), 60, seed=1)
        for error, radius in zip(errors, radii):
            self.assertLessEqual(error, radius * (1.0 + 1e-9) + 1e-12)

    def test_general_matches_identical_for_one_step(self):
        st = EstimatorState(x_hat=[0.8], e_bar=1.5, capacity=3)
        new = observer_step(self.observer, st, [0.1], [0.3])
        general = error_update_general(new, self.bundle.cert_ioss, self.bundle.cert_obs, self.w_bar, M_bar=1)
        self.assertAlmostEqual(general, self.identical(new, st))

    def test_general_equals_identical_along_trajectory(self):
        _, expected = simulate(self.model, self.observer, self.identical, [1.0], [0.0], 1.0, 40, seed=4, capacity=6)
        for M_bar in range(2, 7):
            def update(new, old):
                return error_update_general(new, self.bundle.cert_ioss, self.bundle.cert_obs, self.w_bar,
                                            M_bar=M_bar)

            _, radii = simulate(self.model, self.observer, update, [1.0], [0.0], 1.0, 40, seed=4, capacity=6)
            np.testing.assert_allclose(radii, expected, rtol=0.0, atol=1e-12)

    def test_longer_window_never_worse(self):
        def general(M_bar):
            return lambda new, old: error_update_general(new, self.bundle.cert_ioss, self.bundle.cert_obs,
                                                         self.w_bar, M_bar=M_bar)

        st = EstimatorState(x_hat=[0.5], e_bar=1.0, capacity=4)
        for t in range(6):
            new = observer_step(self.observer, st, [0.0], [0.05 * t])
            short, long = general(1)(new, st), general(4)(new, st)
            self.assertLessEqual(long, short + 1e-12)
            st = new.with_bound(long)

    def test_general_bound_is_sound(self):
        def update(new, old):
            return error_update_general(new, self.bundle.cert_ioss, self.bundle.cert_obs, self.w_bar, M_bar=5)

        errors, radii = simulate(self.model, self.observer, update, [1.0], [0.0], 1.0, 40, seed=2)
        for error, radius in zip(errors, radii):
            self.assertLessEqual(error, radius * (1.0 + 1e-9) + 1e-12)

    def test_predict_error(self):
        cert = self.bundle.cert_obs
        self.assertEqual(predict_error(3.0, 0, cert, self.w_bar), 3.0)
        self.assertAlmostEqual(predict_error(3.0, 1, cert, self.w_bar),
                               cert.eta_tilde * 3.0 + cert.sigma4(self.w_bar))
        limit = cert.sigma4(self.w_bar) / (1.0 - cert.eta_tilde)
        self.assertAlmostEqual(predict_error(3.0, 200, cert, self.w_bar), limit)
        with self.assertRaises(ContractViolation):
            predict_error(3.0, -1, cert, self.w_bar)

    def test_outlier_inflation(self):
        e_bar = [1.0, 0.8, 0.6, 0.5, 0.5]
        c = 2 * self.w_bar
        unchanged = outlier_inflation(e_bar, [self.w_bar] * 5, self.w_bar, self.bundle.cert_ioss,
                                      self.bundle.cert_obs, c)
        self.assertEqual(unchanged, e_bar)
        inflated = outlier_inflation(e_bar, [self.w_bar, 10 * self.w_bar, self.w_bar, self.w_bar, self.w_bar],
                                     self.w_bar, self.bundle.cert_ioss, self.bundle.cert_obs, c)
        self.assertEqual(inflated[:2], e_bar[:2])
        excess = [b - e for b, e in zip(inflated, e_bar)]
        self.assertGreater(excess[2], 0.0)
        self.assertLess(excess[4], excess[3])
        self.assertLess(excess[3], excess[2])


class TestObservabilityUpdate(unittest.TestCase):
    def setUp(self):
        self.model, _ = build_shift_register(w_bar=0.1)
        self.bundle = shift_register_certificates(self.model)
        self.observer = LuenbergerObserver(self.model, self.bundle.L, self.bundle.cert_obs)
        self.oc = shift_register_observability(self.model)

    def update(self, new, old):
        if new.t < self.oc.nu:
            return predict_error(old.e_bar, 1, self.bundle.cert_obs, self.model.w_bound)
        return observability_update(new, self.oc, self.bundle.cert_obs, self.model.w_bound, old.e_bar)

    def test_needs_nu_records(self):
        st = observer_step(self.observer, EstimatorState(x_hat=[0.0, 0.0], e_bar=0.0, capacity=2), [0.0], [0.0])
        with self.assertRaises(ContractViolation):
            observability_update(st, self.oc, self.bundle.cert_obs, self.model.w_bound, 0.0)

    def test_bound_is_sound(self):
        errors, radii = simulate(self.model, self.observer, self.update, [0.0, 0.0], [0.0, 0.0], 0.0, 30,
                                 seed=3, capacity=2)
        for error, radius in zip(errors, radii):
            self.assertLessEqual(error, radius * (1.0 + 1e-9) + 1e-12)
        # two steps of data pin the error to |w_{t-1}| + |w_{t-2}|
        self.assertLessEqual(max(radii[1:]), (2 * self.model.w_bound) ** 2 + 1e-12)


if __name__ == '__main__':
    unittest.main()
