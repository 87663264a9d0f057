#!/usr/bin/env python3
"""
Tests for gains, plant models and constraint sets
"""
import unittest

import numpy as np

from ofmpc.core import (ConstraintSet, ContractViolation, Gain, LazyGain, ModelRejected, PlantModel,
                        UnsupportedCertificate, gain_eval, gain_slope, model_output, model_step, right_inverse)
from ofmpc.models import build_coupled_pair, build_scalar


class TestGain(unittest.TestCase):
    def test_terms_are_merged_and_sorted(self):
        gain = Gain([(1.0, 2.0), (0.0, 3.0), (0.5, 1.0), (2.0, 2.0)])
        self.assertEqual(gain.terms, ((0.5, 1.0), (3.0, 2.0)))
        self.assertEqual(gain, Gain([(3.0, 2.0), (0.5, 1.0)]))

    def test_invalid_terms(self):
        for terms in ([(-1.0, 1.0)], [(1.0, 0.0)], [(float('inf'), 1.0)], [(1.0,)]):
            with self.assertRaises(ContractViolation):
                Gain(terms)

    def test_value_and_eval(self):
        gain = Gain([(2.0, 2.0), (3.0, 1.0)])
        self.assertAlmostEqual(gain(2.0), 14.0)
        self.assertEqual(gain_eval(Gain.zero(), 5.0), 0.0)
        for r in (-1.0, float('nan'), float('inf')):
            with self.assertRaises(ContractViolation):
                gain_eval(gain, r)

    def test_compose_closed_form(self):
        self.assertEqual(Gain.quadratic(2.0).compose(Gain.linear(3.0)), Gain.quadratic(18.0))
        composed = Gain.quadratic(1.0).compose(Gain([(1.0, 1.0), (1.0, 2.0)]))
        self.assertIsInstance(composed, Gain)
        self.assertAlmostEqual(composed(2.0), 36.0)

    def test_inverse_and_root(self):
        inverse = Gain.quadratic(4.0).inverse()
        self.assertAlmostEqual(inverse(16.0), 2.0)
        self.assertEqual(Gain.quadratic(9.0).root(), Gain.linear(3.0))
        self.assertTrue(Gain.zero().root().is_zero)
        with self.assertRaises(UnsupportedCertificate):
            Gain([(1.0, 1.0), (1.0, 2.0)]).inverse()
        with self.assertRaises(UnsupportedCertificate):
            Gain([(1.0, 1.0), (1.0, 2.0)]).root()

    def test_superadditivity(self):
        self.assertTrue(Gain([(1.0, 1.0), (2.0, 2.0)]).is_superadditive)
        self.assertFalse(Gain([(1.0, 0.5)]).is_superadditive)
        self.assertTrue(Gain.zero().is_superadditive)

    def test_lazy_combinators(self):
        lazy = LazyGain(lambda r: r ** 3, superadditive=True)
        total = lazy + Gain.linear(1.0)
        self.assertAlmostEqual(total(2.0), 10.0)
        self.assertTrue(total.is_superadditive)
        self.assertAlmostEqual((2 * lazy)(1.0), 2.0)
        self.assertAlmostEqual(lazy.maximum(Gain.linear(4.0))(1.0), 4.0)

    def test_shifted_residual_majorizes(self):
        gain = Gain([(1.0, 2.0), (0.5, 0.5)])
        bound = 2.0
        residual = gain.shifted_residual(bound)
        for a in np.linspace(0.0, bound, 9):
            for r in np.linspace(0.0, 3.0, 13):
                self.assertLessEqual(gain(a + r), gain(a) + residual(r) + 1e-12)

    def test_slope(self):
        self.assertAlmostEqual(gain_slope(Gain([(2.0, 2.0), (3.0, 1.0)]), 1.0), 7.0)
        self.assertAlmostEqual(gain_slope(Gain.linear(3.0), 0.0), 3.0)
        self.assertAlmostEqual(gain_slope(LazyGain(lambda r: r ** 2), 3.0), 6.0, places=5)

    def test_list_conversion(self):
        gain = Gain([(1.5, 1.0), (0.25, 2.0)])
        self.assertEqual(Gain.from_list(gain.to_list()), gain)


class TestPlantModel(unittest.TestCase):
    def setUp(self):
        self.model, self.constraints = build_scalar(a=0.9, noise_gain=0.5, w_bar=0.1)

    def test_step_and_output(self):
        np.testing.assert_allclose(model_step(self.model, [1.0], [0.5], [0.2]), [1.6])
        np.testing.assert_allclose(model_output(self.model, [1.0], [0.5], [0.2]), [1.1])

    def test_dimension_mismatch(self):
        with self.assertRaises(ContractViolation):
            model_step(self.model, [1.0, 2.0], [0.0], [0.0])
        with self.assertRaises(ContractViolation):
            model_output(self.model, [1.0], [0.0], [0.0, 0.0])
        with self.assertRaises(ContractViolation):
            PlantModel(n_x=2, n_u=1, n_y=1, n_w=1, step_nominal=None, output_nominal=None,
                       E_x=[[1.0]], E_y=[[0.0]], w_bound=0.1)

    def test_numeric_jacobians(self):
        model = PlantModel(n_x=2, n_u=1, n_y=1, n_w=2,
                           step_nominal=lambda x, u: np.array([x[0] ** 2, x[1] * u[0]]),
                           output_nominal=lambda x, u: np.array([x[0] + x[1] ** 3]),
                           E_x=np.eye(2), E_y=np.zeros((1, 2)), w_bound=0.1)
        A, B = model.step_jacobian([1.0, 2.0], [3.0])
        np.testing.assert_allclose(A, [[2.0, 0.0], [0.0, 3.0]], atol=1e-6)
        np.testing.assert_allclose(B, [[0.0], [2.0]], atol=1e-6)
        C, D = model.output_jacobian([1.0, 2.0], [3.0])
        np.testing.assert_allclose(C, [[1.0, 12.0]], atol=1e-5)
        np.testing.assert_allclose(D, [[0.0]], atol=1e-6)

    def test_right_inverse(self):
        E = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]])
        np.testing.assert_allclose(E @ right_inverse(E), np.eye(2), atol=1e-12)
        with self.assertRaises(ModelRejected):
            right_inverse([[1.0, 2.0], [2.0, 4.0]])

    def test_rank_deficient_disturbance_channel(self):
        model, _ = build_coupled_pair()
        with self.assertRaises(ModelRejected):
            _ = model.E_x_pinv

    def test_with_w_bound(self):
        other = self.model.with_w_bound(0.5)
        self.assertEqual(other.w_bound, 0.5)
        self.assertEqual(self.model.w_bound, 0.1)
        with self.assertRaises(ContractViolation):
            self.model.with_w_bound(-1.0)


class TestConstraintSet(unittest.TestCase):
    def setUp(self):
        self.constraints = ConstraintSet.box([-1.0, -np.inf], [1.0, np.inf], [-2.0], [2.0])

    def test_box_rows(self):
        self.assertEqual(self.constraints.r, 4)
        self.assertEqual(self.constraints.names, ['x1 <= 1', 'x1 >= -1', 'u1 <= 2', 'u1 >= -2'])

    def test_evaluate_and_margin(self):
        x, u = np.array([0.5, 100.0]), np.array([0.0])
        np.testing.assert_allclose(self.constraints.evaluate(x, u), [-0.5, -1.5, -2.0, -2.0])
        self.assertAlmostEqual(self.constraints.margin(x, u), 0.5)
        self.assertTrue(self.constraints.is_feasible(x, u))
        self.assertAlmostEqual(self.constraints.margin([1.5, 0.0], [0.0]), -0.5)
        self.assertFalse(self.constraints.is_feasible([1.5, 0.0], [0.0]))

    def test_linear_jacobian(self):
        Jx, Ju = self.constraints.jacobian(np.zeros(2), np.zeros(1))
        np.testing.assert_allclose(Jx[:, 0], [1.0, -1.0, 0.0, 0.0])
        np.testing.assert_allclose(Ju[:, 0], [0.0, 0.0, 1.0, -1.0])

    def test_tightening(self):
        tightened = self.constraints.with_tightening([Gain.linear(1.0)] * 4, [Gain.quadratic(2.0)] * 4)
        np.testing.assert_allclose(tightened.tightening(0.5, 1.0), [2.5] * 4)
        np.testing.assert_allclose(self.constraints.tightening(0.5, 1.0), [0.0] * 4)

    def test_tube_gains_must_be_superadditive(self):
        with self.assertRaises(ContractViolation):
            self.constraints.with_tightening([Gain([(1.0, 0.5)])] * 4, [Gain()] * 4)
        with self.assertRaises(ContractViolation):
            self.constraints.with_tightening([Gain()] * 3, [Gain()] * 4)


if __name__ == '__main__':
    unittest.main()
