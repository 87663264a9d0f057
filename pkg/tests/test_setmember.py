#!/usr/bin/env python3
"""
Tests for the set-membership radius
"""
import unittest

import numpy as np

from ofmpc.certificates import QuadraticForm
from ofmpc.core import ContractViolation, PlantModel
from ofmpc.models import build_double_integrator, build_scalar, synthesize_scalar
from ofmpc.nlp import check_gradients
from ofmpc.observer import EstimatorState, LuenbergerObserver, observer_step
from ofmpc.setmember import (InfeasibleMembership, MembershipProblem, MembershipWindow, membership_update,
                             solve_membership)


class TestMembershipWindow(unittest.TestCase):
    def test_contracts(self):
        with self.assertRaises(ContractViolation):
            MembershipWindow(records=[], anchor=([0.0], 1.0))
        with self.assertRaises(ContractViolation):
            MembershipWindow(records=[([0.0], [0.0])], anchor=([0.0], -1.0))
        with self.assertRaises(ContractViolation):
            MembershipWindow(records=[([0.0], [0.0])], anchor=([0.0], 1.0), M=2)

    def test_from_state(self):
        model, _ = build_scalar()
        bundle = synthesize_scalar(model)
        observer = LuenbergerObserver(model, bundle.L, bundle.cert_obs)
        st = EstimatorState(x_hat=[1.0], e_bar=0.5, capacity=3)
        for k in range(3):
            st = observer_step(observer, st, [0.1 * k], [0.2 * k]).with_bound(0.4 - 0.1 * k)
        win = MembershipWindow.from_state(st, 2)
        self.assertEqual(win.M, 2)
        np.testing.assert_allclose([u[0] for u, _ in win.records], [0.1, 0.2])
        np.testing.assert_allclose(win.x_anchor, st.history[-2].x_hat)
        self.assertAlmostEqual(win.e_anchor, 0.4)
        self.assertEqual(len(win.w_hat), 2)
        with self.assertRaises(ContractViolation):
            MembershipWindow.from_state(st, 4)


class TestSolveMembership(unittest.TestCase):
    def setUp(self):
        self.model, _ = build_scalar(w_bar=0.1)
        self.Vo = QuadraticForm([[1.0]])

    def test_exact_output_window(self):
        # y = x exactly pins x_{-1} = 0; the farthest end state is 0 + 0 - w_bar
        win = MembershipWindow(records=[([0.0], [0.0])], anchor=([0.0], 0.01))
        problem = MembershipProblem(self.model, win, self.Vo, [0.05], 0.1)
        self.assertFalse(problem.eliminate)
        solution = solve_membership(self.model, win, self.Vo, [0.05], 0.1,
                                    extra_inits=[problem.encode([0.0], [[-0.09]])])
        self.assertAlmostEqual(solution.gamma_hat, 0.15 ** 2, places=4)
        np.testing.assert_allclose(solution.x_bar_t, [-0.1], atol=1e-3)
        self.assertGreaterEqual(solution.wall_time, 0.0)

    def test_inconsistent_data(self):
        win = MembershipWindow(records=[([0.0], [0.0])], anchor=([1.0], 0.0))
        with self.assertRaises(InfeasibleMembership):
            solve_membership(self.model, win, self.Vo, [0.0], 0.1, n_starts=2)

    def test_noise_elimination(self):
        model, _ = build_double_integrator(w_bar=0.1)
        win = MembershipWindow(records=[([0.0], [0.0]), ([0.0], [0.0])], anchor=([0.0, 0.0], 1.0))
        problem = MembershipProblem(model, win, QuadraticForm(np.eye(2)), [0.0, 0.0], 0.1)
        self.assertTrue(problem.eliminate)
        self.assertEqual(problem.n_p, 2)
        self.assertEqual(problem.n_theta, 2 + 2 * 2)
        self.assertEqual(len(problem.initial_points(6, seed=1)), 6)
        self.assertIsNone(problem.nlp.eq_constraints)

    def test_derivatives(self):
        di, _ = build_double_integrator(w_bar=0.1)
        problems = [
            MembershipProblem(di, MembershipWindow(records=[([0.1], [0.2]), ([-0.2], [0.25]), ([0.0], [0.1])],
                                                   anchor=([0.2, 0.0], 0.5)),
                              QuadraticForm(np.eye(2)), [0.3, -0.1], 0.1),
            MembershipProblem(self.model, MembershipWindow(records=[([0.0], [0.1]), ([0.1], [0.0])],
                                                           anchor=([0.0], 0.04)),
                              self.Vo, [0.05], 0.1),
        ]
        rng = np.random.RandomState(5)
        for problem in problems:
            points = [rng.uniform(-1.0, 1.0, problem.n_theta) for _ in range(100)]
            report = check_gradients(problem.nlp, points)
            self.assertTrue(report.passed(), report)

    def test_update(self):
        model, _ = build_scalar(w_bar=0.1)
        cert = synthesize_scalar(model).cert_obs
        fallback = cert.eta_tilde * 1.0 + cert.sigma4(0.1)
        self.assertEqual(membership_update(0.01, 1.0, cert, 0.1), 0.01)
        self.assertAlmostEqual(membership_update(100.0, 1.0, cert, 0.1), fallback)


def sliding_mass(w_bar: float) -> PlantModel:
    """ x+ = [[1, 0.5], [0, 1]] x + [0, 0.5] (u + w), y = x_1 + w """
    A = np.array([[1.0, 0.5], [0.0, 1.0]])
    B = np.array([[0.0], [0.5]])
    C = np.array([[1.0, 0.0]])
    return PlantModel(n_x=2, n_u=1, n_y=1, n_w=1,
                      step_nominal=lambda x, u: A @ np.asarray(x, dtype=float) + B @ np.asarray(u, dtype=float),
                      output_nominal=lambda x, u: C @ np.asarray(x, dtype=float),
                      step_jacobian=lambda x, u: (A, B), output_jacobian=lambda x, u: (C, np.zeros((1, 1))),
                      E_x=B, E_y=[[1.0]], w_bound=w_bar, name='sliding-mass')


class TestGridOracle(unittest.TestCase):
    """ The multistart radius against a dense grid over the anchor disk. """

    def test_matches_grid(self):
        w_bar, e_anchor = 0.1, 0.09
        model = sliding_mass(w_bar)
        x = np.array([0.2, -0.1])
        records = []
        for w in (0.05, -0.08, 0.03):
            records.append(([0.0], [x[0] + w]))
            x = model.f(x, [0.0]) + model.E_x @ [w]
        x_anchor = np.array([0.25, -0.15])
        x_nominal = x_anchor
        for _ in records:
            x_nominal = model.f(x_nominal, [0.0])
        x_hat_t = x_nominal + [1.0, 0.5]
        win = MembershipWindow(records=records, anchor=(x_anchor, e_anchor))
        Vo = QuadraticForm(np.eye(2))

        problem = MembershipProblem(model, win, Vo, x_hat_t, w_bar)
        self.assertTrue(problem.eliminate)
        self.assertEqual(problem.n_p, 0)
        solution = solve_membership(model, win, Vo, x_hat_t, w_bar, n_starts=16)

        radius = np.sqrt(e_anchor)
        offsets = np.linspace(-radius, radius, 601)
        X1, X2 = np.meshgrid(x_anchor[0] + offsets, x_anchor[1] + offsets)
        feasible = (X1 - x_anchor[0]) ** 2 + (X2 - x_anchor[1]) ** 2 <= e_anchor
        for _, y in records:
            w = y[0] - X1
            feasible &= np.abs(w) <= w_bar
            X1, X2 = X1 + 0.5 * X2, X2 + 0.5 * w
        brute = float(np.max(((X1 - x_hat_t[0]) ** 2 + (X2 - x_hat_t[1]) ** 2)[feasible]))

        self.assertLessEqual(abs(solution.gamma_hat - brute), 0.05 * brute)
        self.assertGreaterEqual(solution.gamma_hat, Vo(x_hat_t, x) - 1e-9)


if __name__ == '__main__':
    unittest.main()
