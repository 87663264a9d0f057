#!/usr/bin/env python3
"""
Tests for the SQP solver, multistart and single-shooting rollouts
"""
import csv
import math
import os
import tempfile
import unittest

import numpy as np

from ofmpc.core import ContractViolation, EvaluationError
from ofmpc.nlp import NlpProblem, SolverOptions, Status, check_gradients, solve, solve_multistart
from ofmpc.shooting import Memo, rollout


def quadratic(center):
    center = np.asarray(center, dtype=float)
    return (lambda v: float((v - center) @ (v - center))), (lambda v: 2.0 * (v - center))


class TestSolve(unittest.TestCase):
    def test_unconstrained(self):
        f, g = quadratic([1.0, -2.0])
        solution = solve(NlpProblem(2, f, gradient=g), [5.0, 5.0])
        self.assertEqual(solution.status, Status.converged)
        np.testing.assert_allclose(solution.vars, [1.0, -2.0], atol=1e-6)
        self.assertLessEqual(solution.merit, solution.init_merit)

    def test_equality(self):
        f, g = quadratic([0.0, 0.0])
        problem = NlpProblem(2, f, gradient=g, eq_constraints=lambda v: [v[0] + v[1] - 1.0],
                             eq_jacobian=lambda v: [[1.0, 1.0]])
        solution = solve(problem, [3.0, -1.0])
        self.assertEqual(solution.status, Status.converged)
        np.testing.assert_allclose(solution.vars, [0.5, 0.5], atol=1e-6)
        self.assertLessEqual(solution.max_eq_violation, 1e-6)

    def test_inequality_without_derivatives(self):
        problem = NlpProblem(1, lambda v: (v[0] - 2.0) ** 2, ineq_constraints=[lambda v: v[0] - 1.0])
        solution = solve(problem, [0.0])
        self.assertTrue(solution.is_feasible(1e-6))
        self.assertAlmostEqual(solution.vars[0], 1.0, places=5)
        self.assertAlmostEqual(solution.objective_value, 1.0, places=5)

    def test_maximize_in_box(self):
        problem = NlpProblem(1, lambda v: v[0], gradient=lambda v: [1.0], bounds=([0.0], [3.0]), sense='max')
        solution = solve(problem, [1.0])
        self.assertAlmostEqual(solution.vars[0], 3.0)
        self.assertAlmostEqual(solution.objective_value, 3.0)

    def test_infeasible(self):
        problem = NlpProblem(1, lambda v: v[0] ** 2, ineq_constraints=lambda v: [v[0] + 1.0, 1.0 - v[0]])
        solution = solve(problem, [0.0])
        self.assertEqual(solution.status, Status.infeasible)
        self.assertFalse(solution.is_feasible(1e-6))

    def test_stalled_line_search(self):
        # the supplied gradient points uphill, so no step along d decreases the merit
        f, g = quadratic([1.0])
        solution = solve(NlpProblem(1, f, gradient=lambda v: -g(v)), [3.0])
        self.assertEqual(solution.status, Status.stalled)
        self.assertTrue(solution.is_feasible(1e-6))
        np.testing.assert_allclose(solution.vars, [3.0])

    def test_contracts(self):
        with self.assertRaises(ContractViolation):
            NlpProblem(1, lambda v: 0.0, sense='sideways')
        with self.assertRaises(ContractViolation):
            NlpProblem(1, lambda v: 0.0, bounds=([1.0], [0.0]))
        with self.assertRaises(ContractViolation):
            solve(NlpProblem(1, lambda v: 0.0, bounds=([0.0], [1.0])), [2.0])
        with self.assertRaises(EvaluationError):
            solve(NlpProblem(1, lambda v: math.nan), [0.0])

    def test_trace_file(self):
        f, g = quadratic([1.0])
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'solver.csv')
            solve(NlpProblem(1, f, gradient=g), [0.0], SolverOptions(trace_path=path))
            with open(path) as trace:
                rows = list(csv.reader(trace))
        self.assertEqual(rows[0], ['iteration', 'merit', 'step_norm', 'penalty', 'violation', 'objective',
                                   'step_length'])
        self.assertEqual(rows[1][0], '0')
        self.assertGreater(len(rows), 2)

    def test_options_copy(self):
        opts = SolverOptions(max_iters=5)
        other = opts.copy(tol=1e-3)
        self.assertEqual(other.max_iters, 5)
        self.assertEqual(other.tol, 1e-3)
        self.assertEqual(opts.tol, 1e-8)


class TestMultistart(unittest.TestCase):
    def setUp(self):
        # two local minima; the one near -1 is lower
        self.problem = NlpProblem(1, lambda v: (v[0] ** 2 - 1.0) ** 2 + 0.1 * v[0],
                                  gradient=lambda v: [4.0 * v[0] * (v[0] ** 2 - 1.0) + 0.1])

    def test_best_start_wins(self):
        for workers in (1, 2):
            solution = solve_multistart(self.problem, [[2.0], [-2.0]], SolverOptions(max_workers=workers))
            self.assertEqual(solution.start_index, 1)
            self.assertLess(solution.vars[0], -0.9)

    def test_failing_start_is_skipped(self):
        problem = NlpProblem(1, lambda v: v[0] ** 2 if v[0] < 5.0 else math.nan)
        solution = solve_multistart(problem, [[10.0], [1.0]])
        self.assertEqual(solution.start_index, 1)
        self.assertAlmostEqual(solution.vars[0], 0.0, places=5)

    def test_empty(self):
        with self.assertRaises(ContractViolation):
            solve_multistart(self.problem, [])


class TestGradientCheck(unittest.TestCase):
    def test_detects_wrong_gradient(self):
        f, g = quadratic([1.0, 2.0])
        good = NlpProblem(2, f, gradient=g, ineq_constraints=lambda v: [v[0] * v[1]],
                          ineq_jacobian=lambda v: [[v[1], v[0]]])
        self.assertTrue(check_gradients(good, [[0.0, 0.0], [1.0, -3.0]]).passed())
        bad = NlpProblem(2, f, gradient=lambda v: g(v) + 1.0)
        report = check_gradients(bad, [[0.0, 0.0]])
        self.assertFalse(report.passed())
        self.assertEqual(report.n_points, 1)


class TestRollout(unittest.TestCase):
    def test_linear_sensitivities(self):
        A = np.array([[1.0, 0.5], [0.0, 1.0]])
        B = np.array([[0.0], [0.5]])

        def step(k, x, p):
            return A @ x + B @ p, A, B

        traj = rollout(step, [1.0, 0.0], [[1.0], [-1.0], [0.5]])
        self.assertEqual(traj.horizon, 3)
        np.testing.assert_allclose(traj.states[1], [1.0, 0.5])
        np.testing.assert_allclose(traj.sens[3][:, :2], A @ A @ A)
        np.testing.assert_allclose(traj.sens[3][:, traj.param_columns(0)], A @ A @ B)
        np.testing.assert_allclose(traj.sens[3][:, traj.param_columns(2)], B)
        self.assertEqual(traj.param_columns(1), slice(3, 4))

    def test_fixed_initial_state(self):
        traj = rollout(lambda k, x, p: (x + p, np.eye(1), np.eye(1)), [0.0], [[1.0], [2.0]], x0_free=False)
        np.testing.assert_allclose(traj.states[:, 0], [0.0, 1.0, 3.0])
        self.assertEqual(traj.sens.shape, (3, 1, 2))
        self.assertEqual(traj.param_columns(0), slice(0, 1))

    def test_memo(self):
        calls = []
        memo = Memo(lambda v: calls.append(v.copy()) or float(v.sum()))
        self.assertEqual(memo(np.array([1.0, 2.0])), 3.0)
        self.assertEqual(memo(np.array([1.0, 2.0])), 3.0)
        self.assertEqual(memo(np.array([2.0, 2.0])), 4.0)
        self.assertEqual(len(calls), 2)


if __name__ == '__main__':
    unittest.main()
