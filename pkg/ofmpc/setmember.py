"""
Set-membership radius estimation.

Over a window of the last M steps, find the trajectory that is consistent
with the data, the disturbance bound and the anchor estimate, and lies
farthest from the current estimate in Vo. That distance bounds the true
error whenever the global maximum is found; multistart approximates it.
"""
import logging
import math
import time
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .certificates import ObserverCertificate, QuadraticForm
from .core import ContractViolation, OfmpcError, PlantModel, as_vector, gain_eval
from .nlp import NlpProblem, NlpSolution, SolverOptions, Status, solve_multistart
from .shooting import Memo, rollout

LOGGER = logging.getLogger('ofmpc.setmember')

DEFAULT_STARTS = 8


class InfeasibleMembership(OfmpcError):
    """ No start found a trajectory consistent with the data; usually an outlier. """
    pass


class MembershipWindow(object):
    """ The last M (u, y) pairs, oldest first, and the anchor (x_hat_{t-M}, e_{t-M}). """

    def __init__(self, *, records: Sequence[Tuple], anchor: Tuple, M: int = None,
                 w_hat: Sequence = None):
        self.records = [(np.asarray(u, dtype=float), np.asarray(y, dtype=float)) for u, y in records]
        self.M = len(self.records) if M is None else int(M)
        if self.M < 1:
            raise ContractViolation('Window length must be >= 1, got {}'.format(self.M))
        if len(self.records) != self.M:
            raise ContractViolation('Window has {} records, expected {}'.format(len(self.records), self.M))
        x_anchor, e_anchor = anchor
        self.x_anchor = np.asarray(x_anchor, dtype=float)
        self.e_anchor = float(e_anchor)
        if not self.e_anchor >= 0:
            raise ContractViolation('Anchor radius must be >= 0, got {}'.format(self.e_anchor))
        self.w_hat = None if w_hat is None else [np.asarray(w, dtype=float) for w in w_hat]
        """ observer disturbance estimates for the candidate replay """

    @classmethod
    def from_state(cls, st, M: int) -> 'MembershipWindow':
        """ Window over the newest M records of an EstimatorState. """
        records = list(st.history)[-M:]
        if len(records) < M:
            raise ContractViolation('Need {} records, have {}'.format(M, len(records)))
        return cls(records=[(r.u, r.y) for r in records], anchor=(records[0].x_hat, records[0].e_bar),
                   w_hat=[r.w_hat for r in records])


class MembershipProblem(object):
    """
    The transcribed maximization over theta = [x_{-M}, p_0..p_{M-1}].

    With E_y of full row rank the noise part of each disturbance is
    eliminated: w_k = E_y^+ (y_k - h(x_k, u_k)) + N z_k with N spanning
    the null space of E_y, and p_k = z_k. Otherwise p_k = w_k and output
    matching stays as equality constraints. The solver works on scaled
    variables xi with theta = center + scale * xi.
    """

    def __init__(self, model: PlantModel, win: MembershipWindow, Vo: QuadraticForm, x_hat_t, w_bar: float):
        self.model = model
        self.win = win
        self.Vo = Vo
        self.x_hat_t = as_vector(x_hat_t, model.n_x, 'x_hat_t')
        self.w_bar = float(w_bar)
        for u, y in win.records:
            as_vector(u, model.n_u, 'u')
            as_vector(y, model.n_y, 'y')
        as_vector(win.x_anchor, model.n_x, 'anchor')

        E_y = model.E_y
        self.eliminate = model.n_y > 0 and np.linalg.matrix_rank(E_y) == model.n_y
        if self.eliminate:
            self.E_y_pinv = E_y.T @ np.linalg.inv(E_y @ E_y.T)
            self.N = linalg.null_space(E_y) if model.n_w > model.n_y else np.zeros((model.n_w, 0))
            self.n_p = self.N.shape[1]
        else:
            self.n_p = model.n_w
        M, n_x = win.M, model.n_x
        self.n_theta = n_x + M * self.n_p

        x_scale = math.sqrt(win.e_anchor / Vo.lambda_min) if win.e_anchor > 0 else 1.0
        p_scale = self.w_bar if self.w_bar > 0 else 1.0
        self.center = np.concatenate([win.x_anchor, np.zeros(M * self.n_p)])
        self.scale = np.concatenate([np.full(n_x, x_scale), np.full(M * self.n_p, p_scale)])
        self.value_scale = max(win.e_anchor, Vo.lambda_max * (p_scale * np.linalg.norm(model.E_x, 2)) ** 2, 1e-12)
        self._evaluate = Memo(self._evaluate_theta)
        self.nlp = self._build()

    # variables

    def to_theta(self, xi: np.ndarray) -> np.ndarray:
        return self.center + self.scale * xi

    def to_xi(self, theta: np.ndarray) -> np.ndarray:
        return (np.asarray(theta, dtype=float) - self.center) / self.scale

    def encode(self, x_start, w_seq: Sequence) -> np.ndarray:
        """ Scaled variables for a trajectory given by its first state and disturbances. """
        params = []
        for k, w in enumerate(w_seq):
            w = as_vector(w, self.model.n_w, 'w')
            params.append(self.N.T @ w if self.eliminate else w)
        theta = np.concatenate([as_vector(x_start, self.model.n_x, 'x_start')] +
                               [np.asarray(p).reshape(-1) for p in params])
        return self.to_xi(theta)

    # evaluation

    def _disturbance(self, k: int, x: np.ndarray, p: np.ndarray):
        """ w_k and its derivatives with respect to x_k and p_k """
        model = self.model
        u, y = self.win.records[k]
        if not self.eliminate:
            return p, np.zeros((model.n_w, model.n_x)), np.eye(model.n_w)
        C, _ = model.output_jacobian(x, u)
        w = self.E_y_pinv @ (y - model.h(x, u)) + self.N @ p
        return w, -self.E_y_pinv @ C, self.N

    def _step(self, k: int, x: np.ndarray, p: np.ndarray):
        model = self.model
        u, _ = self.win.records[k]
        w, dw_dx, dw_dp = self._disturbance(k, x, p)
        A, _ = model.step_jacobian(x, u)
        return model.f(x, u) + model.E_x @ w, A + model.E_x @ dw_dx, model.E_x @ dw_dp

    def _evaluate_theta(self, xi: np.ndarray) -> dict:
        theta = self.to_theta(xi)
        n_x, M = self.model.n_x, self.win.M
        params = theta[n_x:].reshape(M, self.n_p)
        traj = rollout(self._step, theta[:n_x], params)
        disturbances, jacobians = [], []
        for k in range(M):
            w, dw_dx, dw_dp = self._disturbance(k, traj.states[k], params[k])
            J = dw_dx @ traj.sens[k]
            J[:, traj.param_columns(k)] += dw_dp
            disturbances.append(w)
            jacobians.append(J * self.scale)
        return dict(theta=theta, traj=traj, w=disturbances, dw=jacobians)

    def objective(self, xi):
        data = self._evaluate(xi)
        return self.Vo.value(self.x_hat_t, data['traj'].states[-1]) / self.value_scale

    def gradient(self, xi):
        data = self._evaluate(xi)
        traj = data['traj']
        g = self.Vo.gradient(traj.states[-1], self.x_hat_t) @ traj.sens[-1]
        return g * self.scale / self.value_scale

    def _anchor(self, xi):
        theta = self._evaluate(xi)['theta']
        d = theta[:self.model.n_x] - self.win.x_anchor
        return d, theta

    def ineq(self, xi) -> np.ndarray:
        data = self._evaluate(xi)
        values = []
        if self.win.e_anchor > 0:
            d, _ = self._anchor(xi)
            values.append(float(d @ self.Vo.P @ d) / self.win.e_anchor - 1.0)
        if self.w_bar > 0:
            values.extend(float(w @ w) / self.w_bar ** 2 - 1.0 for w in data['w'])
        return np.array(values)

    def ineq_jacobian(self, xi) -> np.ndarray:
        data = self._evaluate(xi)
        rows = []
        if self.win.e_anchor > 0:
            d, _ = self._anchor(xi)
            row = np.zeros(self.n_theta)
            row[:self.model.n_x] = 2.0 * (self.Vo.P @ d) / self.win.e_anchor
            rows.append(row * self.scale)
        if self.w_bar > 0:
            rows.extend(2.0 * (w @ J) / self.w_bar ** 2 for w, J in zip(data['w'], data['dw']))
        return np.array(rows).reshape(len(rows), self.n_theta)

    def eq(self, xi) -> np.ndarray:
        data = self._evaluate(xi)
        values = []
        if self.win.e_anchor == 0:
            d, _ = self._anchor(xi)
            values.extend(d)
        if self.w_bar == 0:
            for w in data['w']:
                values.extend(w)
        if not self.eliminate:
            model = self.model
            for k, (u, y) in enumerate(self.win.records):
                values.extend(model.h(data['traj'].states[k], u) + model.E_y @ data['w'][k] - y)
        return np.array(values)

    def eq_jacobian(self, xi) -> np.ndarray:
        data = self._evaluate(xi)
        n_x = self.model.n_x
        rows = []
        if self.win.e_anchor == 0:
            block = np.zeros((n_x, self.n_theta))
            block[:, :n_x] = np.eye(n_x)
            rows.append(block * self.scale)
        if self.w_bar == 0:
            rows.extend(data['dw'])
        if not self.eliminate:
            model = self.model
            traj = data['traj']
            for k, (u, _) in enumerate(self.win.records):
                C, _ = model.output_jacobian(traj.states[k], u)
                rows.append((C @ traj.sens[k]) * self.scale + model.E_y @ data['dw'][k])
        if not rows:
            return np.zeros((0, self.n_theta))
        return np.vstack(rows)

    def _build(self) -> NlpProblem:
        has_eq = self.win.e_anchor == 0 or self.w_bar == 0 or not self.eliminate
        has_ineq = self.win.e_anchor > 0 or self.w_bar > 0
        return NlpProblem(self.n_theta, self.objective, gradient=self.gradient,
                          eq_constraints=self.eq if has_eq else None,
                          eq_jacobian=self.eq_jacobian if has_eq else None,
                          ineq_constraints=self.ineq if has_ineq else None,
                          ineq_jacobian=self.ineq_jacobian if has_ineq else None,
                          sense='max', name='set-membership')

    def constraint_violation(self, xi) -> float:
        """ Largest violation in the scaled constraint units used by the solver. """
        viol = 0.0
        if self.nlp.eq_constraints is not None:
            eq = self.eq(xi)
            viol = max(viol, float(np.max(np.abs(eq))) if eq.size else 0.0)
        if self.nlp.ineq_constraints is not None:
            ineq = self.ineq(xi)
            viol = max(viol, float(np.max(ineq)) if ineq.size else 0.0)
        return viol

    def end_state(self, xi) -> np.ndarray:
        return self._evaluate(xi)['traj'].states[-1].copy()

    # starts

    def initial_points(self, n_starts: int, seed: int = 0) -> List[np.ndarray]:
        """
        Candidate replay first, then anchor-boundary points along the
        principal axes of Vo (longest first, both signs), then seeded
        random points in the unit ball of the scaled variables.
        """
        starts = [self._replay()]
        if self.win.e_anchor > 0:
            eigenvalues, vectors = np.linalg.eigh(self.Vo.P)
            for i in range(len(eigenvalues)):
                radius = math.sqrt(self.win.e_anchor / eigenvalues[i])
                for sign in (1.0, -1.0):
                    xi = np.zeros(self.n_theta)
                    xi[:self.model.n_x] = sign * radius * vectors[:, i] / self.scale[:self.model.n_x]
                    starts.append(xi)
        rng = np.random.RandomState(seed)
        while len(starts) < n_starts:
            direction = rng.normal(size=self.n_theta)
            starts.append(direction / np.linalg.norm(direction) * rng.uniform() ** (1.0 / self.n_theta))
        return starts[:max(n_starts, 1)]

    def _replay(self) -> np.ndarray:
        xi = np.zeros(self.n_theta)
        if self.win.w_hat is not None and self.n_p:
            params = [(self.N.T @ w) if self.eliminate else w for w in self.win.w_hat]
            theta = np.concatenate([self.win.x_anchor] + [np.asarray(p).reshape(-1) for p in params])
            xi = self.to_xi(theta)
        return xi


class MembershipSolution(object):
    """ gamma_hat and what produced it. """

    def __init__(self, *, gamma_hat: float, status: str, x_bar_t: np.ndarray, start_index: int,
                 wall_time: float, nlp: NlpSolution):
        self.gamma_hat = gamma_hat
        self.status = status
        self.x_bar_t = x_bar_t
        """ the maximizing end state """
        self.start_index = start_index
        self.wall_time = wall_time
        self.nlp = nlp

    def __repr__(self):
        return 'MembershipSolution(gamma_hat={:.6g}, status={!r}, start={})'.format(
            self.gamma_hat, self.status, self.start_index)


def solve_membership(model: PlantModel, win: MembershipWindow, Vo: QuadraticForm, x_hat_t, w_bar: float,
                     nlp_opts: SolverOptions = None, n_starts: int = DEFAULT_STARTS, seed: int = 0,
                     extra_inits: Sequence[np.ndarray] = None) -> MembershipSolution:
    """
    Maximize Vo(x_hat_t, x_0) over trajectories consistent with the window.

    :param extra_inits: additional starts in scaled variables (see MembershipProblem.encode)
    :raises: InfeasibleMembership if no start reaches a feasible point
    """
    started = time.monotonic()
    problem = MembershipProblem(model, win, Vo, x_hat_t, w_bar)
    opts = nlp_opts or SolverOptions()
    inits = problem.initial_points(n_starts, seed) + list(extra_inits or [])
    solution = solve_multistart(problem.nlp, inits, opts)
    if solution.status == Status.infeasible or problem.constraint_violation(solution.vars) > opts.feas_tol:
        raise InfeasibleMembership('No trajectory consistent with the window (violation {:.3g})'
                                   .format(solution.max_violation))
    x_bar_t = problem.end_state(solution.vars)
    gamma_hat = Vo.value(problem.x_hat_t, x_bar_t)
    elapsed = time.monotonic() - started
    LOGGER.debug('set-membership: gamma_hat={:.6g} status={} start={} ({:.3f}s)'
                 .format(gamma_hat, solution.status, solution.start_index, elapsed))
    return MembershipSolution(gamma_hat=gamma_hat, status=solution.status, x_bar_t=x_bar_t,
                              start_index=solution.start_index, wall_time=elapsed, nlp=solution)


def membership_update(gamma_hat: float, e_bar_prev: float, cert_obs: ObserverCertificate, w_bar: float) -> float:
    """ min(gamma_hat, eta_tilde e_prev + sigma4(w_bar)) """
    return min(float(gamma_hat), cert_obs.eta_tilde * e_bar_prev + gain_eval(cert_obs.sigma4, w_bar))
