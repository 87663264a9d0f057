"""
Moving horizon estimation with a discounted incremental-detectability cost.

The cost over the window (oldest step first, j = M - k):

    sum_j eta^(j-1) (sigma1(w_bar + |w_j|) + sigma2(|y_hat_j - y_j|)) + eta^M sigma_delta(|x_{-M} - anchor|_P)

Norms enter through epigraph variables so the transcribed problem stays
smooth; the certified radius evaluated at any feasible point is sound.
"""
import logging
import math
import time
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .certificates import IossCertificate, ObserverCertificate, QuadraticForm, Sampler
from .core import (ConstraintSet, ContractViolation, Gain, KFunction, PlantModel, UnsupportedCertificate,
                   as_vector, gain_eval, gain_slope)
from .nlp import NlpProblem, NlpSolution, SolverOptions, Status, solve_multistart
from .observer import (EstimatorState, LuenbergerObserver, envelope_conversions, error_update_general,
                       error_update_identical, observer_step, prediction_mismatch_bound)
from .shooting import Memo, rollout

LOGGER = logging.getLogger('ofmpc.mhe')


def sigma_delta_quadratic(e_cap: float) -> Gain:
    """
    Continuity modulus of W(x, z) = |x - z|_P^2 in its first argument, on the P-norm:
    W(a, z) <= W(b, z) + sigma(|a - b|_P) whenever W(b, z) <= e_cap.
    """
    if e_cap < 0:
        raise ContractViolation('e_cap must be >= 0, got {}'.format(e_cap))
    return Gain([(1.0, 2.0), (2.0 * math.sqrt(e_cap), 1.0)])


class MheConfig(object):
    """
    Horizon and gains of the MHE cost.

    The arrival term is sigma_delta(|x_{-M} - anchor|_P) with the P of
    metric; alpha1 is the lower envelope of W on the same P-norm. When
    e_cap is set, sigma_delta is the quadratic modulus for that cap and is
    rebuilt (with a warning) for anchors whose radius exceeds it.
    """

    def __init__(self, *, M: int, eta: float, sigma1: KFunction, sigma2: KFunction, sigma_delta: KFunction,
                 alpha1: KFunction, metric: QuadraticForm, e_cap: float = None):
        if M < 1:
            raise ContractViolation('MHE horizon must be >= 1, got {}'.format(M))
        if gain_eval(sigma_delta, 0.0) != 0.0:
            raise ContractViolation('sigma_delta(0) must be 0')
        if metric.root:
            raise UnsupportedCertificate('MHE expects a squared quadratic W')
        self.M = int(M)
        self.eta = float(eta)
        self.sigma1 = sigma1
        self.sigma2 = sigma2
        self.sigma_delta = sigma_delta
        self.alpha1 = alpha1
        self.metric = metric
        self.e_cap = e_cap

    @classmethod
    def from_certificate(cls, cert: IossCertificate, M: int, e_cap: float) -> 'MheConfig':
        """ Quadratic W: sigma_delta for radii up to e_cap, alpha1(r) = r^2 on the P-norm. """
        return cls(M=M, eta=cert.eta, sigma1=cert.sigma1, sigma2=cert.sigma2,
                   sigma_delta=sigma_delta_quadratic(e_cap), alpha1=Gain.quadratic(1.0),
                   metric=cert.W, e_cap=e_cap)

    def arrival_gain(self, e_bar_anchor: float) -> KFunction:
        if self.e_cap is not None and e_bar_anchor > self.e_cap:
            LOGGER.warning('Anchor radius {:.4g} exceeds the continuity cap {:.4g}; widening sigma_delta'
                           .format(e_bar_anchor, self.e_cap))
            return sigma_delta_quadratic(e_bar_anchor)
        return self.sigma_delta

    def __repr__(self):
        return 'MheConfig(M={}, eta={}, sigma_delta={!r})'.format(self.M, self.eta, self.sigma_delta)


def check_linear_bound(cfg: MheConfig, e_max: float, samples: int = 40, limit: float = 1e3) -> bool:
    """
    Whether sigma_delta(alpha1^-1(e)) <= c e on (0, e_max] for a moderate c.

    The a-priori bound only converges for long horizons when it does; a
    failed check is logged as a warning and not enforced.
    """
    if e_max <= 0:
        return True
    inverse = cfg.alpha1.inverse()
    sigma = cfg.arrival_gain(e_max)
    grid = e_max * np.logspace(-8, 0, samples)
    ratios = [gain_eval(sigma, gain_eval(inverse, e)) / e for e in grid]
    ok = max(ratios) <= limit * max(ratios[-1], 1e-300)
    if not ok:
        LOGGER.warning('sigma_delta o alpha1^-1 is not linearly bounded on [0, {:.4g}] '
                       '(ratio {:.3g} near zero vs {:.3g} at e_max); the a-priori MHE bound may grow with M'
                       .format(e_max, max(ratios), ratios[-1]))
    return ok


class MheSolution(object):
    """ Optimal window trajectory, its cost and the certified radius (in W). """

    def __init__(self, *, x_hat_t, x_hat_anchor, w_seq, y_seq, cost: float, e_bar: float, status: str,
                 M_t: int, wall_time: float = 0.0, nlp: NlpSolution = None):
        self.x_hat_t = x_hat_t
        self.x_hat_anchor = x_hat_anchor
        self.w_seq = w_seq
        self.y_seq = y_seq
        self.cost = cost
        self.e_bar = e_bar
        self.status = status
        self.M_t = M_t
        self.wall_time = wall_time
        self.nlp = nlp

    def __repr__(self):
        return 'MheSolution(M_t={}, cost={:.6g}, e_bar={:.6g}, status={!r})'.format(
            self.M_t, self.cost, self.e_bar, self.status)


class MheProblem(object):
    """
    Variables (scaled): [x_{-M}, w_0..w_{M-1}, nu_0..nu_{M-1}, zeta_0..zeta_{M-1}, nu_a]

    with nu_k >= |w_k|, zeta_k >= |y_hat_k - y_k| and nu_a >= |x_{-M} - anchor|_P.
    radius(xi) upper-bounds the certified radius of the trajectory at xi.
    """

    def __init__(self, model: PlantModel, cfg: MheConfig, window: Sequence[Tuple], anchor: Tuple,
                 w_bar: float):
        self.model = model
        self.cfg = cfg
        self.window = [(as_vector(u, model.n_u, 'u'), as_vector(y, model.n_y, 'y')) for u, y in window]
        self.M = len(self.window)
        if self.M < 1:
            raise ContractViolation('MHE window must hold at least one step')
        x_anchor, e_anchor = anchor
        self.x_anchor = as_vector(x_anchor, model.n_x, 'anchor')
        self.e_anchor = float(e_anchor)
        if not self.e_anchor >= 0:
            raise ContractViolation('Anchor radius must be >= 0, got {}'.format(self.e_anchor))
        self.w_bar = float(w_bar)
        self.sigma_delta = cfg.arrival_gain(self.e_anchor)
        self.P = cfg.metric.P

        n_x, n_w, M = model.n_x, model.n_w, self.M
        self.i_w = n_x
        self.i_nu = n_x + M * n_w
        self.i_zeta = self.i_nu + M
        self.i_a = self.i_zeta + M
        self.n_vars = self.i_a + 1

        x_scale = math.sqrt(self.e_anchor / cfg.metric.lambda_min) if self.e_anchor > 0 else 1.0
        w_scale = self.w_bar if self.w_bar > 0 else 1.0
        a_scale = math.sqrt(self.e_anchor) if self.e_anchor > 0 else 1.0
        self.scale = np.concatenate([np.full(n_x, x_scale), np.full(M * n_w, w_scale), np.full(M, w_scale),
                                     np.full(M, w_scale), [a_scale]])
        self.center = np.concatenate([self.x_anchor, np.zeros(self.n_vars - n_x)])
        self.value_scale = max(self.e_anchor, gain_eval(cfg.sigma1, 2.0 * self.w_bar)) or 1.0
        self._evaluate = Memo(self._evaluate_xi)
        lower = np.full(self.n_vars, -np.inf)
        lower[self.i_nu:] = -self.center[self.i_nu:] / self.scale[self.i_nu:]
        self.nlp = NlpProblem(self.n_vars, self.objective, gradient=self.gradient,
                              ineq_constraints=self.ineq, ineq_jacobian=self.ineq_jacobian,
                              bounds=(lower, np.full(self.n_vars, np.inf)), name='mhe')

    # variables

    def to_theta(self, xi):
        return self.center + self.scale * np.asarray(xi, dtype=float)

    def to_xi(self, theta):
        return (np.asarray(theta, dtype=float) - self.center) / self.scale

    def encode(self, x_start, w_seq: Sequence) -> np.ndarray:
        """ Scaled variables for a trajectory, with every epigraph variable tight. """
        model = self.model
        x_start = as_vector(x_start, model.n_x, 'x_start')
        w_seq = [as_vector(w, model.n_w, 'w') for w in w_seq]
        if len(w_seq) != self.M:
            raise ContractViolation('Need {} disturbances, got {}'.format(self.M, len(w_seq)))
        x = x_start
        residuals = []
        for (u, y), w in zip(self.window, w_seq):
            residuals.append(float(np.linalg.norm(model.h(x, u) + model.E_y @ w - y)))
            x = model.f(x, u) + model.E_x @ w
        d = x_start - self.x_anchor
        theta = np.concatenate([x_start] + w_seq + [[np.linalg.norm(w) for w in w_seq], residuals,
                                                    [math.sqrt(max(float(d @ self.P @ d), 0.0))]])
        return self.to_xi(theta)

    # evaluation

    def _step(self, k, x, w):
        model = self.model
        u, _ = self.window[k]
        A, _ = model.step_jacobian(x, u)
        return model.f(x, u) + model.E_x @ w, A, model.E_x

    def _evaluate_xi(self, xi) -> dict:
        model = self.model
        theta = self.to_theta(xi)
        n_x, n_w, M = model.n_x, model.n_w, self.M
        w = theta[self.i_w:self.i_nu].reshape(M, n_w)
        traj = rollout(self._step, theta[:n_x], w)
        residuals, residual_jac = [], []
        for k, (u, y) in enumerate(self.window):
            C, _ = model.output_jacobian(traj.states[k], u)
            residuals.append(model.h(traj.states[k], u) + model.E_y @ w[k] - y)
            J = C @ traj.sens[k]
            J[:, traj.param_columns(k)] += model.E_y
            J_full = np.zeros((model.n_y, self.n_vars))
            J_full[:, :self.i_nu] = J
            residual_jac.append(J_full)
        return dict(theta=theta, traj=traj, w=w, residuals=residuals, residual_jac=residual_jac)

    def _weights(self) -> np.ndarray:
        """ eta^(j-1) for the record k = M - j, oldest first """
        return np.array([self.cfg.eta ** (self.M - 1 - k) for k in range(self.M)])

    def _cost_terms(self, theta) -> Tuple[float, np.ndarray]:
        """ Cost on the unscaled variables and its gradient. """
        cfg = self.cfg
        weights = self._weights()
        nu = theta[self.i_nu:self.i_zeta]
        zeta = theta[self.i_zeta:self.i_a]
        nu_a = max(theta[self.i_a], 0.0)
        grad = np.zeros(self.n_vars)
        value = 0.0
        for k in range(self.M):
            a = self.w_bar + max(nu[k], 0.0)
            b = max(zeta[k], 0.0)
            value += weights[k] * (gain_eval(cfg.sigma1, a) + gain_eval(cfg.sigma2, b))
            grad[self.i_nu + k] = weights[k] * gain_slope(cfg.sigma1, a)
            grad[self.i_zeta + k] = weights[k] * gain_slope(cfg.sigma2, b)
        arrival = cfg.eta ** self.M
        value += arrival * gain_eval(self.sigma_delta, nu_a)
        grad[self.i_a] = arrival * gain_slope(self.sigma_delta, nu_a)
        return value, grad

    def objective(self, xi) -> float:
        return self._cost_terms(self.to_theta(xi))[0] / self.value_scale

    def gradient(self, xi) -> np.ndarray:
        return self._cost_terms(self.to_theta(xi))[1] * self.scale / self.value_scale

    def radius(self, xi) -> float:
        """ Certified radius bound in W at xi (epigraph form). """
        return self._cost_terms(self.to_theta(xi))[0] + self.cfg.eta ** self.M * self.e_anchor

    def radius_gradient(self, xi) -> np.ndarray:
        return self._cost_terms(self.to_theta(xi))[1] * self.scale

    def ineq(self, xi) -> np.ndarray:
        data = self._evaluate(xi)
        theta = data['theta']
        nu = theta[self.i_nu:self.i_zeta]
        zeta = theta[self.i_zeta:self.i_a]
        s_w = self.scale[self.i_nu] ** 2
        values = [(float(w @ w) - nu[k] ** 2) / s_w for k, w in enumerate(data['w'])]
        values.extend((float(r @ r) - zeta[k] ** 2) / s_w for k, r in enumerate(data['residuals']))
        d = theta[:self.model.n_x] - self.x_anchor
        values.append((float(d @ self.P @ d) - theta[self.i_a] ** 2) / self.scale[self.i_a] ** 2)
        return np.array(values)

    def ineq_jacobian(self, xi) -> np.ndarray:
        data = self._evaluate(xi)
        theta = data['theta']
        n_x, n_w = self.model.n_x, self.model.n_w
        s_w = self.scale[self.i_nu] ** 2
        rows = []
        for k, w in enumerate(data['w']):
            row = np.zeros(self.n_vars)
            row[self.i_w + k * n_w:self.i_w + (k + 1) * n_w] = 2.0 * w
            row[self.i_nu + k] = -2.0 * theta[self.i_nu + k]
            rows.append(row / s_w)
        for k, r in enumerate(data['residuals']):
            row = 2.0 * (r @ data['residual_jac'][k])
            row[self.i_zeta + k] = -2.0 * theta[self.i_zeta + k]
            rows.append(row / s_w)
        row = np.zeros(self.n_vars)
        row[:n_x] = 2.0 * (self.P @ (theta[:n_x] - self.x_anchor))
        row[self.i_a] = -2.0 * theta[self.i_a]
        rows.append(row / self.scale[self.i_a] ** 2)
        return np.array(rows) * self.scale

    def end_state(self, xi) -> np.ndarray:
        return self._evaluate(xi)['traj'].states[-1].copy()

    def end_state_jacobian(self, xi) -> np.ndarray:
        """ d x_0 / d xi """
        jac = np.zeros((self.model.n_x, self.n_vars))
        jac[:, :self.i_nu] = self._evaluate(xi)['traj'].sens[-1]
        return jac * self.scale

    def initial_points(self, w_hat: Sequence = None) -> List[np.ndarray]:
        """ The anchor with observer disturbances (when given) and with zero disturbances. """
        zeros = [np.zeros(self.model.n_w)] * self.M
        starts = []
        if w_hat is not None:
            starts.append(self.encode(self.x_anchor, w_hat))
        starts.append(self.encode(self.x_anchor, zeros))
        return starts

    def certified(self, xi) -> Tuple[float, float, list, list]:
        """ (cost, e_bar, w_seq, y_seq) evaluated with the actual norms at xi """
        data = self._evaluate(xi)
        theta = data['theta']
        cfg = self.cfg
        weights = self._weights()
        cost = 0.0
        y_seq = []
        for k, (u, y) in enumerate(self.window):
            r = data['residuals'][k]
            y_seq.append(y + r)
            cost += weights[k] * (gain_eval(cfg.sigma1, self.w_bar + float(np.linalg.norm(data['w'][k]))) +
                                  gain_eval(cfg.sigma2, float(np.linalg.norm(r))))
        d = theta[:self.model.n_x] - self.x_anchor
        arrival = cfg.eta ** self.M
        cost += arrival * gain_eval(self.sigma_delta, math.sqrt(max(float(d @ self.P @ d), 0.0)))
        return cost, cost + arrival * self.e_anchor, [w.copy() for w in data['w']], y_seq


def solve_mhe(model: PlantModel, cfg: MheConfig, window: Sequence[Tuple], anchor: Tuple, w_bar: float,
              nlp_opts: SolverOptions = None, w_hat: Sequence = None,
              extra_inits: Sequence[np.ndarray] = None) -> MheSolution:
    """
    Minimize the MHE cost over the window and certify the resulting estimate.

    An empty window (M_t = 0) returns the anchor unchanged. An iteration
    limit returns the best point found; its radius is still sound because
    it is evaluated at that point.

    :param window: (u, y) pairs for steps t-M_t..t-1, oldest first
    :param anchor: (x_hat_{t-M_t}, e_bar_{t-M_t})
    :param w_hat: observer disturbance estimates over the window, used as a start
    :param extra_inits: further starts in the scaled variables (MheProblem.encode)
    """
    if len(window) > cfg.M:
        raise ContractViolation('Window of {} steps exceeds the horizon {}'.format(len(window), cfg.M))
    if not window:
        x_anchor, e_anchor = anchor
        x_anchor = as_vector(x_anchor, model.n_x, 'anchor')
        return MheSolution(x_hat_t=x_anchor.copy(), x_hat_anchor=x_anchor.copy(), w_seq=[], y_seq=[],
                           cost=0.0, e_bar=float(e_anchor), status=Status.converged, M_t=0)
    started = time.monotonic()
    problem = MheProblem(model, cfg, window, anchor, w_bar)
    opts = nlp_opts or SolverOptions()
    solution = solve_multistart(problem.nlp, problem.initial_points(w_hat) + list(extra_inits or []), opts)
    if solution.status == Status.infeasible:
        # every epigraph start is feasible, so this only follows a failed solve; keep the replay
        LOGGER.warning('MHE solve returned an infeasible point; using the start')
        solution.vars = problem.initial_points(w_hat)[0]
    cost, e_bar, w_seq, y_seq = problem.certified(solution.vars)
    theta = problem.to_theta(solution.vars)
    elapsed = time.monotonic() - started
    LOGGER.debug('MHE: M_t={} cost={:.6g} e_bar={:.6g} status={} ({:.3f}s)'
                 .format(problem.M, cost, e_bar, solution.status, elapsed))
    return MheSolution(x_hat_t=problem.end_state(solution.vars), x_hat_anchor=theta[:model.n_x].copy(),
                       w_seq=w_seq, y_seq=y_seq, cost=cost, e_bar=e_bar, status=solution.status,
                       M_t=problem.M, wall_time=elapsed, nlp=solution)


def mhe_apriori_bound(cfg: MheConfig, M_t: int, e_bar_anchor: float, w_bar: float) -> float:
    """
    (1 - eta^M_t) / (1 - eta) sigma1(2 w_bar) + eta^M_t (e_anchor + sigma_delta(alpha1^-1(e_anchor)))

    :raises: UnsupportedCertificate if alpha1 has no closed-form inverse
    """
    inverse = cfg.alpha1.inverse()
    decay = cfg.eta ** M_t
    sigma_delta = cfg.arrival_gain(e_bar_anchor)
    return (1.0 - decay) / (1.0 - cfg.eta) * gain_eval(cfg.sigma1, 2.0 * w_bar) + \
        decay * (e_bar_anchor + gain_eval(sigma_delta, gain_eval(inverse, e_bar_anchor)))


def window_of(st: EstimatorState, M: int) -> Tuple[list, Tuple, list]:
    """
    (window, anchor, w_hat) over the newest min(t, M) records of st.

    Records store the estimate and radius current at their time, so the
    oldest record of the window is the anchor.
    """
    M_t = min(st.t, M, len(st.history))
    if M_t == 0:
        return [], (st.x_hat, st.e_bar), []
    records = list(st.history)[-M_t:]
    return [(r.u, r.y) for r in records], (records[0].x_hat, records[0].e_bar), [r.w_hat for r in records]


def mhe_update(model: PlantModel, cfg: MheConfig, obs: LuenbergerObserver, st: EstimatorState, u, y,
               w_bar: float, nlp_opts: SolverOptions = None, extra_inits=None) -> Tuple[EstimatorState, MheSolution]:
    """ Record (u, y), then replace the estimate by the MHE estimate and its radius (in W). """
    advanced = observer_step(obs, st, u, y)
    window, anchor, w_hat = window_of(advanced, cfg.M)
    solution = solve_mhe(model, cfg, window, anchor, w_bar, nlp_opts, w_hat=w_hat or None, extra_inits=extra_inits)
    new = advanced.copy(x_hat=solution.x_hat_t, e_bar=solution.e_bar, branch='mhe',
                        info=dict(mhe_cost=solution.cost, mhe_e_bar=solution.e_bar, nlp_status=solution.status,
                                  wall_time=solution.wall_time))
    return new, solution


def combined_update(model: PlantModel, cfg: MheConfig, obs: LuenbergerObserver, st: EstimatorState, u, y,
                    w_bar: float, cert_ioss: IossCertificate, cert_obs: ObserverCertificate,
                    nlp_opts: SolverOptions = None, extra_inits=None) -> EstimatorState:
    """
    MHE with a one-step Luenberger fallback.

    The MHE estimate is accepted when its radius (converted to Vo) is at
    most both eta_tilde e_prev + sigma4(w_bar) and the Luenberger update,
    and its distance to f(x_hat_prev, u) stays within
    gamma_L1(e_prev) + gamma_L2(w_bar). Otherwise the Luenberger estimate
    and radius are kept. The branch is 'mhe' or 'fallback'.
    """
    advanced = observer_step(obs, st, u, y)
    if cert_ioss.W.same_form(cert_obs.Vo):
        e_luenberger = error_update_identical(advanced, cert_ioss, cert_obs, w_bar)
    else:
        e_luenberger = error_update_general(advanced, cert_ioss, cert_obs, w_bar, M_bar=1)
    fallback = advanced.with_bound(e_luenberger, 'fallback')

    window, anchor, w_hat = window_of(advanced, cfg.M)
    if not window:
        return fallback
    to_w, to_vo = envelope_conversions(cert_ioss, cert_obs)
    anchor = (anchor[0], to_w(anchor[1]))
    solution = solve_mhe(model, cfg, window, anchor, w_bar, nlp_opts, w_hat=w_hat, extra_inits=extra_inits)
    e_mhe = to_vo(solution.e_bar)
    info = dict(mhe_cost=solution.cost, mhe_e_bar=e_mhe, nlp_status=solution.status,
                wall_time=solution.wall_time, luenberger_e_bar=e_luenberger)

    e_prev = st.e_bar
    record = advanced.newest()
    predictable = cert_obs.eta_tilde * e_prev + gain_eval(cert_obs.sigma4, w_bar)
    mismatch = float(np.linalg.norm(solution.x_hat_t - model.f(record.x_hat, record.u)))
    if e_mhe <= predictable and e_mhe <= e_luenberger and \
            mismatch <= prediction_mismatch_bound(e_prev, cert_obs, w_bar):
        return advanced.copy(x_hat=solution.x_hat_t, e_bar=e_mhe, branch='mhe', info=info)
    LOGGER.debug('t={}: MHE rejected (e_mhe={:.4g}, luenberger={:.4g}, mismatch={:.4g})'
                 .format(advanced.t, e_mhe, e_luenberger, mismatch))
    fallback.info.update(info)
    return fallback


def estimate_sigma_f(model: PlantModel, constraints: Optional[ConstraintSet], sampler: Sampler,
                     inflation: float = 2.0) -> Gain:
    """
    Linear majorant of the continuity modulus of f_w(x, u, w) in (x, w).

    Lipschitz quotients of step_nominal over sampled state pairs (shared
    input), and |E_x| for the disturbance part; the larger is inflated.
    """
    worst = 0.0
    for chunk, count in sampler.chunks():
        rng = sampler.generator(chunk)
        xs = sampler.draw_states(rng, constraints, model.n_x, count)
        us = sampler.draw_inputs(rng, constraints, model.n_u, count)
        offsets = rng.normal(size=(count, model.n_x))
        offsets *= (1e-3 * max(sampler.radius or 1.0, 1e-6)) / np.linalg.norm(offsets, axis=1, keepdims=True)
        for x, u, d in zip(xs, us, offsets):
            quotient = np.linalg.norm(model.f(x + d, u) - model.f(x, u)) / np.linalg.norm(d)
            worst = max(worst, float(quotient))
    slope = inflation * max(worst, float(np.linalg.norm(model.E_x, 2)))
    LOGGER.debug('sigma_f slope {:.4g} (sampled {:.4g})'.format(slope, worst))
    return Gain.linear(slope)


def mismatch_bound(cfg: MheConfig, sigma_f: KFunction, e_bar_t: float, e_bar_next: float, w_bar: float) -> float:
    """
    sigma_f(alpha1^-1(e_t) + w_bar) + alpha1^-1(e_{t+1}), bounding |x_hat_{t+1} - f(x_hat_t, u_t)|.

    alpha1 here is the Euclidean lower envelope of W.
    """
    inverse = cfg.metric.lower_envelope().inverse()
    return gain_eval(sigma_f, gain_eval(inverse, e_bar_t) + w_bar) + gain_eval(inverse, e_bar_next)
