"""
Homothetic tube MPC on top of a certified estimation error.

Around the nominal trajectory x_bar the tube {x: V(x, x_bar) <= s_bar}
grows with the estimation error e_bar:

    s_{k+1} = rho s_k + gamma_so(e_k) + gamma_sw(w_bar)
    e_{k+1} = eta_tilde e_k + sigma4(w_bar)

Constraints are tightened by sigma_s(s_k) + sigma_o(e_k). The MPCs use
norm-form certificates so the linear tightening is superadditive.

Four transcriptions share one problem class:

  homothetic  x_bar_0 free, s_0 = V(x_bar_0, x_hat)
  tightened   x_bar_0 = x_hat, s_0 = 0
  rigid       x_bar_0 = x_hat, s and e fixed at their RPI bounds
  joint       homothetic plus the MHE window, e_0 given by the MHE radius
"""
import logging
import math
import time
from typing import Callable, Sequence, Tuple

import numpy as np
from scipy import optimize

from .certificates import IssClfCertificate, ObserverCertificate, QuadraticForm, Sampler, norm_radius
from .core import (ConstraintSet, ContractViolation, Gain, KFunction, OfmpcError, PlantModel,
                   UnsupportedCertificate, as_vector, gain_eval, gain_slope, numeric_jacobian, right_inverse)
from .mhe import MheConfig, MheProblem, window_of
from .nlp import NlpProblem, NlpSolution, SolverOptions, Status, solve_multistart
from .observer import EstimatorState, LuenbergerObserver, error_update_identical, observer_step
from .shooting import Memo, rollout

LOGGER = logging.getLogger('ofmpc.tubempc')


class TubeStatus:
    optimal = 'optimal'
    feasible = 'feasible'
    """ feasible, but the solver stopped short of a stationary point """
    candidate_accepted = 'candidate-accepted'
    infeasible = 'infeasible'


class InitialInfeasibility(OfmpcError):
    """ The MPC problem at t = 0 has no feasible point. """
    pass


# tube dynamics

class TubeGains(object):
    """ Cross-gains from the estimation error and the disturbance into the tube scaling. """

    def __init__(self, gamma_so: KFunction, gamma_sw: KFunction):
        self.gamma_so = gamma_so
        self.gamma_sw = gamma_sw

    def __repr__(self):
        return 'TubeGains(gamma_so={!r}, gamma_sw={!r})'.format(self.gamma_so, self.gamma_sw)


def tube_gains(cert_iss: IssClfCertificate, cert_obs: ObserverCertificate, E_x) -> TubeGains:
    """
    gamma_so = sigma3 o (2 |E_x^+| gamma_L1), gamma_sw = sigma3 o (2 |E_x^+| gamma_L2)

    :raises: ModelRejected if E_x has no right inverse
    """
    norm = float(np.linalg.norm(right_inverse(np.atleast_2d(E_x)), 2))
    return TubeGains(cert_iss.sigma3.compose(cert_obs.gamma_L1.scale(2.0 * norm)),
                     cert_iss.sigma3.compose(cert_obs.gamma_L2.scale(2.0 * norm)))


class RpiBounds(object):
    """ Asymptotic error radius e_max and tube scaling s_max. """

    def __init__(self, e_max: float, s_max: float):
        self.e_max = e_max
        self.s_max = s_max

    def __iter__(self):
        return iter((self.e_max, self.s_max))

    def __repr__(self):
        return 'RpiBounds(e_max={:.6g}, s_max={:.6g})'.format(self.e_max, self.s_max)


def rpi_bounds(gains: TubeGains, cert_obs: ObserverCertificate, cert_iss: IssClfCertificate,
               w_bar: float) -> RpiBounds:
    e_max = gain_eval(cert_obs.sigma4, w_bar) / (1.0 - cert_obs.eta_tilde)
    s_max = (gain_eval(gains.gamma_so, e_max) + gain_eval(gains.gamma_sw, w_bar)) / (1.0 - cert_iss.rho)
    return RpiBounds(e_max, s_max)


class _Profile(object):
    """ Tube scalings and their derivatives with respect to (s_0, e_0). """
    __slots__ = ('s', 'e', 'ds_ds0', 'ds_de0', 'de_de0')

    def __init__(self, s, e, ds_ds0, ds_de0, de_de0):
        self.s = s
        self.e = e
        self.ds_ds0 = ds_ds0
        self.ds_de0 = ds_de0
        self.de_de0 = de_de0


def _profile(s0: float, e0: float, N: int, gains: TubeGains, cert_obs: ObserverCertificate,
             cert_iss: IssClfCertificate, w_bar: float) -> _Profile:
    eta, rho = cert_obs.eta_tilde, cert_iss.rho
    sigma4 = gain_eval(cert_obs.sigma4, w_bar)
    drift = gain_eval(gains.gamma_sw, w_bar)
    k = np.arange(N + 1)
    e = eta ** k * e0 + (1.0 - eta ** k) / (1.0 - eta) * sigma4
    de_de0 = eta ** k
    s = np.empty(N + 1)
    ds_de0 = np.zeros(N + 1)
    s[0] = s0
    for j in range(N):
        s[j + 1] = rho * s[j] + gain_eval(gains.gamma_so, e[j]) + drift
        ds_de0[j + 1] = rho * ds_de0[j] + gain_slope(gains.gamma_so, e[j]) * de_de0[j]
    return _Profile(s, e, rho ** k, ds_de0, de_de0)


def propagate_tube(s0: float, e0: float, N: int, gains: TubeGains, cert_obs: ObserverCertificate,
                   cert_iss: IssClfCertificate, w_bar: float) -> Tuple[np.ndarray, np.ndarray]:
    """ (s_0..s_N, e_0..e_N) from the tube recursions """
    if s0 < 0 or e0 < 0:
        raise ContractViolation('Tube initial values must be >= 0, got s0={} e0={}'.format(s0, e0))
    profile = _profile(s0, e0, N, gains, cert_obs, cert_iss, w_bar)
    return profile.s, profile.e


def linear_tightening(constraints: ConstraintSet, cert_iss: IssClfCertificate,
                      cert_obs: ObserverCertificate) -> ConstraintSet:
    """
    Tightening gains for linear constraints g = G_x x + G_u u - b under norm-form certificates:

        sigma_s,i(s) = |P^-1/2 (g_x,i + K^T g_u,i)| s,  sigma_o,i(e) = |Po^-1/2 g_x,i| e

    :raises: UnsupportedCertificate for nonlinear constraints or squared forms
    """
    if constraints.linear_rows is None:
        raise UnsupportedCertificate('Linear tightening needs linear constraints')
    if not (cert_iss.V.root and cert_obs.Vo.root):
        raise UnsupportedCertificate('Linear tightening needs norm-form certificates')
    G_x, G_u, _ = constraints.linear_rows
    tube = [Gain.linear(np.linalg.norm(cert_iss.V.inv_sqrt_P @ (gx + cert_iss.K.T @ gu)))
            for gx, gu in zip(G_x, G_u)]
    error = [Gain.linear(np.linalg.norm(cert_obs.Vo.inv_sqrt_P @ gx)) for gx in G_x]
    return constraints.with_tightening(tube, error)


def ancillary_feedback(cert_iss: IssClfCertificate, x_hat, x_bar, u_bar) -> np.ndarray:
    """ u_bar + K (x_hat - x_bar) """
    return cert_iss.kappa(x_hat, x_bar, u_bar)


# costs and terminal ingredients

class StageCost(object):
    """
    l(x, u, e, s) = nominal(x, u) + ell_e(e) + ell_s(s)

    nominal_gradient(x, u) -> (dl/dx, dl/du); central differences when omitted.
    """

    def __init__(self, nominal: Callable, nominal_gradient: Callable = None,
                 ell_e: KFunction = None, ell_s: KFunction = None):
        self.nominal = nominal
        self.nominal_gradient = nominal_gradient
        self.ell_e = ell_e if ell_e is not None else Gain()
        self.ell_s = ell_s if ell_s is not None else Gain()

    @classmethod
    def quadratic(cls, Q, R, x_s, u_s, q=None, **kwargs) -> 'StageCost':
        """ (x - x_s)^T Q (x - x_s) + (u - u_s)^T R (u - u_s) + q^T (x - x_s) """
        Q, R = np.atleast_2d(np.asarray(Q, dtype=float)), np.atleast_2d(np.asarray(R, dtype=float))
        x_s, u_s = np.asarray(x_s, dtype=float), np.asarray(u_s, dtype=float)
        q = np.zeros_like(x_s) if q is None else np.asarray(q, dtype=float)

        def nominal(x, u):
            dx, du = x - x_s, u - u_s
            return float(dx @ Q @ dx + du @ R @ du + q @ dx)

        def gradient(x, u):
            return 2.0 * Q @ (x - x_s) + q, 2.0 * R @ (u - u_s)

        return cls(nominal, gradient, **kwargs)

    def __call__(self, x, u, e: float, s: float) -> float:
        return self.nominal(x, u) + gain_eval(self.ell_e, e) + gain_eval(self.ell_s, s)

    def gradient(self, x, u) -> Tuple[np.ndarray, np.ndarray]:
        if self.nominal_gradient is not None:
            return self.nominal_gradient(x, u)
        n_x = x.size
        jac = numeric_jacobian(lambda v: self.nominal(v[:n_x], v[n_x:]), np.concatenate([x, u]))[0]
        return jac[:n_x], jac[n_x:]


class TerminalIngredients(object):
    """
    Terminal constraint and cost.

    mode 'equality': x_bar_N = x_s, terminal law u_s.
    mode 'set': V(x_bar_N, x_s) + s_N <= c_f, terminal law u_s + K (x - x_s).
    Vf(x, e, s) = (x - x_s)^T Q_f (x - x_s) + ell_e(e) + ell_s(s), zero by default.
    """
    modes = ('equality', 'set')

    def __init__(self, mode: str, x_s, u_s, *, V: QuadraticForm = None, K=None, c_f: float = None,
                 Q_f=None, ell_e: KFunction = None, ell_s: KFunction = None):
        if mode not in self.modes:
            raise ContractViolation('Unknown terminal mode {!r}'.format(mode))
        if mode == 'set' and (V is None or K is None or c_f is None):
            raise ContractViolation('Terminal set needs V, K and c_f')
        self.mode = mode
        self.x_s = np.asarray(x_s, dtype=float)
        self.u_s = np.asarray(u_s, dtype=float)
        self.V = V
        self.K = None if K is None else np.atleast_2d(np.asarray(K, dtype=float))
        self.c_f = c_f
        self.Q_f = None if Q_f is None else np.atleast_2d(np.asarray(Q_f, dtype=float))
        self.ell_e = ell_e if ell_e is not None else Gain()
        self.ell_s = ell_s if ell_s is not None else Gain()

    @classmethod
    def equality(cls, x_s, u_s, **kwargs) -> 'TerminalIngredients':
        return cls('equality', x_s, u_s, **kwargs)

    @classmethod
    def sublevel(cls, x_s, u_s, V: QuadraticForm, K, c_f: float, **kwargs) -> 'TerminalIngredients':
        return cls('set', x_s, u_s, V=V, K=K, c_f=c_f, **kwargs)

    def check_equilibrium(self, model: PlantModel, tol: float = 1e-9):
        """ :raises: ContractViolation unless x_s = f(x_s, u_s) """
        gap = float(np.max(np.abs(model.f(self.x_s, self.u_s) - self.x_s)))
        if gap > tol:
            raise ContractViolation('Terminal setpoint is not an equilibrium (gap {:.3g})'.format(gap))

    def kf(self, x) -> np.ndarray:
        if self.mode == 'equality':
            return self.u_s.copy()
        return self.u_s + self.K @ (np.asarray(x, dtype=float) - self.x_s)

    def Vf(self, x, e: float, s: float) -> float:
        value = gain_eval(self.ell_e, e) + gain_eval(self.ell_s, s)
        if self.Q_f is not None:
            d = np.asarray(x, dtype=float) - self.x_s
            value += float(d @ self.Q_f @ d)
        return value

    def Vf_gradient(self, x) -> np.ndarray:
        if self.Q_f is None:
            return np.zeros_like(self.x_s)
        return 2.0 * self.Q_f @ (np.asarray(x, dtype=float) - self.x_s)

    def contains(self, x, s: float = 0.0, tol: float = 0.0) -> bool:
        if self.mode == 'equality':
            return bool(np.max(np.abs(np.asarray(x) - self.x_s)) <= tol)
        return self.V.value(x, self.x_s) + s <= self.c_f + tol

    def __repr__(self):
        return 'TerminalIngredients({!r}, c_f={})'.format(self.mode, self.c_f)


class TubeSetup(object):
    """ Everything a tube MPC solve needs apart from the current estimate. """

    def __init__(self, *, model: PlantModel, constraints: ConstraintSet, cert_iss: IssClfCertificate,
                 cert_obs: ObserverCertificate, term: TerminalIngredients, cost: StageCost, N: int,
                 w_bar: float, gains: TubeGains = None):
        if N < 1:
            raise ContractViolation('Prediction horizon must be >= 1, got {}'.format(N))
        self.model = model
        self.constraints = constraints
        self.cert_iss = cert_iss
        self.cert_obs = cert_obs
        self.gains = gains if gains is not None else tube_gains(cert_iss, cert_obs, model.E_x)
        self.term = term
        self.cost = cost
        self.N = int(N)
        self.w_bar = float(w_bar)
        self.rpi = rpi_bounds(self.gains, cert_obs, cert_iss, w_bar)

    def stage_cost_bound(self) -> float:
        """ l(x_s, u_s, e_max, s_max), the asymptotic average cost of the closed loop """
        return self.cost(self.term.x_s, self.term.u_s, self.rpi.e_max, self.rpi.s_max)


def disturbance_limit(setup: TubeSetup, max_doublings: int = 200) -> float:
    """
    Largest w_bar at which the setpoint (x_s, u_s) still satisfies the
    constraints tightened by the RPI bounds for that w_bar; inf if no
    constraint ever binds.

    :raises: ContractViolation if the setpoint is not strictly inside the constraints
    """
    cons = setup.constraints
    values = cons.evaluate(setup.term.x_s, setup.term.u_s)
    if values.size == 0:
        return math.inf

    def excess(w_bar: float) -> float:
        e_max, s_max = rpi_bounds(setup.gains, setup.cert_obs, setup.cert_iss, w_bar)
        return float(np.max(values + cons.tightening(s_max, e_max)))

    if excess(0.0) >= 0:
        raise ContractViolation('The setpoint is not strictly inside the constraints')
    high = setup.w_bar if setup.w_bar > 0 else 1e-12
    for _ in range(max_doublings):
        if excess(high) > 0:
            break
        high *= 2.0
    else:
        return math.inf
    return float(optimize.brentq(excess, 0.0, high, xtol=1e-12 * high))


class TubeSolution(object):
    """ Nominal trajectory, tube scalings and cost of an MPC solve. """

    def __init__(self, *, x_bar, u_bar, s_bar, e_bar, cost: float, status: str, mode: str,
                 vars: np.ndarray = None, nlp: NlpSolution = None, wall_time: float = 0.0,
                 violation: float = 0.0):
        self.x_bar = x_bar
        self.u_bar = u_bar
        self.s_bar = s_bar
        self.e_bar = e_bar
        self.cost = cost
        self.status = status
        self.mode = mode
        self.vars = vars
        self.nlp = nlp
        self.wall_time = wall_time
        self.violation = violation

    @property
    def N(self) -> int:
        return self.u_bar.shape[0]

    @property
    def feasible(self) -> bool:
        return self.status != TubeStatus.infeasible

    def applied_input(self, cert_iss: IssClfCertificate, x_hat) -> np.ndarray:
        """ kappa(x_hat, x_bar_0, u_bar_0); equals u_bar_0 when x_bar_0 = x_hat """
        return ancillary_feedback(cert_iss, x_hat, self.x_bar[0], self.u_bar[0])

    def __repr__(self):
        return 'TubeSolution({}, cost={:.6g}, status={!r}, s0={:.4g}, e0={:.4g})'.format(
            self.mode, self.cost, self.status, self.s_bar[0], self.e_bar[0])


# transcription

class TubeProblem(object):
    """
    Single-shooting transcription of one MPC variant.

    Variables: [estimate (joint only), x_bar_0 (homothetic, joint), u_0..u_{N-1},
    s_0 epigraph (homothetic, joint), e_0 epigraph (joint)].
    """
    modes = ('homothetic', 'tightened', 'rigid', 'joint')

    def __init__(self, setup: TubeSetup, mode: str, *, x_hat=None, e_t: float = None,
                 estimate: MheProblem = None):
        if mode not in self.modes:
            raise ContractViolation('Unknown MPC mode {!r}'.format(mode))
        model = setup.model
        self.setup = setup
        self.mode = mode
        self.estimate = estimate
        if mode == 'joint':
            if estimate is None:
                raise ContractViolation('The joint problem needs an MHE problem')
        else:
            self.x_hat = as_vector(x_hat, model.n_x, 'x_hat')
            self.e_t = float(e_t)
            if not self.e_t >= 0:
                raise ContractViolation('e_t must be >= 0, got {}'.format(self.e_t))
        if mode == 'tightened' and not all(g.is_superadditive for g in setup.constraints.tightening_s):
            raise ContractViolation('Tightened MPC needs superadditive tube tightening')
        N, n_x, n_u = setup.N, model.n_x, model.n_u
        self.n_est = estimate.n_vars if estimate is not None else 0
        self.x0_free = mode in ('homothetic', 'joint')
        self.i_x = self.n_est
        self.i_u = self.i_x + (n_x if self.x0_free else 0)
        self.i_s = self.i_u + N * n_u
        self.has_s = mode in ('homothetic', 'joint')
        self.i_e = self.i_s + (1 if self.has_s else 0)
        self.has_e = mode == 'joint'
        self.n_vars = self.i_e + (1 if self.has_e else 0)
        self.ref = max(setup.rpi.s_max, setup.rpi.e_max, 1e-6)
        self._evaluate = Memo(self._evaluate_vars)
        if mode == 'tightened':
            self._fixed = _profile(0.0, self.e_t, N, setup.gains, setup.cert_obs, setup.cert_iss, setup.w_bar)
        elif mode == 'rigid':
            self._fixed = _Profile(np.full(N + 1, setup.rpi.s_max), np.full(N + 1, setup.rpi.e_max),
                                   np.zeros(N + 1), np.zeros(N + 1), np.zeros(N + 1))

        lower = np.full(self.n_vars, -np.inf)
        upper = np.full(self.n_vars, np.inf)
        if estimate is not None:
            lower[:self.n_est], upper[:self.n_est] = estimate.nlp.bounds
        if self.has_s:
            lower[self.i_s] = 0.0
        if self.has_e:
            lower[self.i_e] = 0.0
        has_eq = setup.term.mode == 'equality'
        self.nlp = NlpProblem(self.n_vars, self.objective, gradient=self.gradient,
                              eq_constraints=self.eq if has_eq else None,
                              eq_jacobian=self.eq_jacobian if has_eq else None,
                              ineq_constraints=self.ineq, ineq_jacobian=self.ineq_jacobian,
                              bounds=(lower, upper), name='tube-' + mode)

    # evaluation

    def _step(self, k, x, u):
        model = self.setup.model
        A, B = model.step_jacobian(x, u)
        return model.f(x, u), A, B

    def _estimate_point(self, v) -> Tuple[np.ndarray, np.ndarray]:
        """ x_hat and its Jacobian with respect to v """
        jac = np.zeros((self.setup.model.n_x, self.n_vars))
        if self.estimate is None:
            return self.x_hat, jac
        xi = v[:self.n_est]
        jac[:, :self.n_est] = self.estimate.end_state_jacobian(xi)
        return self.estimate.end_state(xi), jac

    def _evaluate_vars(self, v) -> dict:
        setup = self.setup
        model, N = setup.model, setup.N
        x_hat, dx_hat = self._estimate_point(v)
        U = v[self.i_u:self.i_s].reshape(N, model.n_u)
        x0 = v[self.i_x:self.i_u] if self.x0_free else x_hat
        traj = rollout(self._step, x0, U, x0_free=self.x0_free)
        sens = np.zeros((N + 1, model.n_x, self.n_vars))
        sens[:, :, self.i_x:self.i_s] = traj.sens
        if self.mode in ('tightened', 'rigid'):
            profile = self._fixed
        else:
            e0 = v[self.i_e] if self.has_e else self.e_t
            profile = _profile(max(v[self.i_s], 0.0), max(e0, 0.0), N, setup.gains, setup.cert_obs,
                               setup.cert_iss, setup.w_bar)
        return dict(x_hat=x_hat, dx_hat=dx_hat, X=traj.states, U=U, sens=sens, profile=profile)

    def _tube_row(self, data, k, slope_s, slope_e) -> np.ndarray:
        """ d(a(s_k) + b(e_k)) / dv for gains with slopes slope_s, slope_e at step k """
        row = np.zeros(self.n_vars)
        profile = data['profile']
        if self.has_s:
            row[self.i_s] = slope_s * profile.ds_ds0[k]
        if self.has_e:
            row[self.i_e] = slope_s * profile.ds_de0[k] + slope_e * profile.de_de0[k]
        return row

    def objective(self, v) -> float:
        data = self._evaluate(v)
        setup = self.setup
        X, U, profile = data['X'], data['U'], data['profile']
        total = sum(setup.cost(X[k], U[k], profile.e[k], profile.s[k]) for k in range(setup.N))
        return total + setup.term.Vf(X[-1], profile.e[-1], profile.s[-1])

    def gradient(self, v) -> np.ndarray:
        data = self._evaluate(v)
        setup = self.setup
        cost, term = setup.cost, setup.term
        X, U, sens, profile = data['X'], data['U'], data['sens'], data['profile']
        n_u = setup.model.n_u
        grad = np.zeros(self.n_vars)
        for k in range(setup.N):
            gx, gu = cost.gradient(X[k], U[k])
            grad += gx @ sens[k]
            grad[self.i_u + k * n_u:self.i_u + (k + 1) * n_u] += gu
            grad += self._tube_row(data, k, gain_slope(cost.ell_s, profile.s[k]),
                                   gain_slope(cost.ell_e, profile.e[k]))
        grad += term.Vf_gradient(X[-1]) @ sens[-1]
        grad += self._tube_row(data, setup.N, gain_slope(term.ell_s, profile.s[-1]),
                               gain_slope(term.ell_e, profile.e[-1]))
        return grad

    def _constraint_blocks(self, data):
        setup = self.setup
        cons = setup.constraints
        X, U, profile = data['X'], data['U'], data['profile']
        values = []
        for k in range(setup.N):
            values.append(cons.evaluate(X[k], U[k]) + cons.tightening(profile.s[k], profile.e[k]))
        return np.concatenate(values) if values else np.zeros(0)

    def ineq(self, v) -> np.ndarray:
        data = self._evaluate(v)
        setup = self.setup
        parts = [self._constraint_blocks(data)]
        if self.has_s:
            d = v[self.i_x:self.i_u] - data['x_hat']
            parts.append([(float(d @ setup.cert_iss.V.P @ d) - v[self.i_s] ** 2) / self.ref ** 2])
        if self.has_e:
            xi = v[:self.n_est]
            scale = self.estimate.value_scale
            parts.append([(self.estimate.radius(xi) - v[self.i_e] ** 2) / scale])
            parts.append(self.estimate.ineq(xi))
        if setup.term.mode == 'set':
            term = setup.term
            d = data['X'][-1] - term.x_s
            slack = term.c_f - data['profile'].s[-1]
            parts.append([(float(d @ term.V.P @ d) - slack ** 2) / self.ref ** 2, -slack / self.ref])
        return np.concatenate([np.asarray(p, dtype=float).reshape(-1) for p in parts])

    def ineq_jacobian(self, v) -> np.ndarray:
        data = self._evaluate(v)
        setup = self.setup
        cons = setup.constraints
        n_u = setup.model.n_u
        X, U, sens, profile = data['X'], data['U'], data['sens'], data['profile']
        rows = []
        for k in range(setup.N):
            G_x, G_u = cons.jacobian(X[k], U[k])
            block = G_x @ sens[k]
            block[:, self.i_u + k * n_u:self.i_u + (k + 1) * n_u] += G_u
            for i in range(cons.r):
                block[i] += self._tube_row(data, k, gain_slope(cons.tightening_s[i], profile.s[k]),
                                           gain_slope(cons.tightening_o[i], profile.e[k]))
            rows.append(block)
        if self.has_s:
            P = setup.cert_iss.V.P
            d = v[self.i_x:self.i_u] - data['x_hat']
            row = np.zeros(self.n_vars)
            row[self.i_x:self.i_u] = 2.0 * P @ d
            row -= 2.0 * (P @ d) @ data['dx_hat']
            row[self.i_s] -= 2.0 * v[self.i_s]
            rows.append(row.reshape(1, -1) / self.ref ** 2)
        if self.has_e:
            xi = v[:self.n_est]
            row = np.zeros(self.n_vars)
            row[:self.n_est] = self.estimate.radius_gradient(xi)
            row[self.i_e] = -2.0 * v[self.i_e]
            rows.append(row.reshape(1, -1) / self.estimate.value_scale)
            est = self.estimate.ineq_jacobian(xi)
            padded = np.zeros((est.shape[0], self.n_vars))
            padded[:, :self.n_est] = est
            rows.append(padded)
        if setup.term.mode == 'set':
            term = setup.term
            d = X[-1] - term.x_s
            slack = term.c_f - profile.s[-1]
            slack_row = -self._tube_row(data, setup.N, 1.0, 0.0)
            quad = 2.0 * (term.V.P @ d) @ sens[-1] - 2.0 * slack * slack_row
            rows.append(quad.reshape(1, -1) / self.ref ** 2)
            rows.append(-slack_row.reshape(1, -1) / self.ref)
        return np.vstack(rows)

    def eq(self, v) -> np.ndarray:
        return self._evaluate(v)['X'][-1] - self.setup.term.x_s

    def eq_jacobian(self, v) -> np.ndarray:
        return self._evaluate(v)['sens'][-1].copy()

    def violation(self, v) -> float:
        v = np.asarray(v, dtype=float)
        lower, upper = self.nlp.bounds
        worst = max(float(np.max(lower - v)), float(np.max(v - upper)), 0.0)
        ineq = self.ineq(v)
        if ineq.size:
            worst = max(worst, float(np.max(ineq)))
        if self.nlp.eq_constraints is not None:
            worst = max(worst, float(np.max(np.abs(self.eq(v)))))
        return worst

    # starts and results

    def pack(self, x0, U, s0: float = 0.0, e0: float = 0.0, xi=None) -> np.ndarray:
        v = np.zeros(self.n_vars)
        if self.n_est:
            v[:self.n_est] = xi
        if self.x0_free:
            v[self.i_x:self.i_u] = x0
        v[self.i_u:self.i_s] = np.asarray(U, dtype=float).reshape(-1)
        if self.has_s:
            v[self.i_s] = s0
        if self.has_e:
            v[self.i_e] = e0
        return v

    def tighten_epigraphs(self, v) -> np.ndarray:
        """ Set the epigraph variables to their smallest feasible values; feasibility is kept. """
        v = np.array(v, dtype=float)
        if self.has_e:
            v[self.i_e] = math.sqrt(max(self.estimate.radius(v[:self.n_est]), 0.0))
        if self.has_s:
            x_hat, _ = self._estimate_point(v)
            v[self.i_s] = self.setup.cert_iss.V.value(v[self.i_x:self.i_u], x_hat)
        return v

    def default_start(self, xi=None) -> np.ndarray:
        """ x_bar_0 = x_hat and the terminal input repeated """
        if self.estimate is not None and xi is None:
            xi = self.estimate.initial_points()[0]
        v = self.pack(np.zeros(self.setup.model.n_x), np.tile(self.setup.term.u_s, (self.setup.N, 1)), xi=xi)
        x_hat, _ = self._estimate_point(v)
        if self.x0_free:
            v[self.i_x:self.i_u] = x_hat
        return self.tighten_epigraphs(v)

    def solution(self, v, status: str, nlp: NlpSolution = None, wall_time: float = 0.0) -> TubeSolution:
        data = self._evaluate(v)
        profile = data['profile']
        return TubeSolution(x_bar=data['X'].copy(), u_bar=data['U'].copy(), s_bar=profile.s.copy(),
                            e_bar=profile.e.copy(), cost=self.objective(v), status=status, mode=self.mode,
                            vars=np.array(v), nlp=nlp, wall_time=wall_time, violation=self.violation(v))


def shift_candidate(problem: TubeProblem, previous: TubeSolution, xi=None) -> np.ndarray:
    """
    Shifted previous solution, extended by the terminal law.

    The reference is x_bar_{k+1}, u_bar_{k+1} of the previous solution; the
    candidate applies u = u_ref + K (x - x_ref) along its own nominal
    rollout, so with x_bar_0 free it reproduces the shifted trajectory.
    """
    setup = problem.setup
    model, term, N = setup.model, setup.term, setup.N
    if previous.N != N:
        raise ContractViolation('Candidate horizon {} differs from {}'.format(previous.N, N))
    x_last = previous.x_bar[-1]
    u_last = term.kf(x_last)
    ref_x = list(previous.x_bar[1:]) + [model.f(x_last, u_last)]
    ref_u = list(previous.u_bar[1:]) + [u_last]
    v = problem.pack(np.zeros(model.n_x), np.zeros((N, model.n_u)), xi=xi)
    if problem.x0_free:
        x = ref_x[0]
        v[problem.i_x:problem.i_u] = x
    else:
        x, _ = problem._estimate_point(v)
    U = []
    for k in range(N):
        u = ancillary_feedback(setup.cert_iss, x, ref_x[k], ref_u[k])
        U.append(u)
        x = model.f(x, u)
    v[problem.i_u:problem.i_s] = np.asarray(U).reshape(-1)
    return problem.tighten_epigraphs(v)


def _solve(problem: TubeProblem, nlp_opts: SolverOptions, candidate: TubeSolution = None,
           inits: Sequence[np.ndarray] = ()) -> TubeSolution:
    started = time.monotonic()
    opts = nlp_opts or SolverOptions()
    cand = shift_candidate(problem, candidate) if candidate is not None and problem.estimate is None else None
    starts = list(inits)
    if cand is not None:
        starts.insert(0, cand)
    if not starts:
        starts.append(problem.default_start())
    result = solve_multistart(problem.nlp, starts, opts)
    best = problem.tighten_epigraphs(result.vars)
    best_ok = problem.violation(best) <= opts.feas_tol
    elapsed = time.monotonic() - started
    if cand is not None:
        cand_ok = problem.violation(cand) <= opts.feas_tol
        if not cand_ok:
            LOGGER.warning('{}: shifted candidate violates the constraints by {:.3g}'
                           .format(problem.mode, problem.violation(cand)))
        if cand_ok and (not best_ok or problem.objective(best) > problem.objective(cand)):
            LOGGER.warning('{}: solver point not better than the candidate ({}); accepting the candidate'
                           .format(problem.mode, result.status))
            return problem.solution(cand, TubeStatus.candidate_accepted, result, elapsed)
    if not best_ok:
        status = TubeStatus.infeasible
    elif result.status == Status.converged:
        status = TubeStatus.optimal
    else:
        status = TubeStatus.feasible
    solution = problem.solution(best, status, result, elapsed)
    LOGGER.debug('{!r} ({}, {:.3f}s)'.format(solution, result.status, elapsed))
    return solution


def solve_homothetic(setup: TubeSetup, x_hat, e_t: float, nlp_opts: SolverOptions = None,
                     candidate: TubeSolution = None) -> TubeSolution:
    """
    Homothetic tube MPC: x_bar_0 free, s_0 = V(x_bar_0, x_hat), e_0 = e_t.

    The shifted candidate is always a start; when the solver's point is
    infeasible or worse, the candidate is returned as candidate-accepted.
    e_t is in the units of the (norm-form) observer certificate.
    """
    problem = TubeProblem(setup, 'homothetic', x_hat=x_hat, e_t=e_t)
    return _solve(problem, nlp_opts, candidate, [problem.default_start()])


def solve_tightened(setup: TubeSetup, x_hat, e_t: float, nlp_opts: SolverOptions = None,
                    candidate: TubeSolution = None) -> TubeSolution:
    """ Constraint-tightening MPC: x_bar_0 = x_hat, s_0 = 0; the applied input is u_bar_0. """
    problem = TubeProblem(setup, 'tightened', x_hat=x_hat, e_t=e_t)
    return _solve(problem, nlp_opts, candidate, [problem.default_start()])


def solve_rigid(setup: TubeSetup, x_hat, e_t: float, nlp_opts: SolverOptions = None,
                candidate: TubeSolution = None) -> TubeSolution:
    """ Rigid tube: x_bar_0 = x_hat and the tightening fixed at (s_max, e_max). """
    if e_t > setup.rpi.e_max * (1.0 + 1e-9) + 1e-15:
        LOGGER.warning('Rigid tube with e_t={:.4g} above e_max={:.4g}'.format(e_t, setup.rpi.e_max))
    problem = TubeProblem(setup, 'rigid', x_hat=x_hat, e_t=e_t)
    return _solve(problem, nlp_opts, candidate, [problem.default_start()])


def next_value_bound(value: float, solution: TubeSolution, setup: TubeSetup) -> float:
    """ V_bar_{t+1} = V_t + l(x_s, u_s, e_max, s_max) - l(x_bar_0, u_bar_0, e_0, s_0) """
    first = setup.cost(solution.x_bar[0], solution.u_bar[0], solution.e_bar[0], solution.s_bar[0])
    return value + setup.stage_cost_bound() - first


def solve_mhe_mpc(setup: TubeSetup, mhe_cfg: MheConfig, obs: LuenbergerObserver, st: EstimatorState, u, y,
                  cert_ioss, cert_obs_sq: ObserverCertificate, V_bar: float, nlp_opts: SolverOptions = None,
                  candidate: TubeSolution = None) -> Tuple[TubeSolution, EstimatorState, str]:
    """
    Joint MHE and homothetic MPC with the value-bound case distinction.

    Records (u, y) in the estimator, then solves one problem over the MHE
    window and the MPC variables with e_0 given by the MHE radius and
    s_0 = V(x_bar_0, x_hat_0). The joint result is used when it is feasible
    and its cost is at most V_bar (ties included). Otherwise, and while the
    window is not yet full, the Luenberger update and solve_homothetic are
    used. u and y may be None at t = 0.

    The MHE radius lives in W, which must be the squared observer form.

    :returns: (solution, estimator state, 'joint' or 'fallback')
    """
    if not cert_ioss.W.same_form(cert_obs_sq.Vo):
        raise UnsupportedCertificate('Joint MHE-MPC needs W equal to Vo')
    if u is None:
        advanced = st
        e_luenberger = st.e_bar
    else:
        advanced = observer_step(obs, st, u, y)
        e_luenberger = error_update_identical(advanced, cert_ioss, cert_obs_sq, setup.w_bar)
    fallback_state = advanced.with_bound(e_luenberger, 'fallback')
    window, anchor, w_hat = window_of(advanced, mhe_cfg.M)

    joint = None
    if len(window) == mhe_cfg.M:
        estimate = MheProblem(setup.model, mhe_cfg, window, anchor, setup.w_bar)
        problem = TubeProblem(setup, 'joint', estimate=estimate)
        replay = estimate.initial_points(w_hat)[0]
        starts = [problem.default_start(replay)]
        if candidate is not None:
            starts.insert(0, shift_candidate(problem, candidate, replay))
        joint = _solve(problem, nlp_opts, None, starts)
        if joint.feasible and joint.cost <= V_bar:
            xi = joint.vars[:problem.n_est]
            _, e_bar, _, _ = estimate.certified(xi)
            state = advanced.copy(x_hat=estimate.end_state(xi), e_bar=min(e_bar, joint.e_bar[0] ** 2),
                                  branch='joint', info=dict(mpc_cost=joint.cost, value_bound=V_bar))
            return joint, state, 'joint'
        LOGGER.debug('t={}: joint MHE-MPC rejected (cost {:.6g}, bound {:.6g}, status {})'
                     .format(advanced.t, joint.cost, V_bar, joint.status))
    solution = solve_homothetic(setup, fallback_state.x_hat, norm_radius(fallback_state.e_bar), nlp_opts, candidate)
    if joint is not None:
        fallback_state.info.update(joint_cost=joint.cost, value_bound=V_bar)
    return solution, fallback_state, 'fallback'


# terminal set calibration

def calibrate_terminal_set(setup: TubeSetup, V: QuadraticForm, K, sampler: Sampler, c_max: float,
                           iterations: int = 30) -> float:
    """
    Largest c_f <= c_max for which sampled members (x, s) of {V(x, x_s) + s <= c_f}
    keep the tightened constraints at (s, e_max) under the terminal law and
    stay in the set after one nominal step and one tube step.

    V must be a norm form. The conditions are only checked on samples.

    :raises: ContractViolation if no level passes
    """
    if not V.root:
        raise UnsupportedCertificate('Terminal calibration expects a norm-form V')
    model, cons, rpi = setup.model, setup.constraints, setup.rpi
    x_s, u_s = setup.term.x_s, setup.term.u_s
    K = np.atleast_2d(np.asarray(K, dtype=float))
    rho = setup.cert_iss.rho
    increment = gain_eval(setup.gains.gamma_so, rpi.e_max) + gain_eval(setup.gains.gamma_sw, setup.w_bar)
    rng = sampler.generator(0)
    directions = rng.normal(size=(sampler.count, model.n_x))
    directions = np.array([d / V.norm(d) for d in directions])
    fractions = rng.uniform(size=sampler.count) ** (1.0 / model.n_x)

    def passes(c: float) -> bool:
        for d, f in zip(directions, fractions):
            x = x_s + c * f * d
            s = c * (1.0 - f)
            u = u_s + K @ (x - x_s)
            if np.any(cons.evaluate(x, u) + cons.tightening(s, rpi.e_max) > 0):
                return False
            if V.value(model.f(x, u), x_s) + rho * s + increment > c:
                return False
        return True

    low = increment / (1.0 - rho)
    if passes(c_max):
        level = c_max
    else:
        if not passes(low):
            raise ContractViolation('No terminal level passes the sampled conditions')
        high = c_max
        for _ in range(iterations):
            mid = 0.5 * (low + high)
            if passes(mid):
                low = mid
            else:
                high = mid
        level = low
    LOGGER.info('Calibrated terminal level c_f={:.6g} on {} samples'.format(level, sampler.count))
    return level
