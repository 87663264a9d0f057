"""
Offline design of quadratic certificates for systems whose Jacobians lie in
a polytope (linear parameter-varying embedding of the differential dynamics).

Gains and Lyapunov matrices come from robust LMIs over all vertices, which
also keep the matrices well conditioned. For given gains, a common
Lyapunov matrix can instead be found by solving averaged Stein equations
over a grid of vertex weights and decay rates.
"""
import itertools
import json
import logging
import math
from typing import Callable, List, Sequence, Tuple

import cvxpy as cp
import numpy as np
from scipy import linalg, optimize, signal

from .certificates import (IossCertificate, IssClfCertificate, ObserverCertificate, QuadraticForm,
                           certificate_from_dict, certificate_to_dict, identical_ioss_certificate,
                           largest_epsilon)
from .core import Gain, OfmpcError

LOGGER = logging.getLogger('ofmpc.synthesis')

DEFAULT_TAU_POINTS = 5
DEFAULT_DECAY_POINTS = 25
LMI_DECAY_SHARE = 0.9
""" the LMIs ask for this share of a decay target; the rest is left for epsilon """


class SynthesisError(OfmpcError):
    """ No certificate meeting the requested decay was found. """
    pass


def vertex_matrices(matrix: Callable[[Sequence[float]], np.ndarray],
                    bounds: Sequence[Tuple[float, float]]) -> List[np.ndarray]:
    """ matrix(theta) at every corner of the parameter box. """
    return [np.asarray(matrix(corner), dtype=float) for corner in itertools.product(*bounds)]


def state_feedback_gain(A, B, poles) -> np.ndarray:
    """ K with eig(A + B K) = poles """
    result = signal.place_poles(np.asarray(A, dtype=float), np.asarray(B, dtype=float), poles)
    return -result.gain_matrix


def observer_gain(A, C, poles) -> np.ndarray:
    """ L with eig(A + L C) = poles, by duality """
    result = signal.place_poles(np.asarray(A, dtype=float).T, np.asarray(C, dtype=float).T, poles)
    return -result.gain_matrix.T


def _decay(P: np.ndarray, vertices: Sequence[np.ndarray]) -> float:
    """ max over vertices of the largest generalized eigenvalue of (A^T P A, P) """
    return max(float(linalg.eigh(A.T @ P @ A, P, eigvals_only=True)[-1]) for A in vertices)


def _normalized(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    return P / linalg.eigvalsh(P)[0]


def _psd(blocks) -> cp.constraints.PSD:
    """ block matrix >= 0; the blocks must form a symmetric matrix """
    S = cp.bmat(blocks)
    return 0.5 * (S + S.T) >> 0


def _solve_lmi(problem: cp.Problem, what: str):
    """ :raises: SynthesisError if neither the default solver nor SCS finds a solution """
    try:
        problem.solve()
    except cp.SolverError as e:
        LOGGER.debug('{} LMI: default solver failed ({}), retrying with SCS'.format(what, e))
        try:
            problem.solve(solver=cp.SCS)
        except cp.SolverError as e:
            raise SynthesisError('{} LMI could not be solved: {}'.format(what, e))
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SynthesisError('{} LMI is {}'.format(what, problem.status))
    LOGGER.debug('{} LMI {} with objective {:.6g}'.format(what, problem.status, problem.value))


def robust_feedback(vertices: Sequence[np.ndarray], B, decay: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    K and P > 0 with (A + B K)^T P (A + B K) <= decay P at every vertex.

    Solved for Q = P^-1 and Y = K Q with I <= Q <= t I and K Q K^T <= a I,
    minimizing t + a: the condition number of P and the gain seen through
    the tube stay small. P is scaled to lambda_min(P) = 1.

    :raises: SynthesisError if the LMI is infeasible
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, m = B.shape
    I = np.eye(n)
    Q = cp.Variable((n, n), symmetric=True)
    Y = cp.Variable((m, n))
    t = cp.Variable(nonneg=True)
    a = cp.Variable(nonneg=True)
    constraints = [Q >> I, t * I - Q >> 0, _psd([[a * np.eye(m), Y], [Y.T, Q]])]
    for A in vertices:
        AQ = np.asarray(A, dtype=float) @ Q + B @ Y
        constraints.append(_psd([[decay * Q, AQ], [AQ.T, Q]]))
    _solve_lmi(cp.Problem(cp.Minimize(t + a), constraints), 'feedback')
    Q_value = 0.5 * (Q.value + Q.value.T)
    K = np.linalg.solve(Q_value, Y.value.T).T
    return K, _normalized(linalg.inv(Q_value))


def robust_observer(vertices: Sequence[np.ndarray], C, E_x, E_y, decay: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    L and P > 0 with (A + L C)^T P (A + L C) <= decay P at every vertex.

    Solved for P and Z = P L with I <= P <= t I and M^T P M <= b I for the
    disturbance map M = L E_y + E_x, minimizing t + b.

    :raises: SynthesisError if the LMI is infeasible
    """
    C, E_x, E_y = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (C, E_x, E_y))
    n, p, n_w = C.shape[1], C.shape[0], E_x.shape[1]
    I = np.eye(n)
    P = cp.Variable((n, n), symmetric=True)
    Z = cp.Variable((n, p))
    t = cp.Variable(nonneg=True)
    b = cp.Variable(nonneg=True)
    PM = Z @ E_y + P @ E_x
    constraints = [P >> I, t * I - P >> 0, _psd([[b * np.eye(n_w), PM.T], [PM, P]])]
    for A in vertices:
        PA = P @ np.asarray(A, dtype=float) + Z @ C
        constraints.append(_psd([[decay * P, PA.T], [PA, P]]))
    _solve_lmi(cp.Problem(cp.Minimize(t + b), constraints), 'observer')
    P_value = 0.5 * (P.value + P.value.T)
    L = np.linalg.solve(P_value, Z.value)
    return L, _normalized(P_value)


def _stein(vertices: Sequence[np.ndarray], weights: Sequence[float], mu: float) -> np.ndarray:
    """ P solving sum_i w_i A_i^T P A_i / mu - P = -I """
    n = vertices[0].shape[0]
    operator = sum(w * np.kron(A.T, A.T) for w, A in zip(weights, vertices)) / mu
    vec = np.linalg.solve(operator - np.eye(n * n), -np.eye(n).reshape(-1))
    P = vec.reshape(n, n)
    return 0.5 * (P + P.T)


def _weight_grid(count: int, points: int) -> List[np.ndarray]:
    grid = [np.full(count, 1.0 / count)]
    if count > 1:
        for i in range(count):
            for share in np.linspace(0.0, 1.0, points)[1:-1]:
                weights = np.full(count, (1.0 - share) / (count - 1))
                weights[i] = share
                grid.append(weights)
    return grid


def common_lyapunov(vertices: Sequence[np.ndarray], tau_points: int = DEFAULT_TAU_POINTS,
                    decay_points: int = DEFAULT_DECAY_POINTS) -> Tuple[np.ndarray, float]:
    """
    A P > 0 and the smallest mu found with A^T P A <= mu P at every vertex.

    :raises: SynthesisError if no grid point gives a positive definite P with mu < 1
    """
    vertices = [np.asarray(A, dtype=float) for A in vertices]
    best = (None, math.inf)
    for weights in _weight_grid(len(vertices), tau_points):
        operator = sum(w * np.kron(A.T, A.T) for w, A in zip(weights, vertices))
        radius = float(np.max(np.abs(np.linalg.eigvals(operator))))
        if radius >= 1.0:
            continue
        for mu in np.geomspace(radius * (1.0 + 1e-6) + 1e-12, 1.0, decay_points)[:-1]:
            try:
                P = _stein(vertices, weights, mu)
            except np.linalg.LinAlgError:
                continue
            if linalg.eigvalsh(P)[0] <= 0:
                continue
            P = P / linalg.eigvalsh(P)[0]
            decay = _decay(P, vertices)
            if decay < best[1]:
                best = (P, decay)
    P, decay = best
    if P is None or decay >= 1.0:
        raise SynthesisError('No common quadratic Lyapunov function found (best decay {})'.format(decay))
    LOGGER.debug('common Lyapunov matrix with decay {:.6g} for {} vertices'.format(decay, len(vertices)))
    return P, decay


def _lambda_max(M: np.ndarray) -> float:
    return float(linalg.eigvalsh(0.5 * (M + M.T))[-1]) if M.size else 0.0


def _best_epsilon(mu: float, target: float, objective: Callable[[float], float]) -> float:
    """ epsilon in (0, target / mu - 1] minimizing objective """
    upper = target / mu - 1.0
    if upper <= 0:
        raise SynthesisError('Decay {:.6g} does not meet the target {:.6g}'.format(mu, target))
    result = optimize.minimize_scalar(objective, bounds=(upper * 1e-6, upper), method='bounded')
    return float(result.x)


def linear_observer_certificate(closed_vertices: Sequence[np.ndarray], L, C, E_x, E_y,
                                eta_target: float, P: np.ndarray = None) -> ObserverCertificate:
    """
    Observer certificate for error dynamics e+ = A_cl e - (L E_y + E_x) w with A_cl in the polytope.

    With mu the common decay and M = L E_y + E_x:

        eta_tilde = (1 + eps) mu,  sigma4(r) = (1 + 1/eps) lambda_max(M^T P M) r^2
        gamma_L1(e) = |L C P^-1/2| sqrt(e),  gamma_L2(r) = |L E_y| r

    eps minimizes sigma4(1) / (1 - eta_tilde).
    """
    L, C, E_x, E_y = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (L, C, E_x, E_y))
    if P is None:
        P, mu = common_lyapunov(closed_vertices)
    else:
        mu = _decay(P, closed_vertices)
    M = L @ E_y + E_x
    c_w = _lambda_max(M.T @ P @ M)
    epsilon = _best_epsilon(mu, eta_target, lambda eps: (1.0 + 1.0 / eps) * c_w / (1.0 - (1.0 + eps) * mu))
    Vo = QuadraticForm(P)
    return ObserverCertificate(Vo=Vo, eta_tilde=(1.0 + epsilon) * mu,
                               sigma4=Gain.quadratic((1.0 + 1.0 / epsilon) * c_w),
                               gamma_L1=Gain([(np.linalg.norm(L @ C @ Vo.inv_sqrt_P, 2), 0.5)]),
                               gamma_L2=Gain.linear(np.linalg.norm(L @ E_y, 2)))


def linear_clf_certificate(closed_vertices: Sequence[np.ndarray], K, E_x, rho_target: float,
                           P: np.ndarray = None) -> IssClfCertificate:
    """
    CLF certificate for x+ - x~+ = (A + B K)(x - x~) + E_x (w - w~) with A + B K in the polytope:
    rho = (1 + eps) mu and sigma3(r) = (1 + 1/eps) lambda_max(E_x^T P E_x) r^2.
    """
    E_x = np.atleast_2d(np.asarray(E_x, dtype=float))
    if P is None:
        P, mu = common_lyapunov(closed_vertices)
    else:
        mu = _decay(P, closed_vertices)
    c_w = _lambda_max(E_x.T @ P @ E_x)
    epsilon = _best_epsilon(mu, rho_target, lambda eps: (1.0 + 1.0 / eps) * c_w / (1.0 - (1.0 + eps) * mu))
    return IssClfCertificate(V=QuadraticForm(P), rho=(1.0 + epsilon) * mu,
                             sigma3=Gain.quadratic((1.0 + 1.0 / epsilon) * c_w), K=K)


class CertificateBundle(object):
    """ Gains and certificates of one plant, in squared (not norm) form. """

    def __init__(self, *, L, K, cert_obs: ObserverCertificate, cert_ioss: IossCertificate,
                 cert_iss: IssClfCertificate, description: str = ''):
        self.L = np.atleast_2d(np.asarray(L, dtype=float))
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.cert_obs = cert_obs
        self.cert_ioss = cert_ioss
        self.cert_iss = cert_iss
        self.description = description

    def to_dict(self) -> dict:
        return dict(description=self.description, L=self.L.tolist(), K=self.K.tolist(),
                    observer=certificate_to_dict(self.cert_obs), ioss=certificate_to_dict(self.cert_ioss),
                    iss=certificate_to_dict(self.cert_iss))

    @classmethod
    def from_dict(cls, data: dict) -> 'CertificateBundle':
        return cls(L=data['L'], K=data['K'], cert_obs=certificate_from_dict(data['observer']),
                   cert_ioss=certificate_from_dict(data['ioss']), cert_iss=certificate_from_dict(data['iss']),
                   description=data.get('description', ''))

    def save(self, path: str):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
        LOGGER.info('Wrote certificates to {}'.format(path))

    @classmethod
    def load(cls, path: str) -> 'CertificateBundle':
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def __repr__(self):
        return 'CertificateBundle(eta_tilde={:.4g}, eta={:.4g}, rho={:.4g})'.format(
            self.cert_obs.eta_tilde, self.cert_ioss.eta, self.cert_iss.rho)


def synthesize(vertices: Sequence[np.ndarray], B, C, E_x, E_y, *, observer_poles=None, controller_poles=None,
               eta_tilde_target: float, eta_target: float, rho_target: float,
               nominal: np.ndarray = None, L=None, K=None, description: str = '') -> CertificateBundle:
    """
    Observer gain, feedback gain and the three certificates for a polytopic plant.

    A gain that is neither given nor placed from poles comes from the robust
    LMI (robust_observer, robust_feedback) together with its Lyapunov matrix.
    Given or placed gains get a common Lyapunov matrix from common_lyapunov.
    The IOSS certificate shares the observer's Lyapunov function.

    :param vertices: Jacobians df/dx at the corners of the parameter box
    :param nominal: matrix used for pole placement (default: mean of the vertices)
    :param L: observer gain; placed from observer_poles or designed robustly when omitted
    :param K: feedback gain; placed from controller_poles or designed robustly when omitted
    :raises: SynthesisError if an LMI is infeasible or a decay target is missed
    """
    B, C, E_x, E_y = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (B, C, E_x, E_y))
    vertices = [np.asarray(A, dtype=float) for A in vertices]
    A0 = np.mean(vertices, axis=0) if nominal is None else np.asarray(nominal, dtype=float)
    P_obs = P_iss = None
    if L is not None:
        L = np.atleast_2d(np.asarray(L, dtype=float))
    elif observer_poles is not None:
        L = observer_gain(A0, C, observer_poles)
    else:
        L, P_obs = robust_observer(vertices, C, E_x, E_y, LMI_DECAY_SHARE * eta_tilde_target)
    if K is not None:
        K = np.atleast_2d(np.asarray(K, dtype=float))
    elif controller_poles is not None:
        K = state_feedback_gain(A0, B, controller_poles)
    else:
        K, P_iss = robust_feedback(vertices, B, LMI_DECAY_SHARE * rho_target)
    cert_obs = linear_observer_certificate([A + L @ C for A in vertices], L, C, E_x, E_y, eta_tilde_target, P=P_obs)
    cert_iss = linear_clf_certificate([A + B @ K for A in vertices], K, E_x, rho_target, P=P_iss)
    epsilon = largest_epsilon(cert_obs.eta_tilde, eta_target) * (1.0 - 1e-9)
    cert_ioss = identical_ioss_certificate(cert_obs, L, E_x, E_y, epsilon)
    bundle = CertificateBundle(L=L, K=K, cert_obs=cert_obs, cert_ioss=cert_ioss, cert_iss=cert_iss,
                               description=description)
    LOGGER.info('Synthesized {!r}'.format(bundle))
    return bundle
