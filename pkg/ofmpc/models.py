"""
Plant models: the ten-state quadrotor and small systems for tests and demos.

Every builder returns (PlantModel, ConstraintSet) with untightened constraints.
"""
import logging
import math
import os
from typing import Callable, Tuple

import numpy as np

from .certificates import identical_ioss_certificate, largest_epsilon
from .core import ConstraintSet, Gain, PlantModel
from .observer import ObservabilityCertificate
from .synthesis import (CertificateBundle, linear_clf_certificate, linear_observer_certificate, synthesize,
                        vertex_matrices)
from .tubempc import StageCost

LOGGER = logging.getLogger('ofmpc.models')

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')
QUADROTOR_CERTIFICATES = os.path.join(DATA_DIR, 'quadrotor_certificates.json')

# quadrotor
QUADROTOR_PARAMETERS = dict(d0=10.0, d1=8.0, n0=10.0, kT=0.91, g=9.8, h=0.05)
QUADROTOR_W_BAR = 0.9e-3
QUADROTOR_NOISE_GAIN = 5.0
QUADROTOR_TILT = math.pi / 6
QUADROTOR_TARGETS = dict(eta_tilde_target=0.957, eta_target=0.96, rho_target=0.96)


def quadrotor_setpoint(g: float = QUADROTOR_PARAMETERS['g'],
                       kT: float = QUADROTOR_PARAMETERS['kT']) -> Tuple[np.ndarray, np.ndarray]:
    """ (x_s, u_s): hover at z = (3.7, 3, 10) """
    x_s = np.zeros(10)
    x_s[:3] = [3.7, 3.0, 10.0]
    return x_s, np.array([0.0, 0.0, g / kT])


def _quadrotor_matrices(p: dict, sec2=(1.0, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
    """ continuous-time Jacobians with sec(phi_i)^2 = sec2[i] """
    d0, d1, n0, kT, g = p['d0'], p['d1'], p['n0'], p['kT'], p['g']
    J = np.zeros((10, 10))
    B = np.zeros((10, 3))
    for i in range(3):
        J[i, 5 + i] = 1.0  # z' = v
    for i in range(2):
        J[3 + i, 3 + i] = -d1
        J[3 + i, 8 + i] = 1.0
        J[5 + i, 3 + i] = g * sec2[i]
        J[8 + i, 3 + i] = -d0
        B[8 + i, i] = n0
    B[7, 2] = kT
    return J, B


def build_quadrotor(w_bar: float = QUADROTOR_W_BAR, **parameters) -> Tuple[PlantModel, ConstraintSet]:
    """
    Quadrotor with state (z1, z2, z3, phi1, phi2, v1, v2, v3, omega1, omega2),
    Euler-discretized with piecewise constant input and disturbance.

    The disturbance w has 15 entries: ten process channels h w_i on the state
    derivatives and five measurement channels scaled by 5 on y = (z, phi).
    """
    p = dict(QUADROTOR_PARAMETERS)
    p.update(parameters)
    d0, d1, n0, kT, g, h = (p[k] for k in ('d0', 'd1', 'n0', 'kT', 'g', 'h'))

    def derivative(x, u):
        z, phi, v, omega = x[0:3], x[3:5], x[5:8], x[8:10]
        return np.concatenate([v,
                               -d1 * phi + omega,
                               [g * math.tan(phi[0]), g * math.tan(phi[1]), -g + kT * u[2]],
                               -d0 * phi + n0 * u[0:2]])

    def step(x, u):
        x = np.asarray(x, dtype=float)
        return x + h * derivative(x, np.asarray(u, dtype=float))

    def step_jacobian(x, u):
        J, B = _quadrotor_matrices(p, sec2=[1.0 / math.cos(x[3]) ** 2, 1.0 / math.cos(x[4]) ** 2])
        return np.eye(10) + h * J, h * B

    C = np.hstack([np.eye(5), np.zeros((5, 5))])
    model = PlantModel(n_x=10, n_u=3, n_y=5, n_w=15,
                       step_nominal=step, output_nominal=lambda x, u: C @ np.asarray(x, dtype=float),
                       step_jacobian=step_jacobian, output_jacobian=lambda x, u: (C, np.zeros((5, 3))),
                       E_x=h * np.hstack([np.eye(10), np.zeros((10, 5))]),
                       E_y=np.hstack([np.zeros((5, 10)), QUADROTOR_NOISE_GAIN * np.eye(5)]),
                       w_bound=w_bar, name='quadrotor', parameters=p)

    inf = math.inf
    x_upper = np.full(10, inf)
    x_lower = np.full(10, -inf)
    x_upper[0] = 4.0
    x_upper[3:5] = QUADROTOR_TILT
    x_lower[3:5] = -QUADROTOR_TILT
    tilt = math.pi / 9
    constraints = ConstraintSet.box(x_lower, x_upper, [-tilt, -tilt, 0.0], [tilt, tilt, 2 * g])
    return model, constraints


def quadrotor_vertices(model: PlantModel):
    """ Discrete Jacobians at the corners of sec(phi_i)^2 in [1, sec(pi/6)^2] """
    p = model.parameters
    h = p['h']
    upper = 1.0 / math.cos(QUADROTOR_TILT) ** 2

    def matrix(sec2):
        return np.eye(10) + h * _quadrotor_matrices(p, sec2)[0]

    B = h * _quadrotor_matrices(p)[1]
    return vertex_matrices(matrix, [(1.0, upper), (1.0, upper)]), B


def synthesize_quadrotor(model: PlantModel = None) -> CertificateBundle:
    """ Robust gains and certificates for the quadrotor's polytopic Jacobians. """
    model = model or build_quadrotor()[0]
    vertices, B = quadrotor_vertices(model)
    C = model.output_jacobian(np.zeros(10), np.zeros(3))[0]
    return synthesize(vertices, B, C, model.E_x, model.E_y, description='quadrotor, h={}'.format(model.parameters['h']),
                      **QUADROTOR_TARGETS)


def quadrotor_certificates(path: str = QUADROTOR_CERTIFICATES) -> CertificateBundle:
    """ Load the shipped certificates, synthesizing (and caching) them when absent. """
    if os.path.exists(path):
        LOGGER.debug('Loading certificates from {}'.format(path))
        return CertificateBundle.load(path)
    LOGGER.info('No certificates at {}, synthesizing'.format(path))
    bundle = synthesize_quadrotor()
    try:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        bundle.save(path)
    except OSError as e:
        LOGGER.warning('Could not cache certificates at {}: {}'.format(path, e))
    return bundle


# small systems

DOUBLE_INTEGRATOR_W_BAR = 1e-5
DOUBLE_INTEGRATOR_TARGETS = dict(eta_tilde_target=0.9, eta_target=0.93, rho_target=0.9)


def build_double_integrator(w_bar: float = DOUBLE_INTEGRATOR_W_BAR, h: float = 0.5,
                            noise_gain: float = 1.0) -> Tuple[PlantModel, ConstraintSet]:
    """
    Position/velocity double integrator with process noise on both states
    and measurement noise on the position.
    """
    A = np.array([[1.0, h], [0.0, 1.0]])
    B = np.array([[0.0], [h]])
    C = np.array([[1.0, 0.0]])
    model = PlantModel(n_x=2, n_u=1, n_y=1, n_w=3,
                       step_nominal=lambda x, u: A @ np.asarray(x, dtype=float) + B @ np.asarray(u, dtype=float),
                       output_nominal=lambda x, u: C @ np.asarray(x, dtype=float),
                       step_jacobian=lambda x, u: (A, B), output_jacobian=lambda x, u: (C, np.zeros((1, 1))),
                       E_x=h * np.hstack([np.eye(2), np.zeros((2, 1))]),
                       E_y=[[0.0, 0.0, noise_gain]],
                       w_bound=w_bar, name='double-integrator', parameters=dict(h=h, noise_gain=noise_gain))
    constraints = ConstraintSet.box([-5.0, -2.0], [5.0, 2.0], [-2.0], [2.0])
    return model, constraints


def synthesize_double_integrator(model: PlantModel = None) -> CertificateBundle:
    model = model or build_double_integrator()[0]
    A, B = model.step_jacobian(np.zeros(2), np.zeros(1))
    C = model.output_jacobian(np.zeros(2), np.zeros(1))[0]
    return synthesize([A], B, C, model.E_x, model.E_y, description='double integrator', **DOUBLE_INTEGRATOR_TARGETS)


def build_scalar(a: float = 1.0, noise_gain: float = 0.0, w_bar: float = 0.01) -> Tuple[PlantModel, ConstraintSet]:
    """ x+ = a x + u + w, y = x + noise_gain w """
    model = PlantModel(n_x=1, n_u=1, n_y=1, n_w=1,
                       step_nominal=lambda x, u: a * np.asarray(x, dtype=float) + np.asarray(u, dtype=float),
                       output_nominal=lambda x, u: np.asarray(x, dtype=float),
                       step_jacobian=lambda x, u: (np.array([[a]]), np.array([[1.0]])),
                       output_jacobian=lambda x, u: (np.array([[1.0]]), np.array([[0.0]])),
                       E_x=[[1.0]], E_y=[[noise_gain]], w_bound=w_bar, name='scalar',
                       parameters=dict(a=a, noise_gain=noise_gain))
    return model, ConstraintSet.box([-10.0], [10.0], [-1.0], [1.0])


def build_shift_register(w_bar: float = 0.1) -> Tuple[PlantModel, ConstraintSet]:
    """ x+ = (u, x1) + w, y = x1: observable in two steps with a zero observer gain """
    A = np.array([[0.0, 0.0], [1.0, 0.0]])
    B = np.array([[1.0], [0.0]])
    C = np.array([[1.0, 0.0]])
    model = PlantModel(n_x=2, n_u=1, n_y=1, n_w=2,
                       step_nominal=lambda x, u: A @ np.asarray(x, dtype=float) + B @ np.asarray(u, dtype=float),
                       output_nominal=lambda x, u: C @ np.asarray(x, dtype=float),
                       step_jacobian=lambda x, u: (A, B), output_jacobian=lambda x, u: (C, np.zeros((1, 1))),
                       E_x=np.eye(2), E_y=np.zeros((1, 2)), w_bound=w_bar, name='shift-register')
    return model, ConstraintSet.box([-10.0, -10.0], [10.0, 10.0], [-1.0], [1.0])


def build_coupled_pair(w_bar: float = 0.05, h: float = 0.1) -> Tuple[PlantModel, ConstraintSet]:
    """
    x1+ = x1 + h x2, x2+ = x2 + h u + h w, y = x1 exactly.

    A single disturbance channel, so E_x has rank one.
    """
    A = np.array([[1.0, h], [0.0, 1.0]])
    B = np.array([[0.0], [h]])
    C = np.array([[1.0, 0.0]])
    model = PlantModel(n_x=2, n_u=1, n_y=1, n_w=1,
                       step_nominal=lambda x, u: A @ np.asarray(x, dtype=float) + B @ np.asarray(u, dtype=float),
                       output_nominal=lambda x, u: C @ np.asarray(x, dtype=float),
                       step_jacobian=lambda x, u: (A, B), output_jacobian=lambda x, u: (C, np.zeros((1, 1))),
                       E_x=[[0.0], [h]], E_y=[[0.0]], w_bound=w_bar, name='coupled-pair', parameters=dict(h=h))
    return model, ConstraintSet.box([-5.0, -5.0], [5.0, 5.0], [-1.0], [1.0])


def synthesize_scalar(model: PlantModel = None) -> CertificateBundle:
    model = model or build_scalar()[0]
    A, B = model.step_jacobian(np.zeros(1), np.zeros(1))
    C = model.output_jacobian(np.zeros(1), np.zeros(1))[0]
    return synthesize([A], B, C, model.E_x, model.E_y, L=[[0.5 - A[0, 0]]], K=[[0.5 - A[0, 0]]],
                      eta_tilde_target=0.5, eta_target=0.6, rho_target=0.5, description='scalar')


def shift_register_certificates(model: PlantModel = None) -> CertificateBundle:
    """ Zero observer and feedback gains; the nilpotent dynamics decay in diag(1, 1/4). """
    model = model or build_shift_register()[0]
    A, B = model.step_jacobian(np.zeros(2), np.zeros(1))
    C = model.output_jacobian(np.zeros(2), np.zeros(1))[0]
    P = np.diag([1.0, 0.25])
    L, K = np.zeros((2, 1)), np.zeros((1, 2))
    cert_obs = linear_observer_certificate([A], L, C, model.E_x, model.E_y, 0.5, P=P)
    cert_iss = linear_clf_certificate([A], K, model.E_x, 0.5, P=P)
    epsilon = largest_epsilon(cert_obs.eta_tilde, 0.6) * (1.0 - 1e-9)
    return CertificateBundle(L=L, K=K, cert_obs=cert_obs, cert_iss=cert_iss,
                             cert_ioss=identical_ioss_certificate(cert_obs, L, model.E_x, model.E_y, epsilon),
                             description='shift register')


def shift_register_observability(model: PlantModel = None) -> ObservabilityCertificate:
    """ x_t = (u_{t-1}, x1_{t-1}) + w_{t-1} and x1_{t-1} = u_{t-2} + w1_{t-2}: two steps, unit gains. """
    return ObservabilityCertificate(nu=2, gamma_w=Gain.linear(1.0), gamma_v=Gain.zero())


# stage costs for the tube MPC, on norm-form certificates

def quadrotor_cost(x_s, u_s, cert_iss, cert_obs, input_weight: float = 1e-4) -> StageCost:
    """
    -z1 + ell_s(s) + ell_e(e) with a small input regularization.

    ell_s and ell_e bound the largest z1 in the tube and in the error set.
    """
    e1 = np.zeros(x_s.size)
    e1[0] = 1.0
    return StageCost.quadratic(np.zeros((x_s.size, x_s.size)), input_weight * np.eye(u_s.size), x_s, u_s, q=-e1,
                               ell_s=Gain.linear(np.linalg.norm(cert_iss.V.inv_sqrt_P @ e1)),
                               ell_e=Gain.linear(np.linalg.norm(cert_obs.Vo.inv_sqrt_P @ e1)))


def regulation_cost(x_s, u_s, cert_iss, cert_obs, input_weight: float = 0.1) -> StageCost:
    return StageCost.quadratic(np.eye(x_s.size), input_weight * np.eye(u_s.size), x_s, u_s)


class ModelEntry(object):
    """ How to build, certify and regulate one model. """

    def __init__(self, build: Callable, certificates: Callable, setpoint: Callable = None,
                 cost: Callable = regulation_cost, observability: Callable = None):
        self.build = build
        self.certificates = certificates
        """ certificates(model) -> CertificateBundle """
        self.setpoint = setpoint
        """ setpoint(model) -> (x_s, u_s); the origin by default """
        self.cost = cost
        """ cost(x_s, u_s, cert_iss, cert_obs) -> StageCost """
        self.observability = observability

    def equilibrium(self, model: PlantModel) -> Tuple[np.ndarray, np.ndarray]:
        if self.setpoint is not None:
            return self.setpoint(model)
        return np.zeros(model.n_x), np.zeros(model.n_u)


MODELS = {
    'quadrotor': ModelEntry(build_quadrotor, lambda model: quadrotor_certificates(),
                            setpoint=lambda model: quadrotor_setpoint(model.parameters['g'], model.parameters['kT']),
                            cost=quadrotor_cost),
    'double-integrator': ModelEntry(build_double_integrator, synthesize_double_integrator),
    'scalar': ModelEntry(build_scalar, synthesize_scalar),
    'shift-register': ModelEntry(build_shift_register, shift_register_certificates,
                                 observability=shift_register_observability),
}
""" model id to ModelEntry """
