"""
Incremental Lyapunov certificates and their sampled falsification.

Three certificates are used throughout:

    * IossCertificate - detectability (W, eta, sigma1, sigma2)
    * IssClfCertificate - stabilizability with feedback u + K(x_hat - x_bar)
    * ObserverCertificate - robust stability of a Luenberger observer

The verify_* functions draw samples and report every violation of the
corresponding dissipation inequality. They falsify, they do not prove.
"""
import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .core import (ConstraintSet, ContractViolation, Gain, KFunction, PlantModel, UnsupportedCertificate,
                   gain_eval)
from .parallel import process_items

LOGGER = logging.getLogger('ofmpc.certificates')

DEFAULT_SAMPLES = 10000
DEFAULT_TOLERANCE = 1e-9
_CHUNK_SIZE = 2500


class InfeasibleEpsilon(ContractViolation):
    """ Raised when (1 + epsilon) * eta_tilde >= 1. """
    pass


class QuadraticForm(object):
    """
    value(a, b) = (a - b)^T P (a - b), or its square root when root=True.

    The root form is a weighted norm ||a - b||_P; the MPC works with it so
    that linear constraint tightening stays superadditive.
    """

    def __init__(self, P, root: bool = False):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if P.shape[0] != P.shape[1]:
            raise ContractViolation('P must be square, got shape {}'.format(P.shape))
        if not np.allclose(P, P.T, rtol=1e-10, atol=1e-12):
            raise ContractViolation('P must be symmetric')
        P = 0.5 * (P + P.T)
        eigenvalues = linalg.eigvalsh(P)
        if eigenvalues[0] <= 0:
            raise ContractViolation('P must be positive definite, smallest eigenvalue {}'.format(eigenvalues[0]))
        self.P = P
        self.root = bool(root)
        self.lambda_min = float(eigenvalues[0])
        self.lambda_max = float(eigenvalues[-1])
        self._sqrt = None
        self._inv_sqrt = None

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def sqrt_P(self) -> np.ndarray:
        if self._sqrt is None:
            self._sqrt = np.real(linalg.sqrtm(self.P))
        return self._sqrt

    @property
    def inv_sqrt_P(self) -> np.ndarray:
        if self._inv_sqrt is None:
            self._inv_sqrt = np.linalg.inv(self.sqrt_P)
        return self._inv_sqrt

    def norm(self, d) -> float:
        """ ||d||_P """
        d = np.asarray(d, dtype=float)
        return math.sqrt(max(float(d @ self.P @ d), 0.0))

    def value(self, a, b) -> float:
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        q = max(float(d @ self.P @ d), 0.0)
        return math.sqrt(q) if self.root else q

    def __call__(self, a, b) -> float:
        return self.value(a, b)

    def gradient(self, a, b) -> np.ndarray:
        """ Gradient of value(a, b) with respect to a (zero at a == b for the root form). """
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        Pd = self.P @ d
        if not self.root:
            return 2.0 * Pd
        q = float(d @ Pd)
        if q <= 0:
            return np.zeros_like(d)
        return Pd / math.sqrt(q)

    def lower_envelope(self) -> Gain:
        """ alpha(r) <= value(a, b) for r = ||a - b|| """
        if self.root:
            return Gain.linear(math.sqrt(self.lambda_min))
        return Gain.quadratic(self.lambda_min)

    def upper_envelope(self) -> Gain:
        """ value(a, b) <= alpha(r) for r = ||a - b|| """
        if self.root:
            return Gain.linear(math.sqrt(self.lambda_max))
        return Gain.quadratic(self.lambda_max)

    def as_root(self) -> 'QuadraticForm':
        if self.root:
            raise UnsupportedCertificate('Form is already in norm form')
        return QuadraticForm(self.P, root=True)

    def same_form(self, other: 'QuadraticForm', tol: float = 1e-12) -> bool:
        return self.root == other.root and self.P.shape == other.P.shape and \
            bool(np.allclose(self.P, other.P, rtol=0.0, atol=tol * max(1.0, self.lambda_max)))

    def __repr__(self):
        return 'QuadraticForm(n={}, root={}, eig=[{:.3g}, {:.3g}])'.format(
            self.n, self.root, self.lambda_min, self.lambda_max)


def _check_decay(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value < 1.0:
        raise ContractViolation('{} must lie in [0, 1), got {}'.format(name, value))
    return value


class IossCertificate(object):
    """ W(f_w(x,u,w), f_w(x~,u,w~)) <= eta W(x,x~) + sigma1(|w - w~|) + sigma2(|y - y~|) """

    def __init__(self, *, W: QuadraticForm, eta: float, sigma1: KFunction, sigma2: KFunction,
                 alpha1: KFunction = None, alpha2: KFunction = None):
        self.W = W
        self.eta = _check_decay(eta, 'eta')
        self.sigma1 = sigma1
        self.sigma2 = sigma2
        self.alpha1 = alpha1 if alpha1 is not None else W.lower_envelope()
        self.alpha2 = alpha2 if alpha2 is not None else W.upper_envelope()

    def __repr__(self):
        return 'IossCertificate(eta={}, sigma1={!r}, sigma2={!r})'.format(self.eta, self.sigma1, self.sigma2)


class IssClfCertificate(object):
    """
    V(f_w(x,u,w), f_w(x~,kappa(x~,x,u),w~)) <= rho V(x,x~) + sigma3(|w - w~|)

    with kappa(x_hat, x_bar, u_bar) = u_bar + K (x_hat - x_bar).
    """

    def __init__(self, *, V: QuadraticForm, rho: float, sigma3: KFunction, K,
                 gamma_kappa: KFunction = None):
        self.V = V
        self.rho = _check_decay(rho, 'rho')
        self.sigma3 = sigma3
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        if self.K.shape[1] != V.n:
            raise ContractViolation('K has {} columns, expected {}'.format(self.K.shape[1], V.n))
        self.gamma_kappa = gamma_kappa if gamma_kappa is not None else Gain.linear(np.linalg.norm(self.K, 2))

    @property
    def alpha3(self) -> Gain:
        return self.V.lower_envelope()

    @property
    def alpha4(self) -> Gain:
        return self.V.upper_envelope()

    def kappa(self, x_hat, x_bar, u_bar) -> np.ndarray:
        return np.asarray(u_bar, dtype=float) + self.K @ (np.asarray(x_hat, dtype=float) - np.asarray(x_bar))

    def __repr__(self):
        return 'IssClfCertificate(rho={}, sigma3={!r})'.format(self.rho, self.sigma3)


class ObserverCertificate(object):
    """
    Vo(x_hat+, x+) <= eta_tilde Vo(x_hat, x) + sigma4(|w|)
    |L(h(x_hat,u) - y)| <= gamma_L1(Vo(x_hat, x)) + gamma_L2(|w|)
    """

    def __init__(self, *, Vo: QuadraticForm, eta_tilde: float, sigma4: KFunction,
                 gamma_L1: KFunction, gamma_L2: KFunction,
                 alpha5: KFunction = None, alpha6: KFunction = None):
        self.Vo = Vo
        self.eta_tilde = _check_decay(eta_tilde, 'eta_tilde')
        self.sigma4 = sigma4
        self.gamma_L1 = gamma_L1
        self.gamma_L2 = gamma_L2
        self.alpha5 = alpha5 if alpha5 is not None else Vo.lower_envelope()
        self.alpha6 = alpha6 if alpha6 is not None else Vo.upper_envelope()

    def __repr__(self):
        return 'ObserverCertificate(eta_tilde={}, sigma4={!r})'.format(self.eta_tilde, self.sigma4)


Certificate = Union[IossCertificate, IssClfCertificate, ObserverCertificate]


# identical Lyapunov functions

def identical_lyapunov_constants(Po: QuadraticForm, L, E_x, E_y, eta_tilde: float,
                                 epsilon: float) -> Tuple[float, Gain, Gain]:
    """
    Detectability constants that reuse the observer's Lyapunov matrix.

    For a model affine in w with a linear output injection L, Po certifies
    the IOSS inequality with

        eta = (1 + eps) eta_tilde
        sigma1(r) = 2(1 + eps)/eps (sqrt(lmax(Ex' Po Ex)) + sqrt(lmax(Ey' L' Po L Ey)))^2 r^2
        sigma2(r) = 2(1 + eps)/eps lmax(L' Po L) r^2

    :raises: InfeasibleEpsilon if (1 + eps) eta_tilde >= 1
    """
    epsilon = float(epsilon)
    if epsilon <= 0:
        raise ContractViolation('epsilon must be > 0, got {}'.format(epsilon))
    eta = (1.0 + epsilon) * float(eta_tilde)
    if not 0 <= eta_tilde < 1 or eta >= 1.0:
        raise InfeasibleEpsilon('(1 + {}) * {} = {} is not < 1'.format(epsilon, eta_tilde, eta))
    P = Po.P
    L = np.atleast_2d(np.asarray(L, dtype=float))
    E_x = np.atleast_2d(np.asarray(E_x, dtype=float))
    E_y = np.atleast_2d(np.asarray(E_y, dtype=float))
    LE_y = L @ E_y
    factor = 2.0 * (1.0 + epsilon) / epsilon
    c_x = math.sqrt(_lambda_max(E_x.T @ P @ E_x))
    c_y = math.sqrt(_lambda_max(LE_y.T @ P @ LE_y))
    sigma1 = Gain.quadratic(factor * (c_x + c_y) ** 2)
    sigma2 = Gain.quadratic(factor * _lambda_max(L.T @ P @ L))
    return eta, sigma1, sigma2


def identical_ioss_certificate(obs_cert: ObserverCertificate, L, E_x, E_y,
                               epsilon: float) -> IossCertificate:
    """ IossCertificate with W = Vo, built from identical_lyapunov_constants. """
    if obs_cert.Vo.root:
        raise UnsupportedCertificate('Identical-Lyapunov constants need the squared observer form')
    eta, sigma1, sigma2 = identical_lyapunov_constants(obs_cert.Vo, L, E_x, E_y, obs_cert.eta_tilde, epsilon)
    return IossCertificate(W=obs_cert.Vo, eta=eta, sigma1=sigma1, sigma2=sigma2,
                           alpha1=obs_cert.alpha5, alpha2=obs_cert.alpha6)


def largest_epsilon(eta_tilde: float, eta_target: float) -> float:
    """ Largest epsilon with (1 + epsilon) eta_tilde <= eta_target. """
    if eta_tilde <= 0:
        return math.inf
    return float(eta_target) / float(eta_tilde) - 1.0


def _lambda_max(M: np.ndarray) -> float:
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0.0
    return max(float(linalg.eigvalsh(0.5 * (M + M.T))[-1]), 0.0)


# norm form

def norm_form(cert: Certificate) -> Certificate:
    """
    Square root of a certificate built on squared quadratic forms.

    Decays become their square roots and gains their (single-term) roots,
    by subadditivity of the square root. The observer injection gains take
    the squared form value, so they are composed with r -> r^2.

    :raises: UnsupportedCertificate for certificates already in norm form
             or with gains that have no closed-form root
    """
    square = Gain.quadratic(1.0)
    if isinstance(cert, IossCertificate):
        return IossCertificate(W=cert.W.as_root(), eta=math.sqrt(cert.eta),
                               sigma1=cert.sigma1.root(), sigma2=cert.sigma2.root(),
                               alpha1=cert.alpha1.root(), alpha2=cert.alpha2.root())
    if isinstance(cert, IssClfCertificate):
        return IssClfCertificate(V=cert.V.as_root(), rho=math.sqrt(cert.rho), sigma3=cert.sigma3.root(),
                                 K=cert.K, gamma_kappa=cert.gamma_kappa)
    if isinstance(cert, ObserverCertificate):
        return ObserverCertificate(Vo=cert.Vo.as_root(), eta_tilde=math.sqrt(cert.eta_tilde),
                                   sigma4=cert.sigma4.root(),
                                   gamma_L1=cert.gamma_L1.compose(square), gamma_L2=cert.gamma_L2,
                                   alpha5=cert.alpha5.root(), alpha6=cert.alpha6.root())
    raise UnsupportedCertificate('Unknown certificate type {}'.format(type(cert).__name__))


def norm_radius(e_bar: float) -> float:
    """ Radius in norm-form units for a radius of a squared form. """
    return math.sqrt(max(float(e_bar), 0.0))


# sampled falsification

class FalsificationReport(object):
    """ Outcome of a sampled check of an inequality lhs <= rhs. """

    def __init__(self, *, n_samples: int = 0, n_violations: int = 0, worst_residual: float = -math.inf,
                 witness: Optional[Dict[str, Any]] = None, check: str = '', tolerance: float = DEFAULT_TOLERANCE):
        self.n_samples = n_samples
        self.n_violations = n_violations
        self.worst_residual = worst_residual
        """ max over samples of lhs - rhs """
        self.witness = witness
        """ the sample with the worst residual, when it is a violation """
        self.check = check
        self.tolerance = tolerance

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    @classmethod
    def merge(cls, reports: Sequence['FalsificationReport']) -> 'FalsificationReport':
        """ Order-independent aggregation: counts add, the worst residual wins. """
        if not reports:
            return cls()
        worst = max(reports, key=lambda r: r.worst_residual)
        return cls(n_samples=sum(r.n_samples for r in reports),
                   n_violations=sum(r.n_violations for r in reports),
                   worst_residual=worst.worst_residual,
                   witness=worst.witness if any(r.n_violations for r in reports) else None,
                   check=worst.check, tolerance=worst.tolerance)

    def __repr__(self):
        return 'FalsificationReport({}: {}/{} violations, worst residual {:.3g})'.format(
            self.check or 'check', self.n_violations, self.n_samples, self.worst_residual)


class Sampler(object):
    """
    Draws sample points from a ball intersected with the constraint boxes.

    The default center is the box midpoint (or the origin clipped into a
    half-bounded box); the default radius covers the finite part of the box.
    Disturbances are drawn uniformly from the ball of radius w_bound.
    """

    def __init__(self, count: int = DEFAULT_SAMPLES, radius: float = None, seed: int = 0,
                 center=None, input_radius: float = None, input_center=None,
                 max_workers: int = 1):
        if count < 1:
            raise ContractViolation('Sample count must be >= 1, got {}'.format(count))
        self.count = int(count)
        self.radius = radius
        self.seed = int(seed)
        self.center = None if center is None else np.asarray(center, dtype=float)
        self.input_radius = input_radius
        self.input_center = None if input_center is None else np.asarray(input_center, dtype=float)
        self.max_workers = max_workers

    def chunks(self) -> List[Tuple[int, int]]:
        """ (chunk index, sample count) pairs; each chunk seeds its own generator. """
        full, rest = divmod(self.count, _CHUNK_SIZE)
        sizes = [_CHUNK_SIZE] * full + ([rest] if rest else [])
        return list(enumerate(sizes))

    def generator(self, chunk: int) -> np.random.RandomState:
        return np.random.RandomState([self.seed, chunk])

    def draw_box_ball(self, rng: np.random.RandomState, box, n: int, count: int, radius: float = None,
                      center=None) -> np.ndarray:
        """ count points uniformly distributed in ball(center, radius) intersected with box """
        lower, upper = box if box is not None else (np.full(n, -np.inf), np.full(n, np.inf))
        if center is None:
            center = _default_center(lower, upper)
        if radius is None:
            radius = _default_radius(lower, upper)
        accepted = []
        total = 0
        for _ in range(1000):
            points = center + radius * _ball(rng, n, count)
            inside = np.all((points >= lower) & (points <= upper), axis=1)
            accepted.append(points[inside])
            total += int(inside.sum())
            if total >= count:
                return np.concatenate(accepted)[:count]
        raise ContractViolation('Sampling region is empty or too thin (radius {}, center {})'
                                .format(radius, center))

    def draw_disturbances(self, rng: np.random.RandomState, n_w: int, w_bound: float, count: int) -> np.ndarray:
        if n_w == 0:
            return np.zeros((count, 0))
        return w_bound * _ball(rng, n_w, count)

    def draw_states(self, rng, constraints: Optional[ConstraintSet], n_x: int, count: int) -> np.ndarray:
        box = constraints.x_box if constraints is not None else None
        return self.draw_box_ball(rng, box, n_x, count, self.radius, self.center)

    def draw_inputs(self, rng, constraints: Optional[ConstraintSet], n_u: int, count: int) -> np.ndarray:
        if n_u == 0:
            return np.zeros((count, 0))
        box = constraints.u_box if constraints is not None else None
        return self.draw_box_ball(rng, box, n_u, count, self.input_radius, self.input_center)


def _ball(rng: np.random.RandomState, n: int, count: int) -> np.ndarray:
    directions = rng.normal(size=(count, n))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return directions / norms * rng.uniform(size=(count, 1)) ** (1.0 / n)


def _default_center(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    both = np.isfinite(lower) & np.isfinite(upper)
    return np.where(both, 0.5 * (lower + upper), np.clip(0.0, lower, upper))


def _default_radius(lower: np.ndarray, upper: np.ndarray) -> float:
    both = np.isfinite(lower) & np.isfinite(upper)
    half = 0.5 * np.linalg.norm((upper - lower)[both]) if both.any() else 0.0
    return max(1.0, float(half))


def _run_chunks(sampler: Sampler, check: str, tolerance: float, evaluate) -> FalsificationReport:
    """
    evaluate(rng, count) -> list of (residual, witness) pairs.

    Chunks are seeded independently, so reports are identical for any worker count.
    """

    def run_chunk(chunk: Tuple[int, int]) -> FalsificationReport:
        index, count = chunk
        rng = sampler.generator(index)
        worst, witness, violations = -math.inf, None, 0
        for residual, sample in evaluate(rng, count):
            if residual > tolerance:
                violations += 1
            if residual > worst:
                worst, witness = residual, sample
        return FalsificationReport(n_samples=count, n_violations=violations, worst_residual=worst,
                                   witness=witness if violations else None, check=check, tolerance=tolerance)

    reports = process_items(sampler.chunks(), run_chunk, max_workers=sampler.max_workers)
    report = FalsificationReport.merge(reports)
    LOGGER.debug('{!r}'.format(report))
    return report


def verify_ioss_decrease(model: PlantModel, cert: IossCertificate, sampler: Sampler,
                         constraints: ConstraintSet = None,
                         tolerance: float = DEFAULT_TOLERANCE) -> FalsificationReport:
    """
    Sample W(f_w(x,u,w), f_w(x~,u,w~)) <= eta W(x,x~) + sigma1(|w-w~|) + sigma2(|h_w - h~_w|).
    """

    def evaluate(rng, count):
        xs = sampler.draw_states(rng, constraints, model.n_x, count)
        xts = sampler.draw_states(rng, constraints, model.n_x, count)
        us = sampler.draw_inputs(rng, constraints, model.n_u, count)
        ws = sampler.draw_disturbances(rng, model.n_w, model.w_bound, count)
        wts = sampler.draw_disturbances(rng, model.n_w, model.w_bound, count)
        for x, xt, u, w, wt in zip(xs, xts, us, ws, wts):
            lhs = cert.W.value(model.f(x, u) + model.E_x @ w, model.f(xt, u) + model.E_x @ wt)
            dy = (model.h(x, u) + model.E_y @ w) - (model.h(xt, u) + model.E_y @ wt)
            rhs = cert.eta * cert.W.value(x, xt) + gain_eval(cert.sigma1, np.linalg.norm(w - wt)) \
                + gain_eval(cert.sigma2, np.linalg.norm(dy))
            yield lhs - rhs, dict(x=x, x_tilde=xt, u=u, w=w, w_tilde=wt)

    return _run_chunks(sampler, 'ioss-decrease', tolerance, evaluate)


def verify_iss_clf(model: PlantModel, cert: IssClfCertificate, sampler: Sampler,
                   constraints: ConstraintSet = None,
                   tolerance: float = DEFAULT_TOLERANCE) -> FalsificationReport:
    """
    Sample V(f_w(x,u,w), f_w(x~,kappa(x~,x,u),w~)) <= rho V(x,x~) + sigma3(|w-w~|).
    """

    def evaluate(rng, count):
        xs = sampler.draw_states(rng, constraints, model.n_x, count)
        xts = sampler.draw_states(rng, constraints, model.n_x, count)
        us = sampler.draw_inputs(rng, constraints, model.n_u, count)
        ws = sampler.draw_disturbances(rng, model.n_w, model.w_bound, count)
        wts = sampler.draw_disturbances(rng, model.n_w, model.w_bound, count)
        for x, xt, u, w, wt in zip(xs, xts, us, ws, wts):
            ut = cert.kappa(xt, x, u)
            lhs = cert.V.value(model.f(x, u) + model.E_x @ w, model.f(xt, ut) + model.E_x @ wt)
            rhs = cert.rho * cert.V.value(x, xt) + gain_eval(cert.sigma3, np.linalg.norm(w - wt))
            yield lhs - rhs, dict(x=x, x_tilde=xt, u=u, w=w, w_tilde=wt)

    return _run_chunks(sampler, 'iss-clf', tolerance, evaluate)


def verify_observer(model: PlantModel, obs, cert: ObserverCertificate, sampler: Sampler,
                    constraints: ConstraintSet = None,
                    tolerance: float = DEFAULT_TOLERANCE) -> FalsificationReport:
    """
    Sample both observer inequalities: the decrease of Vo along the error
    dynamics and the bound on the output injection. A sample counts once
    with the larger of the two residuals.

    :param obs: anything with an injection matrix attribute L
    """
    L = np.atleast_2d(np.asarray(obs.L, dtype=float))

    def evaluate(rng, count):
        xs = sampler.draw_states(rng, constraints, model.n_x, count)
        x_hats = sampler.draw_states(rng, constraints, model.n_x, count)
        us = sampler.draw_inputs(rng, constraints, model.n_u, count)
        ws = sampler.draw_disturbances(rng, model.n_w, model.w_bound, count)
        for x, x_hat, u, w in zip(xs, x_hats, us, ws):
            y = model.h(x, u) + model.E_y @ w
            injection = L @ (model.h(x_hat, u) - y)
            x_hat_next = model.f(x_hat, u) + injection
            x_next = model.f(x, u) + model.E_x @ w
            vo = cert.Vo.value(x_hat, x)
            w_norm = np.linalg.norm(w)
            decrease = cert.Vo.value(x_hat_next, x_next) - cert.eta_tilde * vo - gain_eval(cert.sigma4, w_norm)
            bound = np.linalg.norm(injection) - gain_eval(cert.gamma_L1, vo) - gain_eval(cert.gamma_L2, w_norm)
            which = 'decrease' if decrease >= bound else 'injection'
            yield max(decrease, bound), dict(x=x, x_hat=x_hat, u=u, w=w, inequality=which)

    return _run_chunks(sampler, 'observer', tolerance, evaluate)


def verify_envelopes(form: QuadraticForm, lower: KFunction, upper: KFunction, sampler: Sampler,
                     n: int = None, tolerance: float = DEFAULT_TOLERANCE) -> FalsificationReport:
    """ Sample lower(|a-b|) <= form(a, b) <= upper(|a-b|). """
    n = n or form.n

    def evaluate(rng, count):
        a_s = sampler.draw_box_ball(rng, None, n, count, sampler.radius, sampler.center)
        b_s = sampler.draw_box_ball(rng, None, n, count, sampler.radius, sampler.center)
        for a, b in zip(a_s, b_s):
            r = np.linalg.norm(a - b)
            v = form.value(a, b)
            residual = max(gain_eval(lower, r) - v, v - gain_eval(upper, r))
            # relative to the magnitude, envelopes are exact up to rounding
            yield residual - 1e-12 * max(1.0, v), dict(a=a, b=b)

    return _run_chunks(sampler, 'envelopes', tolerance, evaluate)


# serialization

def _form_to_dict(form: QuadraticForm) -> dict:
    return dict(P=form.P.tolist(), root=form.root)


def _form_from_dict(data: dict) -> QuadraticForm:
    return QuadraticForm(np.asarray(data['P'], dtype=float), root=bool(data.get('root', False)))


def _gain_to_list(gain: KFunction) -> list:
    if not isinstance(gain, Gain):
        raise UnsupportedCertificate('Only power-law gains can be serialized, got {!r}'.format(gain))
    return gain.to_list()


def certificate_to_dict(cert: Certificate) -> dict:
    """ Dense matrices as nested lists plus gain term lists. """
    if isinstance(cert, IossCertificate):
        return dict(kind='ioss', W=_form_to_dict(cert.W), eta=cert.eta,
                    sigma1=_gain_to_list(cert.sigma1), sigma2=_gain_to_list(cert.sigma2),
                    alpha1=_gain_to_list(cert.alpha1), alpha2=_gain_to_list(cert.alpha2))
    if isinstance(cert, IssClfCertificate):
        return dict(kind='iss-clf', V=_form_to_dict(cert.V), rho=cert.rho, sigma3=_gain_to_list(cert.sigma3),
                    K=cert.K.tolist(), gamma_kappa=_gain_to_list(cert.gamma_kappa))
    if isinstance(cert, ObserverCertificate):
        return dict(kind='observer', Vo=_form_to_dict(cert.Vo), eta_tilde=cert.eta_tilde,
                    sigma4=_gain_to_list(cert.sigma4), gamma_L1=_gain_to_list(cert.gamma_L1),
                    gamma_L2=_gain_to_list(cert.gamma_L2),
                    alpha5=_gain_to_list(cert.alpha5), alpha6=_gain_to_list(cert.alpha6))
    raise UnsupportedCertificate('Unknown certificate type {}'.format(type(cert).__name__))


def certificate_from_dict(data: dict) -> Certificate:
    kind = data.get('kind')
    gain = Gain.from_list
    if kind == 'ioss':
        return IossCertificate(W=_form_from_dict(data['W']), eta=data['eta'], sigma1=gain(data['sigma1']),
                               sigma2=gain(data['sigma2']), alpha1=gain(data['alpha1']),
                               alpha2=gain(data['alpha2']))
    if kind == 'iss-clf':
        return IssClfCertificate(V=_form_from_dict(data['V']), rho=data['rho'], sigma3=gain(data['sigma3']),
                                 K=np.asarray(data['K'], dtype=float), gamma_kappa=gain(data['gamma_kappa']))
    if kind == 'observer':
        return ObserverCertificate(Vo=_form_from_dict(data['Vo']), eta_tilde=data['eta_tilde'],
                                   sigma4=gain(data['sigma4']), gamma_L1=gain(data['gamma_L1']),
                                   gamma_L2=gain(data['gamma_L2']), alpha5=gain(data['alpha5']),
                                   alpha6=gain(data['alpha6']))
    raise UnsupportedCertificate('Unknown certificate kind {!r}'.format(kind))
