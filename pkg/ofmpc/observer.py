"""
Luenberger-like observer and the closed-form recursions for its certified error radius.

The estimator state carries the estimate x_hat, the radius e_bar (a bound
on Vo(x_hat, x)) and a short history of past steps. observer_step only
moves the estimate; the radius is updated by one of the *_update functions.
"""
import collections
import logging
import math
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .certificates import IossCertificate, ObserverCertificate
from .core import (ContractViolation, Gain, KFunction, ModelRejected, PlantModel, UnsupportedCertificate,
                   as_vector, gain_eval)

LOGGER = logging.getLogger('ofmpc.observer')

DEFAULT_CAPACITY_IDENTICAL = 1
DEFAULT_CAPACITY_GENERAL = 10


class LuenbergerObserver(object):
    """
    x_hat+ = f(x_hat, u) + L (h(x_hat, u) - y)

    The injection is mapped back to an equivalent disturbance
    w_hat = E_x^+ L (h(x_hat, u) - y), which needs E_x with full row rank.
    Without it, allow_rank_deficient=True uses the least-squares inverse and
    marks the observer unusable for the detectability-based updates.
    """

    def __init__(self, model: PlantModel, L, cert: ObserverCertificate = None,
                 allow_rank_deficient: bool = False):
        self.model = model
        self.L = np.atleast_2d(np.asarray(L, dtype=float)).reshape(model.n_x, model.n_y)
        self.cert = cert
        try:
            self._E_x_inv = model.E_x_pinv
            self.exact_disturbance = True
        except ModelRejected:
            if not allow_rank_deficient:
                raise
            self._E_x_inv = np.linalg.pinv(model.E_x)
            self.exact_disturbance = False

    def injection(self, x_hat, u, y) -> np.ndarray:
        """ L (h(x_hat, u) - y) """
        return self.L @ (self.model.h(x_hat, u) - y)

    def predict(self, x_hat, u, y) -> np.ndarray:
        return self.model.f(x_hat, u) + self.injection(x_hat, u, y)

    def disturbance(self, x_hat, u, y) -> np.ndarray:
        """ w_hat with E_x w_hat equal to the injection """
        return self._E_x_inv @ self.injection(x_hat, u, y)

    def require_exact_disturbance(self):
        if not self.exact_disturbance:
            raise ModelRejected('E_x of {!r} is rank deficient; detectability-based updates are unavailable'
                                .format(self.model))


class HistoryRecord(object):
    """ One past step: the data and the estimate that was current at that time. """
    __slots__ = ('t', 'u', 'y', 'w_hat', 'y_hat', 'x_hat', 'e_bar')

    def __init__(self, *, t: int, u, y, w_hat, y_hat, x_hat, e_bar: float):
        self.t = t
        self.u = u
        self.y = y
        self.w_hat = w_hat
        self.y_hat = y_hat
        self.x_hat = x_hat
        self.e_bar = e_bar

    @property
    def w_hat_norm(self) -> float:
        return float(np.linalg.norm(self.w_hat))

    @property
    def output_residual(self) -> float:
        """ |y_hat - y| """
        return float(np.linalg.norm(self.y_hat - self.y))

    def __repr__(self):
        return 'HistoryRecord(t={}, e_bar={:.4g}, |w_hat|={:.4g}, |y_hat - y|={:.4g})'.format(
            self.t, self.e_bar, self.w_hat_norm, self.output_residual)


class EstimatorState(object):
    """
    Estimate and certified radius at time t, with the records of steps t-1, t-2, ...

    history[-1] is the newest record. Records keep the estimate and radius
    that were current at their time, so anchors for windowed estimators
    come straight from the history.
    """

    def __init__(self, *, x_hat, e_bar: float, capacity: int = DEFAULT_CAPACITY_IDENTICAL, t: int = 0,
                 history: Iterable[HistoryRecord] = None, branch: str = 'init',
                 info: dict = None):
        if capacity < 1:
            raise ContractViolation('History capacity must be >= 1, got {}'.format(capacity))
        e_bar = float(e_bar)
        if not e_bar >= 0:
            raise ContractViolation('e_bar must be >= 0, got {}'.format(e_bar))
        self.x_hat = np.asarray(x_hat, dtype=float).copy()
        self.e_bar = e_bar
        self.t = int(t)
        self.capacity = int(capacity)
        self.history = collections.deque(history or (), maxlen=self.capacity)
        """:type: collections.deque[HistoryRecord] """
        self.branch = branch
        """ which update produced the current estimate """
        self.info = dict(info or {})
        """ diagnostics of the update that produced this state, for traces """

    def copy(self, **changes) -> 'EstimatorState':
        data = dict(x_hat=self.x_hat, e_bar=self.e_bar, capacity=self.capacity, t=self.t,
                    history=list(self.history), branch=self.branch, info=self.info)
        data.update(changes)
        return EstimatorState(**data)

    def with_bound(self, e_bar: float, branch: str = None) -> 'EstimatorState':
        return self.copy(e_bar=e_bar, branch=branch or self.branch)

    def newest(self) -> HistoryRecord:
        if not self.history:
            raise ContractViolation('Estimator history is empty at t={}'.format(self.t))
        return self.history[-1]

    def __repr__(self):
        return 'EstimatorState(t={}, e_bar={:.6g}, branch={!r}, history={})'.format(
            self.t, self.e_bar, self.branch, len(self.history))


class ObservabilityCertificate(object):
    """
    Final-state observability over nu steps:
    |x_t - x~_t| <= sum_j gamma_w(|w - w~|) + gamma_v(|y - y~|) over the last nu steps.
    """

    def __init__(self, *, nu: int, gamma_w: KFunction, gamma_v: KFunction):
        if nu < 1:
            raise ContractViolation('nu must be >= 1, got {}'.format(nu))
        self.nu = int(nu)
        self.gamma_w = gamma_w
        self.gamma_v = gamma_v

    def __repr__(self):
        return 'ObservabilityCertificate(nu={}, gamma_w={!r}, gamma_v={!r})'.format(
            self.nu, self.gamma_w, self.gamma_v)


def observer_step(obs: LuenbergerObserver, st: EstimatorState, u, y) -> EstimatorState:
    """
    Advance the estimate one step and append the record of step t.

    The radius is carried over unchanged.
    """
    model = obs.model
    u = as_vector(u, model.n_u, 'u')
    y = as_vector(y, model.n_y, 'y')
    x_hat = as_vector(st.x_hat, model.n_x, 'x_hat')
    w_hat = obs.disturbance(x_hat, u, y)
    y_hat = model.h(x_hat, u) + model.E_y @ w_hat
    record = HistoryRecord(t=st.t, u=u, y=y, w_hat=w_hat, y_hat=y_hat, x_hat=x_hat, e_bar=st.e_bar)
    new = st.copy(x_hat=obs.predict(x_hat, u, y), t=st.t + 1, branch='observer', info={})
    new.history.append(record)
    return new


def _observer_branch(e_bar: float, cert_obs: ObserverCertificate, w_bar: float) -> float:
    return cert_obs.eta_tilde * e_bar + gain_eval(cert_obs.sigma4, w_bar)


def _ioss_term(record: HistoryRecord, cert_ioss: IossCertificate, w_bar: float) -> float:
    return gain_eval(cert_ioss.sigma1, w_bar + record.w_hat_norm) + \
        gain_eval(cert_ioss.sigma2, record.output_residual)


def _require_identical(cert_ioss: IossCertificate, cert_obs: ObserverCertificate):
    if not cert_ioss.W.same_form(cert_obs.Vo):
        raise UnsupportedCertificate('Identical-Lyapunov update needs W == Vo')


def error_update_identical(st: EstimatorState, cert_ioss: IossCertificate, cert_obs: ObserverCertificate,
                           w_bar: float) -> float:
    """
    e+ = min(eta_tilde e + sigma4(w_bar), eta e + sigma1(w_bar + |w_hat|) + sigma2(|y_hat - y|))

    using the newest history record and the current radius.

    :raises: ContractViolation on empty history
    :raises: UnsupportedCertificate if W and Vo differ
    """
    _require_identical(cert_ioss, cert_obs)
    record = st.newest()
    observer = _observer_branch(st.e_bar, cert_obs, w_bar)
    ioss = cert_ioss.eta * st.e_bar + _ioss_term(record, cert_ioss, w_bar)
    return min(observer, ioss)


def envelope_conversions(cert_ioss: IossCertificate, cert_obs: ObserverCertificate):
    """
    Maps (to_w, to_vo) between radii in Vo and in W: alpha2 o alpha5^-1 and
    alpha6 o alpha1^-1, or the identity when both are the same form.

    :raises: UnsupportedCertificate if an envelope has no closed-form inverse
    """
    if cert_ioss.W.same_form(cert_obs.Vo):
        return (lambda e: e), (lambda e: e)
    to_w = cert_ioss.alpha2.compose(cert_obs.alpha5.inverse())
    to_vo = cert_obs.alpha6.compose(cert_ioss.alpha1.inverse())
    return (lambda e: gain_eval(to_w, e)), (lambda e: gain_eval(to_vo, e))


def error_update_general(st: EstimatorState, cert_ioss: IossCertificate, cert_obs: ObserverCertificate,
                         w_bar: float, M_bar: int = None, e_bar_history: Sequence[float] = None) -> float:
    """
    Windowed update for W different from Vo.

    For M = 1..min(t, M_bar):

        e_M = sum_{j=1..M} eta^(j-1) (sigma1(w_bar + |w_hat_{t-j}|) + sigma2(|y_hat_{t-j} - y_{t-j}|))
              + eta^M alpha2(alpha5^-1(e_{t-M}))

    and the result is min(eta_tilde e_{t-1} + sigma4(w_bar), alpha6(alpha1^-1(min_M e_M))).
    When W and Vo are the same form the envelope conversions are the identity.

    :param e_bar_history: past radii, newest last; defaults to the radii stored in the history
    :raises: UnsupportedCertificate if an envelope has no closed-form inverse
    """
    records = list(st.history)
    if not records:
        raise ContractViolation('Estimator history is empty at t={}'.format(st.t))
    radii = list(e_bar_history) if e_bar_history is not None else [r.e_bar for r in records]
    window = min(st.t, M_bar or st.capacity, len(records), len(radii))
    if window < 1:
        raise ContractViolation('No past steps available at t={}'.format(st.t))

    to_w, to_vo = envelope_conversions(cert_ioss, cert_obs)

    best = math.inf
    running = 0.0
    for M in range(1, window + 1):
        running += cert_ioss.eta ** (M - 1) * _ioss_term(records[-M], cert_ioss, w_bar)
        candidate = running + cert_ioss.eta ** M * to_w(radii[-M])
        LOGGER.debug('t={} M={} e_ioss={:.6g}'.format(st.t, M, candidate))
        best = min(best, candidate)
    observer = _observer_branch(radii[-1], cert_obs, w_bar)
    return min(observer, to_vo(best))


def predict_error(e_bar: float, k: int, cert_obs: ObserverCertificate, w_bar: float) -> float:
    """ eta_tilde^k e + (1 - eta_tilde^k) / (1 - eta_tilde) sigma4(w_bar) """
    if k < 0:
        raise ContractViolation('k must be >= 0, got {}'.format(k))
    decay = cert_obs.eta_tilde ** k
    return decay * e_bar + (1.0 - decay) / (1.0 - cert_obs.eta_tilde) * gain_eval(cert_obs.sigma4, w_bar)


def prediction_mismatch_bound(e_bar: float, cert_obs: ObserverCertificate, w_bar: float) -> float:
    """ gamma_L1(e) + gamma_L2(w_bar), a bound on |x_hat+ - f(x_hat, u)| """
    return gain_eval(cert_obs.gamma_L1, e_bar) + gain_eval(cert_obs.gamma_L2, w_bar)


def observability_update(st: EstimatorState, oc: ObservabilityCertificate, cert_obs: ObserverCertificate,
                         w_bar: float, e_bar_prev: float) -> float:
    """
    min(eta_tilde e_prev + sigma4(w_bar), alpha6(e_obs)) with

        e_obs = sum_{j=1..nu} gamma_w(w_bar + |w_hat_{t-j}|) + gamma_v(|y_{t-j} - y_hat_{t-j}|)

    :raises: ContractViolation when fewer than nu records are available
    """
    if st.t < oc.nu or len(st.history) < oc.nu:
        raise ContractViolation('Observability update needs {} records, have {} at t={}'
                                .format(oc.nu, len(st.history), st.t))
    records = list(st.history)[-oc.nu:]
    e_obs = sum(gain_eval(oc.gamma_w, w_bar + r.w_hat_norm) + gain_eval(oc.gamma_v, r.output_residual)
                for r in records)
    return min(_observer_branch(e_bar_prev, cert_obs, w_bar), gain_eval(cert_obs.alpha6, e_obs))


def outlier_inflation(e_bar_seq: Sequence[float], w_seq: Sequence[float], w_bar: float,
                      cert_ioss: IossCertificate, cert_obs: ObserverCertificate, c: float,
                      initial_excess: float = 0.0) -> List[float]:
    """
    Inflate certified radii for disturbances that exceeded w_bar.

        bound_t = e_t + sum_{k<t} eta_eps^(t-k-1) sigma_eps(max(|w_k| - w_bar, 0)) + eta_eps^t initial_excess

    with eta_eps = max(eta_tilde, eta) and sigma_eps majorizing the increments
    of sigma1 and sigma4 for first arguments up to c.

    :param w_seq: true disturbance norms |w_k|
    :param c: bound on the first gain argument (w_bar + |w_hat|) over the run
    :param initial_excess: max(Vo(x_hat_0, x_0) - e_0, 0)
    """
    eta_eps = max(cert_obs.eta_tilde, cert_ioss.eta)
    sigma_eps = _residual_gain(cert_ioss.sigma1, c).maximum(_residual_gain(cert_obs.sigma4, c))
    result = []
    inflation = float(initial_excess)
    for t, e_bar in enumerate(e_bar_seq):
        if t > 0:
            excess = max(float(w_seq[t - 1]) - w_bar, 0.0)
            inflation = eta_eps * inflation + gain_eval(sigma_eps, excess)
        result.append(float(e_bar) + inflation)
    return result


def _residual_gain(gain: KFunction, c: float) -> KFunction:
    if isinstance(gain, Gain):
        return gain.shifted_residual(c)
    raise UnsupportedCertificate('Outlier inflation needs power-law gains, got {!r}'.format(gain))
