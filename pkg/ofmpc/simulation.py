"""
Closed-loop simulation: problem assembly from a SimConfig, the
estimate -> solve -> apply -> advance loop, and run statistics.
"""
import copy
import functools
import logging
import math
import time
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import registry
from .certificates import (FalsificationReport, Sampler, norm_form, verify_ioss_decrease, verify_iss_clf,
                           verify_observer)
from .config import AUTO, ConfigError, SimConfig
from .context import SimContext, Trace, TraceRow
from .core import ContractViolation, OfmpcError, gain_eval, model_output, model_step
from .mhe import MheConfig
from .models import MODELS
from .nlp import SolverOptions
from .observer import EstimatorState, LuenbergerObserver, outlier_inflation
from .parallel import process_items
from .tubempc import (InitialInfeasibility, TerminalIngredients, TubeSetup, calibrate_terminal_set, disturbance_limit,
                      linear_tightening)

LOGGER = logging.getLogger('ofmpc.simulation')

PERFORMANCE_WINDOW = 100
PERFORMANCE_SLACK = 1e-3
TERMINAL_SAMPLES = 2000
VERIFY_SAMPLES = 10000


class CertificateCheckFailed(OfmpcError):
    """ Sampled verification found a violated certificate inequality (strict mode). """

    def __init__(self, reports: Sequence[FalsificationReport]):
        self.reports = list(reports)
        failed = ', '.join(repr(r) for r in self.reports if not r.passed)
        super().__init__('Certificate verification failed: {}'.format(failed))


def gen_disturbance(seed: int, w_bar: float, T: int, n_w: int, outliers: Dict[int, float] = None) -> np.ndarray:
    """
    T disturbance vectors drawn uniformly on the sphere of radius w_bar.

    :param outliers: step -> factor; those steps get norm factor * w_bar
    :returns: array of shape (T, n_w)
    """
    if T < 1:
        raise ContractViolation('Run length must be >= 1, got {}'.format(T))
    rng = np.random.RandomState(seed)
    W = rng.normal(size=(T, n_w))
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    W = W / norms * w_bar
    for t, factor in (outliers or {}).items():
        W[t] *= factor
    return W


def build_context(cfg: SimConfig) -> SimContext:
    """
    Build the model, certificates, tube MPC setup and estimator pieces for cfg.

    :raises: ConfigError for unknown models, bad parameters or an initial bound below Vo(x_hat0, x0)
    """
    try:
        entry = MODELS[cfg.model]
    except KeyError:
        raise ConfigError('Unknown model {!r}; known: {}'.format(cfg.model, ', '.join(sorted(MODELS))))
    parameters = dict(cfg.model_parameters)
    if cfg.w_bar is not None and cfg.w_bar != AUTO:
        parameters['w_bar'] = cfg.w_bar
    try:
        model, constraints = entry.build(**parameters)
    except TypeError as e:
        raise ConfigError('Invalid parameters for model {!r}: {}'.format(cfg.model, e))
    bundle = entry.certificates(model)
    cert_iss, cert_obs = norm_form(bundle.cert_iss), norm_form(bundle.cert_obs)
    x_s, u_s = entry.equilibrium(model)
    setup = TubeSetup(model=model, constraints=linear_tightening(constraints, cert_iss, cert_obs),
                      cert_iss=cert_iss, cert_obs=cert_obs, term=TerminalIngredients.equality(x_s, u_s),
                      cost=entry.cost(x_s, u_s, cert_iss, cert_obs), N=cfg.N, w_bar=model.w_bound)
    if cfg.w_bar == AUTO:
        model = model.with_w_bound(_auto_disturbance_bound(setup, cfg.limit_fraction))
        setup = TubeSetup(model=model, constraints=setup.constraints, cert_iss=cert_iss, cert_obs=cert_obs,
                          term=setup.term, cost=setup.cost, N=cfg.N, w_bar=model.w_bound, gains=setup.gains)
    if cfg.terminal == 'set':
        level = calibrate_terminal_set(setup, cert_iss.V, bundle.K, Sampler(count=TERMINAL_SAMPLES, seed=cfg.seed),
                                       cfg.terminal_level)
        setup.term = TerminalIngredients.sublevel(x_s, u_s, cert_iss.V, bundle.K, level)

    _initial_conditions(cfg, model, x_s, bundle.cert_obs)
    e_cap = max(cfg.e0, gain_eval(bundle.cert_obs.sigma4, model.w_bound) / (1.0 - bundle.cert_obs.eta_tilde))
    nlp_opts = SolverOptions(max_iters=cfg.max_iters, tol=cfg.tol, feas_tol=cfg.feas_tol,
                             trace_path=cfg.solver_trace)
    context = SimContext(config=cfg, model=model, constraints=constraints, bundle=bundle, setup=setup,
                         mhe_cfg=MheConfig.from_certificate(bundle.cert_ioss, cfg.mhe_M, e_cap),
                         observer=LuenbergerObserver(model, bundle.L, bundle.cert_obs),
                         observability=entry.observability(model) if entry.observability else None,
                         nlp_opts=nlp_opts, seed=cfg.seed, max_workers=cfg.workers)
    LOGGER.debug('Built context for {!r}: {!r}, {!r}'.format(cfg, bundle, setup.rpi))
    return context


def _auto_disturbance_bound(setup: TubeSetup, fraction: float) -> float:
    """ :raises: ConfigError if the setpoint is on the constraint boundary or nothing binds """
    try:
        limit = disturbance_limit(setup)
    except ContractViolation as e:
        raise ConfigError('model.w_bar = auto: {}'.format(e))
    if not math.isfinite(limit):
        raise ConfigError('model.w_bar = auto: no constraint limits the disturbance bound')
    LOGGER.info('Disturbance limit {:.6g}, using w_bar = {:.6g}'.format(limit, fraction * limit))
    return fraction * limit


def _initial_conditions(cfg: SimConfig, model, x_s, cert_obs):
    """ Fill in x0 / x_hat0 defaults (the setpoint) and check e0 >= Vo(x_hat0, x0). """
    cfg.x0 = np.array(x_s, dtype=float) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    cfg.x_hat0 = cfg.x0.copy() if cfg.x_hat0 is None else np.asarray(cfg.x_hat0, dtype=float)
    for name in ('x0', 'x_hat0'):
        if getattr(cfg, name).shape != (model.n_x,):
            raise ConfigError('initial.{} needs {} entries, got {}'.format(name, model.n_x, getattr(cfg, name).size))
    initial_error = cert_obs.Vo.value(cfg.x_hat0, cfg.x0)
    if initial_error > cfg.e0 * (1.0 + 1e-9) + 1e-12:
        raise ConfigError('initial.e0 = {} is below Vo(x_hat0, x0) = {}'.format(cfg.e0, initial_error))


def verify_certificates(context: SimContext, samples: int = VERIFY_SAMPLES, seed: int = 0,
                        max_workers: int = 1) -> List[FalsificationReport]:
    """ Sampled falsification of the IOSS, CLF and observer certificates of the context. """
    sampler = Sampler(count=samples, seed=seed, max_workers=max_workers)
    model, constraints, bundle = context.model, context.constraints, context.bundle
    reports = [verify_ioss_decrease(model, bundle.cert_ioss, sampler, constraints),
               verify_iss_clf(model, bundle.cert_iss, sampler, constraints),
               verify_observer(model, context.observer, bundle.cert_obs, sampler, constraints)]
    for report in reports:
        if report.passed:
            LOGGER.info('{!r}'.format(report))
        else:
            LOGGER.warning('{!r}'.format(report))
    return reports


def run_closed_loop(context: SimContext, disturbances: np.ndarray = None, strict: bool = None) -> Trace:
    """
    Simulate cfg.steps steps of the loop: estimate, solve, apply, advance.

    :param disturbances: (T, n_w) array; drawn with gen_disturbance from the seed when omitted
    :param strict: verify the certificates by sampling first (default: cfg.strict)
    :raises: InitialInfeasibility if the first MPC problem has no feasible point
    :raises: CertificateCheckFailed in strict mode
    """
    cfg = context.config
    model, setup, cert_obs = context.model, context.setup, context.cert_obs
    T = cfg.steps
    if strict is None:
        strict = cfg.strict
    if strict:
        reports = verify_certificates(context, seed=context.seed, max_workers=context.max_workers)
        if not all(r.passed for r in reports):
            raise CertificateCheckFailed(reports)
    W = gen_disturbance(context.seed, context.w_bar, T, model.n_w, cfg.outliers) \
        if disturbances is None else np.asarray(disturbances, dtype=float)
    if W.shape != (T, model.n_w):
        raise ContractViolation('Disturbances must have shape {}, got {}'.format((T, model.n_w), W.shape))

    registry.load_plugins()
    estimator = registry.lookup(registry.ESTIMATORS, cfg.estimator)(context)
    controller = registry.lookup(registry.CONTROLLERS, cfg.controller)(context)
    st = EstimatorState(x_hat=cfg.x_hat0, e_bar=cfg.e0, capacity=max(estimator.capacity, controller.capacity))
    estimator.prepare(st)

    trace = Trace(label='{}/{}/{}/seed={}'.format(cfg.model, cfg.estimator, cfg.controller, context.seed),
                  parameters=dict(cfg.as_dict(), model_parameters=model.parameters,
                                  stage_bound=setup.stage_cost_bound(), e_max=setup.rpi.e_max,
                                  s_max=setup.rpi.s_max))
    x = np.asarray(cfg.x0, dtype=float)
    u_prev = y_prev = None
    w_hat_peak = 0.0
    for t in range(T):
        started = time.monotonic()
        solution, st = controller.step(estimator, st, u_prev, y_prev,
                                       on_event=functools.partial(trace.log_event, t))
        elapsed = time.monotonic() - started
        if not solution.feasible:
            if t == 0:
                raise InitialInfeasibility('MPC problem infeasible at t=0 (violation {:.3g})'
                                           .format(solution.violation))
            LOGGER.warning('t={}: MPC solve infeasible (violation {:.3g})'.format(t, solution.violation))
        if st.history:
            w_hat_peak = max(w_hat_peak, st.newest().w_hat_norm)

        u = solution.applied_input(setup.cert_iss, st.x_hat)
        trace.log_event(t, 'apply')
        y = model_output(model, x, u, W[t])
        trace.append(TraceRow(t=t, x=x, x_hat=st.x_hat, u=u, y=y, e_bar=st.e_bar,
                              true_error=cert_obs.Vo.value(st.x_hat, x), s0=solution.s_bar[0],
                              e0=solution.e_bar[0], cost=solution.cost, status=solution.status, branch=st.branch,
                              margin=context.constraints.margin(x, u), estimator_time=controller.estimator_time,
                              controller_time=elapsed - controller.estimator_time,
                              extra=dict(stage_cost=setup.cost(solution.x_bar[0], solution.u_bar[0],
                                                               solution.e_bar[0], solution.s_bar[0]))))
        x = model_step(model, x, u, W[t])
        trace.log_event(t, 'advance')
        u_prev, y_prev = u, y
        LOGGER.debug('t={} e_bar={:.4g} true={:.4g} status={} branch={}'
                     .format(t, st.e_bar, trace.rows[-1].true_error, solution.status, st.branch))

    if cfg.outliers:
        _add_outlier_bound(trace, W, context, w_hat_peak)
    return trace


def _add_outlier_bound(trace: Trace, W: np.ndarray, context: SimContext, w_hat_peak: float):
    """ Inflated bound for the injected outliers, as an extra column. """
    bounds = outlier_inflation(trace.column('e_bar'), np.linalg.norm(W, axis=1), context.w_bar,
                               context.cert_ioss, context.cert_obs, context.w_bar + w_hat_peak)
    for row, bound in zip(trace.rows, bounds):
        row.extra['outlier_bound'] = bound


def compute_metrics(trace: Trace) -> Dict[str, object]:
    """ Soundness flags and averages of one run. """
    rows = trace.rows
    if not rows:
        raise ContractViolation('Empty trace')
    e_bar = trace.column('e_bar')
    true_error = trace.column('true_error')
    margins = trace.column('margin')
    statuses = [row.status for row in rows]
    window = min(PERFORMANCE_WINDOW, len(rows))
    stage_cost = trace.column('stage_cost')[-window:]
    stage_bound = trace.parameters.get('stage_bound', math.nan)
    mean_stage_cost = float(np.mean(stage_cost))
    violations = [row.t for row in rows if not row.bound_holds]
    summary = dict(
        label=trace.label,
        seed=trace.parameters.get('seed', 0),
        steps=len(rows),
        bound_valid=not violations,
        bound_violations=len(violations),
        first_violation=violations[0] if violations else -1,
        mean_e_bar=float(np.mean(e_bar)),
        mean_true_error=float(np.mean(true_error)),
        min_margin=float(np.min(margins)),
        constraints_ok=bool(np.all(margins >= -1e-9)),
        infeasible_steps=statuses.count('infeasible'),
        candidate_steps=statuses.count('candidate-accepted'),
        mean_stage_cost=mean_stage_cost,
        stage_bound=stage_bound,
        performance_ok=bool(mean_stage_cost <= stage_bound + PERFORMANCE_SLACK),
        mean_estimator_time=float(np.mean(trace.column('estimator_time'))),
        mean_controller_time=float(np.mean(trace.column('controller_time'))),
    )
    summary['sound'] = summary['bound_valid'] and summary['constraints_ok'] and not summary['infeasible_steps']
    return summary


def compare_traces(traces: Dict[str, Trace], reference: str) -> Dict[str, Dict[str, float]]:
    """
    Ratios of each run's averages to those of the reference run.

    :returns: label -> dict(e_bar_ratio, true_error_ratio, estimator_time_ratio)
    """
    base = compute_metrics(traces[reference])
    result = {}
    for label, trace in traces.items():
        metrics = compute_metrics(trace)
        result[label] = dict(
            e_bar_ratio=_ratio(metrics['mean_e_bar'], base['mean_e_bar']),
            true_error_ratio=_ratio(metrics['mean_true_error'], base['mean_true_error']),
            estimator_time_ratio=_ratio(metrics['mean_estimator_time'], base['mean_estimator_time']))
    return result


def _ratio(value: float, base: float) -> float:
    if base == 0:
        return 1.0 if value == 0 else math.inf
    return value / base


def run_sweep(context: SimContext, seeds: Sequence[int], max_workers: int = None,
              trace_pattern: Optional[str] = None) -> List[Dict[str, object]]:
    """
    One closed loop per seed, in worker threads, sharing the assembled problem.

    :param trace_pattern: path with a "{seed}" field; each trace is written there when given
    :returns: metric dicts in seed order
    """
    registry.load_plugins()

    def run_one(seed: int) -> Dict[str, object]:
        local = copy.copy(context)
        local.seed = seed
        local.config = context.config.copy(seed=seed)
        trace = run_closed_loop(local)
        if trace_pattern:
            trace.to_csv(trace_pattern.format(seed=seed), timing=False)
        summary = compute_metrics(trace)
        LOGGER.info('seed {}: sound={} mean e_bar={:.4g} mean true={:.4g}'
                    .format(seed, summary['sound'], summary['mean_e_bar'], summary['mean_true_error']))
        return summary

    workers = context.max_workers if max_workers is None else max_workers
    return process_items(seeds, run_one, max_workers=workers)
