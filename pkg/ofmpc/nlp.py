"""
A small dense nonlinear program solver.

Sequential quadratic programming with a damped BFGS Hessian (or a caller
supplied Gauss-Newton matrix), elastic QP subproblems solved by quadprog,
and an l1 exact-penalty line search. The returned point never has a larger
penalty merit than the initial point, so callers can always pass a known
good candidate as the init.

Gradients are optional everywhere; central finite differences fill in.
"""
import csv
import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import quadprog

from .core import ContractViolation, EvaluationError, OfmpcError, as_vector, numeric_jacobian
from .parallel import process_items

LOGGER = logging.getLogger('ofmpc.nlp')


class Status:
    """ Solver status namespace """
    converged = 'converged'
    stalled = 'stalled'
    """ the line search found no decrease at a feasible, non-stationary point """
    iteration_limit = 'iteration-limit'
    infeasible = 'infeasible'


VectorCallback = Callable[[np.ndarray], np.ndarray]
ConstraintSpec = Union[None, VectorCallback, Sequence[Callable[[np.ndarray], float]]]


class NlpProblem(object):
    """
    minimize (or maximize) objective(v) subject to

        eq_constraints(v) == 0
        ineq_constraints(v) <= 0
        lower <= v <= upper

    Constraints are either one callable returning a vector or a list of
    scalar callables. hessian, when given, approximates the Hessian of the
    objective in minimization form and replaces the BFGS matrix.
    """

    def __init__(self, n_vars: int, objective: Callable[[np.ndarray], float], *,
                 gradient: VectorCallback = None,
                 eq_constraints: ConstraintSpec = None, eq_jacobian: Callable = None,
                 ineq_constraints: ConstraintSpec = None, ineq_jacobian: Callable = None,
                 bounds: Tuple = None, sense: str = 'min', hessian: Callable = None, name: str = 'nlp'):
        if sense not in ('min', 'max'):
            raise ContractViolation('sense must be "min" or "max", got {!r}'.format(sense))
        self.n_vars = int(n_vars)
        self.objective = objective
        self.gradient = gradient
        self.eq_constraints = _vector_callback(eq_constraints)
        self.eq_jacobian = eq_jacobian
        self.ineq_constraints = _vector_callback(ineq_constraints)
        self.ineq_jacobian = ineq_jacobian
        if bounds is None:
            lower, upper = np.full(self.n_vars, -np.inf), np.full(self.n_vars, np.inf)
        else:
            lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), (self.n_vars,)).copy()
            upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), (self.n_vars,)).copy()
        if np.any(lower > upper):
            raise ContractViolation('Empty variable box')
        self.bounds = (lower, upper)
        self.sense = sense
        self.hessian = hessian
        self.name = name

    @property
    def sign(self) -> float:
        return 1.0 if self.sense == 'min' else -1.0

    def __repr__(self):
        return 'NlpProblem({!r}, n_vars={}, sense={!r})'.format(self.name, self.n_vars, self.sense)


def _vector_callback(spec: ConstraintSpec) -> Optional[VectorCallback]:
    if spec is None:
        return None
    if callable(spec):
        return lambda v: np.atleast_1d(np.asarray(spec(v), dtype=float)).reshape(-1)
    functions = list(spec)
    if not functions:
        return None
    return lambda v: np.array([float(fn(v)) for fn in functions])


class NlpSolution(object):
    """ Result of solve / solve_multistart; violations are re-evaluated at vars. """

    def __init__(self, *, vars: np.ndarray, objective_value: float, max_eq_violation: float,
                 max_ineq_violation: float, status: str, iterations: int = 0, penalty: float = 0.0,
                 merit: float = 0.0, init_merit: float = 0.0, start_index: int = 0):
        self.vars = vars
        self.objective_value = objective_value
        self.max_eq_violation = max_eq_violation
        self.max_ineq_violation = max_ineq_violation
        self.status = status
        self.iterations = iterations
        self.penalty = penalty
        """ final penalty parameter of the l1 merit """
        self.merit = merit
        self.init_merit = init_merit
        """ merit of the initial point at the final penalty """
        self.start_index = start_index

    @property
    def max_violation(self) -> float:
        return max(self.max_eq_violation, self.max_ineq_violation)

    def is_feasible(self, tol: float) -> bool:
        return self.max_violation <= tol

    def __repr__(self):
        return 'NlpSolution(status={!r}, objective={:.6g}, violation={:.2g}, iterations={}, start={})'.format(
            self.status, self.objective_value, self.max_violation, self.iterations, self.start_index)


class SolverOptions(object):
    """ SQP tuning knobs; defaults suit problems with up to a few hundred variables. """

    def __init__(self, *, max_iters: int = 100, tol: float = 1e-8, feas_tol: float = 1e-6,
                 penalty: float = 10.0, penalty_growth: float = 10.0, max_penalty: float = 1e10,
                 armijo: float = 1e-4, min_step: float = 1e-10, fd_step: float = 1e-6,
                 slack_regularization: float = 1e-8, hessian_floor: float = 1e-8,
                 trace_path: str = None, max_workers: int = 1):
        self.max_iters = int(max_iters)
        self.tol = tol
        self.feas_tol = feas_tol
        self.penalty = penalty
        self.penalty_growth = penalty_growth
        self.max_penalty = max_penalty
        self.armijo = armijo
        self.min_step = min_step
        self.fd_step = fd_step
        self.slack_regularization = slack_regularization
        self.hessian_floor = hessian_floor
        self.trace_path = trace_path
        """ write a CSV of (iteration, merit, step norm, ...) here when set """
        self.max_workers = max_workers
        """ worker threads for multistart """

    def copy(self, **changes) -> 'SolverOptions':
        data = dict(self.__dict__)
        data.update(changes)
        return SolverOptions(**data)


class _QpFailure(Exception):
    pass


class _Point(object):
    __slots__ = ('x', 'f', 'g', 'ce', 'Je', 'ci', 'Ji')

    def __init__(self, x, f, g, ce, Je, ci, Ji):
        self.x, self.f, self.g, self.ce, self.Je, self.ci, self.Ji = x, f, g, ce, Je, ci, Ji

    @property
    def eq_violation(self) -> float:
        return float(np.max(np.abs(self.ce))) if self.ce.size else 0.0

    @property
    def ineq_violation(self) -> float:
        return float(max(np.max(self.ci), 0.0)) if self.ci.size else 0.0

    @property
    def l1_violation(self) -> float:
        return float(np.sum(np.abs(self.ce)) + np.sum(np.maximum(self.ci, 0.0)))


class _Evaluator(object):
    """ Evaluates all callbacks at a point in minimization form, with finite-difference fallbacks. """

    def __init__(self, problem: NlpProblem, fd_step: float):
        self.problem = problem
        self.fd_step = fd_step

    def _objective(self, x):
        return self.problem.sign * float(self.problem.objective(x))

    def __call__(self, x: np.ndarray) -> _Point:
        p = self.problem
        f = self._objective(x)
        if p.gradient is not None:
            g = p.sign * np.asarray(p.gradient(x), dtype=float).reshape(p.n_vars)
        else:
            g = numeric_jacobian(self._objective, x, self.fd_step).reshape(p.n_vars)
        ce, Je = self._constraint(p.eq_constraints, p.eq_jacobian, x)
        ci, Ji = self._constraint(p.ineq_constraints, p.ineq_jacobian, x)
        for name, value in (('objective', f), ('gradient', g), ('equality', ce), ('inequality', ci),
                            ('equality jacobian', Je), ('inequality jacobian', Ji)):
            if not np.all(np.isfinite(value)):
                raise EvaluationError('Non-finite {} in {!r} at {}'.format(name, p, x))
        return _Point(x, f, g, ce, Je, ci, Ji)

    def _constraint(self, fn, jac, x):
        n = self.problem.n_vars
        if fn is None:
            return np.zeros(0), np.zeros((0, n))
        values = fn(x)
        if jac is not None:
            J = np.asarray(jac(x), dtype=float).reshape(values.size, n)
        else:
            J = numeric_jacobian(fn, x, self.fd_step).reshape(values.size, n)
        return values, J


def _make_positive_definite(B: np.ndarray, floor: float) -> np.ndarray:
    B = 0.5 * (B + B.T)
    eigenvalues, vectors = np.linalg.eigh(B)
    if eigenvalues[0] >= floor:
        return B
    eigenvalues = np.maximum(eigenvalues, floor)
    return (vectors * eigenvalues) @ vectors.T


def _qp_step(B: np.ndarray, point: _Point, lower: np.ndarray, upper: np.ndarray, mu: float,
             opts: SolverOptions) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Elastic QP: min 1/2 d'Bd + g'd + mu sum(t) subject to linearized constraints relaxed by t >= 0.

    :returns: step d, slacks t, equality and inequality multipliers
    """
    n = point.x.size
    m_e, m_i = point.ce.size, point.ci.size
    m = m_e + m_i
    G = np.zeros((n + m, n + m))
    G[:n, :n] = B
    G[n:, n:] = opts.slack_regularization * np.eye(m)
    a = np.concatenate([-point.g, -mu * np.ones(m)])

    columns, rhs = [], []
    for i in range(m_e):
        for sign in (-1.0, 1.0):
            col = np.zeros(n + m)
            col[:n] = sign * point.Je[i]
            col[n + i] = 1.0
            columns.append(col)
            rhs.append(-sign * point.ce[i])
    for i in range(m_i):
        col = np.zeros(n + m)
        col[:n] = -point.Ji[i]
        col[n + m_e + i] = 1.0
        columns.append(col)
        rhs.append(point.ci[i])
    for i in range(m):
        col = np.zeros(n + m)
        col[n + i] = 1.0
        columns.append(col)
        rhs.append(0.0)
    for j in range(n):
        if np.isfinite(lower[j]):
            col = np.zeros(n + m)
            col[j] = 1.0
            columns.append(col)
            rhs.append(lower[j] - point.x[j])
        if np.isfinite(upper[j]):
            col = np.zeros(n + m)
            col[j] = -1.0
            columns.append(col)
            rhs.append(point.x[j] - upper[j])

    if columns:
        C = np.array(columns).T
        b = np.array(rhs)
        z, _, _, _, multipliers, _ = quadprog.solve_qp(G, a, C, b, 0)
    else:
        z = np.linalg.solve(G, a)
        multipliers = np.zeros(0)
    d = z[:n]
    t = np.maximum(z[n:], 0.0)
    lam_e = np.array([multipliers[2 * i] - multipliers[2 * i + 1] for i in range(m_e)])
    lam_i = multipliers[2 * m_e:2 * m_e + m_i].copy() if m_i else np.zeros(0)
    return d, t, lam_e, lam_i


def _lagrangian_gradient(point: _Point, lam_e: np.ndarray, lam_i: np.ndarray) -> np.ndarray:
    grad = point.g.copy()
    if lam_e.size:
        grad += point.Je.T @ lam_e
    if lam_i.size:
        grad += point.Ji.T @ lam_i
    return grad


def _damped_bfgs(B: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-16:
        return B
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = float(s @ y)
    return B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy


def _second_order_correction(point: _Point, trial: _Point) -> Optional[np.ndarray]:
    """ Least-norm step that removes the equality residual at the trial point. """
    if not trial.ce.size:
        return None
    J = point.Je
    gram = J @ J.T + 1e-12 * np.eye(J.shape[0])
    try:
        return -J.T @ np.linalg.solve(gram, trial.ce)
    except np.linalg.LinAlgError:
        return None


class _TraceWriter(object):
    """ Optional CSV trace of the iterations. """
    header = ['iteration', 'merit', 'step_norm', 'penalty', 'violation', 'objective', 'step_length']

    def __init__(self, path: Optional[str]):
        self._file = open(path, 'w', newline='') if path else None
        self._writer = csv.writer(self._file) if self._file else None
        if self._writer:
            self._writer.writerow(self.header)

    def row(self, *values):
        if self._writer:
            self._writer.writerow(['{:.12g}'.format(v) if isinstance(v, float) else v for v in values])

    def close(self):
        if self._file:
            self._file.close()


def _merit(point: _Point, mu: float) -> float:
    return point.f + mu * point.l1_violation


def solve(problem: NlpProblem, init, opts: SolverOptions = None) -> NlpSolution:
    """
    Run SQP from init.

    :raises: ContractViolation if init lies outside the variable box
    :raises: EvaluationError on non-finite callback values
    """
    opts = opts or SolverOptions()
    lower, upper = problem.bounds
    x = as_vector(init, problem.n_vars, 'init')
    if np.any(x < lower - 1e-12) or np.any(x > upper + 1e-12):
        raise ContractViolation('Initial point lies outside the variable box of {!r}'.format(problem))
    x = np.clip(x, lower, upper)
    evaluate = _Evaluator(problem, opts.fd_step)
    point = evaluate(x)
    init_point = point
    iterates = [point]
    mu = opts.penalty
    B = np.eye(problem.n_vars)
    status = Status.iteration_limit
    trace = _TraceWriter(opts.trace_path)
    scale = lambda v: 1.0 + float(np.max(np.abs(v)))  # noqa: E731
    iteration = 0
    try:
        trace.row(0, _merit(point, mu), 0.0, mu, point.l1_violation, point.f, 0.0)
        for iteration in range(1, opts.max_iters + 1):
            if problem.hessian is not None:
                B = problem.sign * np.asarray(problem.hessian(point.x), dtype=float)
            B = _make_positive_definite(B, opts.hessian_floor)

            # raise the penalty until the QP predicts enough progress towards feasibility
            viol = point.l1_violation
            while True:
                try:
                    d, t, lam_e, lam_i = _qp_step(B, point, lower, upper, mu, opts)
                except ValueError as e:
                    raise _QpFailure(str(e))
                predicted = float(np.sum(t))
                if viol <= opts.feas_tol or predicted <= max(0.1 * viol, opts.feas_tol) \
                        or mu >= opts.max_penalty:
                    break
                mu = min(mu * opts.penalty_growth, opts.max_penalty)
            multiplier_max = float(np.max(np.abs(np.concatenate([lam_e, lam_i])))) if t.size else 0.0
            if multiplier_max * 1.1 > mu:
                mu = min(max(mu * opts.penalty_growth, 2.0 * multiplier_max), opts.max_penalty)

            if np.max(np.abs(d)) <= opts.tol * scale(point.x) and point.l1_violation <= opts.feas_tol:
                status = Status.converged
                break

            merit0 = _merit(point, mu)
            decrease = float(point.g @ d) + mu * (predicted - viol)
            accepted = None
            alpha = 1.0
            while alpha >= opts.min_step:
                trial = evaluate(np.clip(point.x + alpha * d, lower, upper))
                if _accept(_merit(trial, mu), merit0, alpha, decrease, opts):
                    accepted = trial
                    break
                if alpha == 1.0:
                    correction = _second_order_correction(point, trial)
                    if correction is not None:
                        corrected = evaluate(np.clip(point.x + d + correction, lower, upper))
                        if _accept(_merit(corrected, mu), merit0, 1.0, decrease, opts):
                            accepted = corrected
                            break
                alpha *= 0.5

            if accepted is None:
                if point.l1_violation > opts.feas_tol:
                    status = Status.infeasible
                elif -decrease <= opts.tol * max(1.0, abs(merit0)):
                    # nothing left to gain along d at working precision
                    status = Status.converged
                else:
                    status = Status.stalled
                LOGGER.debug('{!r}: line search stalled at iteration {} ({})'.format(problem, iteration, status))
                break

            step = accepted.x - point.x
            if problem.hessian is None:
                B = _damped_bfgs(B, step, _lagrangian_gradient(accepted, lam_e, lam_i)
                                 - _lagrangian_gradient(point, lam_e, lam_i))
            point = accepted
            iterates.append(point)
            step_norm = float(np.max(np.abs(step)))
            trace.row(iteration, _merit(point, mu), step_norm, mu, point.l1_violation, point.f, alpha)
            LOGGER.debug('{!r}: iteration {} merit {:.10g} step {:.3g} penalty {:.3g}'
                         .format(problem, iteration, _merit(point, mu), step_norm, mu))
            if step_norm <= opts.tol * scale(point.x) and point.l1_violation <= opts.feas_tol:
                status = Status.converged
                break
    except _QpFailure as e:
        LOGGER.debug('{!r}: QP subproblem failed at iteration {}: {}'.format(problem, iteration, e))
        status = Status.iteration_limit if point.l1_violation <= opts.feas_tol else Status.infeasible
    finally:
        trace.close()

    # best iterate under the final penalty; the last one unless the penalty moved
    best_index = min(range(len(iterates)), key=lambda i: (_merit(iterates[i], mu), -i))
    best = iterates[best_index]
    if best is not iterates[-1]:
        status = Status.iteration_limit if best.l1_violation <= opts.feas_tol else Status.infeasible
    if status in (Status.converged, Status.stalled) and max(best.eq_violation, best.ineq_violation) > opts.feas_tol:
        status = Status.infeasible
    return NlpSolution(vars=best.x.copy(), objective_value=problem.sign * best.f,
                       max_eq_violation=best.eq_violation, max_ineq_violation=best.ineq_violation,
                       status=status, iterations=iteration, penalty=mu, merit=_merit(best, mu),
                       init_merit=_merit(init_point, mu))


def _accept(merit: float, merit0: float, alpha: float, decrease: float, opts: SolverOptions) -> bool:
    if decrease < 0:
        return merit <= merit0 + opts.armijo * alpha * decrease
    return merit < merit0 - 1e-14 * max(1.0, abs(merit0))


def solve_multistart(problem: NlpProblem, inits: Sequence, opts: SolverOptions = None) -> NlpSolution:
    """
    Solve from every init and keep the best.

    Feasible solutions beat infeasible ones; among feasible ones the best
    objective wins, ties broken by start index. Among infeasible ones the
    smallest violation wins.

    :raises: ContractViolation on an empty init list
    """
    inits = list(inits)
    if not inits:
        raise ContractViolation('solve_multistart needs at least one init')
    opts = opts or SolverOptions()
    solutions = process_items(list(enumerate(inits)), lambda item: _solve_indexed(problem, item, opts),
                              max_workers=opts.max_workers)

    def key(solution: NlpSolution):
        feasible = solution.is_feasible(opts.feas_tol)
        if feasible:
            return 0, problem.sign * solution.objective_value, solution.start_index
        return 1, solution.max_violation, solution.start_index

    best = min(solutions, key=key)
    if not best.is_feasible(opts.feas_tol):
        best.status = Status.infeasible
    LOGGER.debug('{!r}: best of {} starts is {!r}'.format(problem, len(inits), best))
    return best


def _solve_indexed(problem: NlpProblem, item, opts: SolverOptions) -> NlpSolution:
    index, init = item
    try:
        solution = solve(problem, init, opts)
    except OfmpcError as e:
        LOGGER.debug('{!r}: start {} failed: {}'.format(problem, index, e))
        return NlpSolution(vars=np.asarray(init, dtype=float), objective_value=math.nan,
                           max_eq_violation=math.inf, max_ineq_violation=math.inf,
                           status=Status.infeasible, start_index=index)
    solution.start_index = index
    return solution


# gradient self-check

class GradientReport(object):
    """ Worst relative error of supplied derivatives against central differences. """

    def __init__(self, objective_error: float, eq_error: float, ineq_error: float, n_points: int):
        self.objective_error = objective_error
        self.eq_error = eq_error
        self.ineq_error = ineq_error
        self.n_points = n_points

    @property
    def worst(self) -> float:
        return max(self.objective_error, self.eq_error, self.ineq_error)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol

    def __repr__(self):
        return 'GradientReport(objective={:.2g}, eq={:.2g}, ineq={:.2g}, points={})'.format(
            self.objective_error, self.eq_error, self.ineq_error, self.n_points)


def _relative_error(supplied: np.ndarray, reference: np.ndarray) -> float:
    if reference.size == 0:
        return 0.0
    return float(np.max(np.abs(supplied - reference)) / max(1.0, float(np.max(np.abs(reference)))))


def check_gradients(problem: NlpProblem, points: Sequence, fd_step: float = 1e-6) -> GradientReport:
    """ Compare analytic derivatives (where supplied) with central finite differences. """
    errors = [0.0, 0.0, 0.0]
    points = list(points)
    for v in points:
        v = as_vector(v, problem.n_vars, 'point')
        if problem.gradient is not None:
            fd = numeric_jacobian(lambda z: float(problem.objective(z)), v, fd_step).reshape(-1)
            errors[0] = max(errors[0], _relative_error(np.asarray(problem.gradient(v), dtype=float), fd))
        for index, fn, jac in ((1, problem.eq_constraints, problem.eq_jacobian),
                               (2, problem.ineq_constraints, problem.ineq_jacobian)):
            if fn is None or jac is None:
                continue
            fd = numeric_jacobian(fn, v, fd_step)
            supplied = np.asarray(jac(v), dtype=float).reshape(fd.shape)
            errors[index] = max(errors[index], _relative_error(supplied, fd))
    return GradientReport(errors[0], errors[1], errors[2], len(points))
