"""
Plant models, constraint sets, and class-K gain objects.

Everything else in ofmpc is built on these three types:

    * PlantModel - nominal dynamics plus affine disturbance channels
      x+ = f(x, u) + E_x w,  y = h(x, u) + E_y w
    * Gain - a class-K function written as a sum of power laws c * r**p
    * ConstraintSet - scalar constraints g_i(x, u) <= 0 with tightening gains

All three are immutable after construction and safe to share across threads.
"""
import logging
import math
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

LOGGER = logging.getLogger('ofmpc.core')

DEFAULT_FD_STEP = 1e-6


class OfmpcError(Exception):
    """ Base class for all custom exceptions defined in ofmpc. """
    pass


class ContractViolation(OfmpcError, ValueError):
    """ Raised when a caller breaks a precondition (dimensions, signs, empty history). """
    pass


class UnsupportedCertificate(OfmpcError):
    """ Raised when a certificate needs an operation that is only implemented for special gains. """
    pass


class ModelRejected(OfmpcError):
    """ Raised when a model lacks structure an estimator relies on (e.g. full row rank E_x). """
    pass


class EvaluationError(OfmpcError):
    """ Raised when a user callback returns a non-finite value. """
    pass


# gains

class KFunction(object):
    """
    Interface shared by all class-K functions.

    Subclasses implement value(); the combinators fall back to lazily
    composed functions unless a closed form is available.
    """
    superadditive = False

    def value(self, r: float) -> float:
        raise NotImplementedError

    def __call__(self, r: float) -> float:
        return gain_eval(self, r)

    @property
    def is_superadditive(self) -> bool:
        """ value(a + b) >= value(a) + value(b) for all a, b >= 0 """
        return self.superadditive

    def compose(self, inner: 'KFunction') -> 'KFunction':
        """ self o inner """
        return LazyGain(lambda r: self.value(inner.value(r)),
                        superadditive=self.is_superadditive and inner.is_superadditive,
                        description='({!r} o {!r})'.format(self, inner))

    def scale(self, k: float) -> 'KFunction':
        """ r -> k * self(r) """
        k = _non_negative_scalar(k, 'scale')
        return LazyGain(lambda r: k * self.value(r), superadditive=self.is_superadditive,
                        description='{} * {!r}'.format(k, self))

    def __add__(self, other: 'KFunction') -> 'KFunction':
        if not isinstance(other, KFunction):
            return NotImplemented
        return LazyGain(lambda r: self.value(r) + other.value(r),
                        superadditive=self.is_superadditive and other.is_superadditive,
                        description='{!r} + {!r}'.format(self, other))

    def __mul__(self, k: float) -> 'KFunction':
        return self.scale(k)

    __rmul__ = __mul__

    def maximum(self, other: 'KFunction') -> 'KFunction':
        """ r -> max(self(r), other(r)) """
        return LazyGain(lambda r: max(self.value(r), other.value(r)),
                        superadditive=self.is_superadditive and other.is_superadditive,
                        description='max({!r}, {!r})'.format(self, other))

    def inverse(self) -> 'KFunction':
        raise UnsupportedCertificate('Cannot invert {!r}: only single-term power laws are invertible.'
                                     .format(self))

    def root(self) -> 'KFunction':
        raise UnsupportedCertificate('Cannot take the square root of {!r} in closed form.'.format(self))


class Gain(KFunction):
    """
    A finite sum of power-law terms: value(r) = sum(c_i * r ** p_i).

    Terms with zero coefficient are dropped and equal exponents merged,
    so two Gains with the same value compare equal.
    """

    def __init__(self, terms: Iterable[Tuple[float, float]] = ()):
        merged = {}
        for term in terms:
            try:
                c, p = term
            except (TypeError, ValueError):
                raise ContractViolation('Gain terms must be (coefficient, exponent) pairs, got {!r}'.format(term))
            c, p = float(c), float(p)
            if not math.isfinite(c) or c < 0:
                raise ContractViolation('Gain coefficient must be finite and >= 0, got {}'.format(c))
            if not math.isfinite(p) or p <= 0:
                raise ContractViolation('Gain exponent must be finite and > 0, got {}'.format(p))
            if c:
                merged[p] = merged.get(p, 0.0) + c
        self.terms = tuple(sorted(((c, p) for p, c in merged.items()), key=lambda t: t[1]))
        """:type: tuple[tuple[float, float]] """

    @classmethod
    def zero(cls) -> 'Gain':
        return cls()

    @classmethod
    def linear(cls, c: float) -> 'Gain':
        return cls([(c, 1.0)])

    @classmethod
    def quadratic(cls, c: float) -> 'Gain':
        return cls([(c, 2.0)])

    @classmethod
    def from_list(cls, data: Sequence[Sequence[float]]) -> 'Gain':
        return cls([(c, p) for c, p in data])

    def to_list(self) -> List[List[float]]:
        return [[c, p] for c, p in self.terms]

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def is_superadditive(self) -> bool:
        return all(p >= 1.0 for _, p in self.terms)

    def value(self, r: float) -> float:
        return sum(c * r ** p for c, p in self.terms)

    def scale(self, k: float) -> 'Gain':
        k = _non_negative_scalar(k, 'scale')
        return Gain([(k * c, p) for c, p in self.terms])

    def __add__(self, other):
        if isinstance(other, Gain):
            return Gain(self.terms + other.terms)
        return super().__add__(other)

    def compose(self, inner: KFunction) -> KFunction:
        if not isinstance(inner, Gain):
            return super().compose(inner)
        if self.is_zero or inner.is_zero:
            return Gain()
        if len(inner.terms) == 1:
            a, q = inner.terms[0]
            return Gain([(c * a ** p, p * q) for c, p in self.terms])
        if all(float(p).is_integer() for _, p in self.terms):
            result = Gain()
            for c, p in self.terms:
                result = result + _integer_power(inner, int(p)).scale(c)
            return result
        return super().compose(inner)

    def inverse(self) -> 'Gain':
        """ (r / c) ** (1 / p) for a single term c * r ** p """
        if len(self.terms) != 1:
            return super().inverse()
        c, p = self.terms[0]
        return Gain([(c ** (-1.0 / p), 1.0 / p)])

    def root(self) -> 'Gain':
        """ r -> sqrt(self(r)), closed form for zero and single-term gains """
        if self.is_zero:
            return Gain()
        if len(self.terms) != 1:
            return super().root()
        c, p = self.terms[0]
        return Gain([(math.sqrt(c), p / 2.0)])

    def shifted_residual(self, bound: float) -> KFunction:
        """
        A majorant s(r) with self(a + r) <= self(a) + s(r) for all a in [0, bound].

        Terms with p >= 1 contribute c*((bound + r)**p - bound**p), terms with
        p < 1 are subadditive and contribute c*r**p unchanged.
        """
        bound = _non_negative_scalar(bound, 'bound')
        terms = self.terms

        def residual(r: float) -> float:
            total = 0.0
            for c, p in terms:
                if p >= 1.0:
                    total += c * ((bound + r) ** p - bound ** p)
                else:
                    total += c * r ** p
            return total

        return LazyGain(residual, superadditive=self.is_superadditive,
                        description='residual({!r}, {})'.format(self, bound))

    def __eq__(self, other):
        if not isinstance(other, Gain):
            return NotImplemented
        return self.terms == other.terms

    def __hash__(self):
        return hash(self.terms)

    def __repr__(self):
        return 'Gain({!r})'.format(list(self.terms))


class LazyGain(KFunction):
    """ A class-K function given by a callable; used when no closed form exists. """

    def __init__(self, fn: Callable[[float], float], superadditive: bool = False, description: str = ''):
        self._fn = fn
        self.superadditive = bool(superadditive)
        self.description = description or getattr(fn, '__name__', 'lazy')

    def value(self, r: float) -> float:
        return float(self._fn(r))

    def __repr__(self):
        return 'LazyGain({})'.format(self.description)


def _integer_power(gain: Gain, n: int) -> Gain:
    result = gain
    for _ in range(n - 1):
        result = Gain([(c1 * c2, p1 + p2) for c1, p1 in result.terms for c2, p2 in gain.terms])
    return result


def _non_negative_scalar(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise ContractViolation('{} must be finite and >= 0, got {}'.format(name, value))
    return value


def gain_eval(g: KFunction, r: float) -> float:
    """
    Evaluate a class-K function at r >= 0.

    :raises: ContractViolation if r is negative or not finite
    """
    r = float(r)
    if not r >= 0 or not math.isfinite(r):
        raise ContractViolation('Gain argument must be finite and >= 0, got {}'.format(r))
    return float(g.value(r))


def gain_slope(g: KFunction, r: float, step: float = DEFAULT_FD_STEP) -> float:
    """
    Derivative of g at r >= 0; closed form for Gain, one-sided or central differences otherwise.

    Terms with p < 1 have an infinite slope at zero; it is capped at 1/step.
    """
    r = max(float(r), 0.0)
    if isinstance(g, Gain):
        total = 0.0
        for c, p in g.terms:
            if r > 0:
                total += c * p * r ** (p - 1.0)
            elif p == 1.0:
                total += c
            elif p < 1.0:
                total += c / step
        return total
    h = step * max(1.0, r)
    if r < h:
        return (g.value(r + h) - g.value(r)) / h
    return (g.value(r + h) - g.value(r - h)) / (2.0 * h)


# numerics shared by models, constraints and the solver

def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                     step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """ Central finite-difference Jacobian of a vector (or scalar) function. """
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=float))
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.atleast_1d(fn(xp)) - np.atleast_1d(fn(xm))) / (2.0 * h)
    return jac


def as_vector(value, size: int, name: str) -> np.ndarray:
    """ Convert to a float vector of the given size, or raise ContractViolation. """
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size != size:
        raise ContractViolation('{} has dimension {}, expected {}'.format(name, arr.size, size))
    return arr


def as_matrix(value, shape: Tuple[int, int], name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.size == 0 and 0 in shape:
        return np.zeros(shape)
    arr = np.atleast_2d(arr)
    if arr.shape != tuple(shape):
        raise ContractViolation('{} has shape {}, expected {}'.format(name, arr.shape, tuple(shape)))
    return arr


def right_inverse(E: np.ndarray) -> np.ndarray:
    """
    Moore-Penrose right inverse E^T (E E^T)^-1.

    :raises: ModelRejected if E does not have full row rank
    """
    E = np.atleast_2d(np.asarray(E, dtype=float))
    if np.linalg.matrix_rank(E) < E.shape[0]:
        raise ModelRejected('Matrix of shape {} does not have full row rank'.format(E.shape))
    return E.T @ np.linalg.inv(E @ E.T)


# plant model

class PlantModel(object):
    """
    Nominal dynamics with affine disturbance and noise channels.

    step_jacobian(x, u) -> (df/dx, df/du) and output_jacobian(x, u) -> (dh/dx, dh/du)
    are optional; central finite differences are used when they are missing.
    """

    def __init__(self, *, n_x: int, n_u: int, n_y: int, n_w: int,
                 step_nominal: Callable, output_nominal: Callable,
                 E_x, E_y, w_bound: float,
                 step_jacobian: Callable = None, output_jacobian: Callable = None,
                 name: str = 'model', parameters: dict = None):
        self.name = name
        self.n_x, self.n_u, self.n_y, self.n_w = int(n_x), int(n_u), int(n_y), int(n_w)
        self.step_nominal = step_nominal
        self.output_nominal = output_nominal
        self.E_x = as_matrix(E_x, (self.n_x, self.n_w), 'E_x')
        self.E_y = as_matrix(E_y, (self.n_y, self.n_w), 'E_y')
        self.w_bound = _non_negative_scalar(w_bound, 'w_bound')
        self._step_jacobian = step_jacobian
        self._output_jacobian = output_jacobian
        self.parameters = dict(parameters or {})
        """ model parameters, echoed into traces """
        self._E_x_pinv = None

    def __repr__(self):
        return 'PlantModel({!r}, n_x={}, n_u={}, n_y={}, n_w={}, w_bound={})'.format(
            self.name, self.n_x, self.n_u, self.n_y, self.n_w, self.w_bound)

    @property
    def E_x_pinv(self) -> np.ndarray:
        """
        Right inverse of E_x.

        :raises: ModelRejected if E_x does not have full row rank
        """
        if self._E_x_pinv is None:
            self._E_x_pinv = right_inverse(self.E_x)
        return self._E_x_pinv

    def with_w_bound(self, w_bound: float) -> 'PlantModel':
        """ Copy of this model with another disturbance bound. """
        return PlantModel(n_x=self.n_x, n_u=self.n_u, n_y=self.n_y, n_w=self.n_w,
                          step_nominal=self.step_nominal, output_nominal=self.output_nominal,
                          E_x=self.E_x, E_y=self.E_y, w_bound=w_bound,
                          step_jacobian=self._step_jacobian, output_jacobian=self._output_jacobian,
                          name=self.name, parameters=self.parameters)

    def f(self, x, u) -> np.ndarray:
        return np.asarray(self.step_nominal(x, u), dtype=float).reshape(self.n_x)

    def h(self, x, u) -> np.ndarray:
        return np.asarray(self.output_nominal(x, u), dtype=float).reshape(self.n_y)

    def step_jacobian(self, x, u) -> Tuple[np.ndarray, np.ndarray]:
        """ (df/dx, df/du) at (x, u) """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self._step_jacobian is not None:
            A, B = self._step_jacobian(x, u)
            return np.atleast_2d(A), np.asarray(B, dtype=float).reshape(self.n_x, self.n_u)
        A = numeric_jacobian(lambda z: self.f(z, u), x)
        B = numeric_jacobian(lambda v: self.f(x, v), u) if self.n_u else np.zeros((self.n_x, 0))
        return A, B

    def output_jacobian(self, x, u) -> Tuple[np.ndarray, np.ndarray]:
        """ (dh/dx, dh/du) at (x, u) """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self._output_jacobian is not None:
            C, D = self._output_jacobian(x, u)
            return np.atleast_2d(C), np.asarray(D, dtype=float).reshape(self.n_y, self.n_u)
        C = numeric_jacobian(lambda z: self.h(z, u), x)
        D = numeric_jacobian(lambda v: self.h(x, v), u) if self.n_u else np.zeros((self.n_y, 0))
        return C, D

    def check(self, x, u, w=None) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        """ Validate dimensions, returning float arrays. """
        x = as_vector(x, self.n_x, 'x')
        u = as_vector(u, self.n_u, 'u')
        if w is not None:
            w = as_vector(w, self.n_w, 'w')
        return x, u, w


def model_step(model: PlantModel, x, u, w) -> np.ndarray:
    """
    Perturbed dynamics: f(x, u) + E_x w

    :raises: ContractViolation on dimension mismatch
    """
    x, u, w = model.check(x, u, w)
    return model.f(x, u) + model.E_x @ w


def model_output(model: PlantModel, x, u, w) -> np.ndarray:
    """
    Noisy measurement: h(x, u) + E_y w

    :raises: ContractViolation on dimension mismatch
    """
    x, u, w = model.check(x, u, w)
    return model.h(x, u) + model.E_y @ w


# constraints

class ConstraintSet(object):
    """
    Scalar constraints g_i(x, u) <= 0 with tightening gains.

    tightening_s[i] bounds the constraint change inside a tube of scaling s,
    tightening_o[i] bounds it for an estimation error radius e. The tube
    gains must be superadditive.

    x_box / u_box are (lower, upper) arrays used for sampling; they may hold infinities.
    """

    def __init__(self, g: Sequence[Callable], tightening_s: Sequence[KFunction] = None,
                 tightening_o: Sequence[KFunction] = None, *,
                 jacobians: Sequence[Callable] = None, n_x: int = None, n_u: int = None,
                 x_box: Tuple = None, u_box: Tuple = None, names: Sequence[str] = None,
                 linear_rows: Tuple[np.ndarray, np.ndarray, np.ndarray] = None):
        self.g = list(g)
        r = len(self.g)
        self.tightening_s = list(tightening_s) if tightening_s is not None else [Gain()] * r
        self.tightening_o = list(tightening_o) if tightening_o is not None else [Gain()] * r
        if len(self.tightening_s) != r or len(self.tightening_o) != r:
            raise ContractViolation('Expected {} tightening gains, got {} and {}'
                                    .format(r, len(self.tightening_s), len(self.tightening_o)))
        for i, gain in enumerate(self.tightening_s):
            if not gain.is_superadditive:
                raise ContractViolation('Tube tightening gain {} is not superadditive: {!r}'.format(i, gain))
        self.jacobians = list(jacobians) if jacobians is not None else None
        self.n_x = n_x
        self.n_u = n_u
        self.x_box = _box(x_box, n_x)
        self.u_box = _box(u_box, n_u)
        self.names = list(names) if names is not None else ['g{}'.format(i) for i in range(r)]
        self.linear_rows = linear_rows
        """ (G_x, G_u, b) when every constraint is G_x x + G_u u - b """

    @classmethod
    def linear(cls, G_x, G_u, b, *, names: Sequence[str] = None, **kwargs) -> 'ConstraintSet':
        """ Constraints G_x x + G_u u - b <= 0, one per row. """
        G_x = np.atleast_2d(np.asarray(G_x, dtype=float))
        G_u = np.atleast_2d(np.asarray(G_u, dtype=float))
        b = np.asarray(b, dtype=float).reshape(-1)
        rows = G_x.shape[0]
        if G_u.shape[0] != rows or b.size != rows:
            raise ContractViolation('Inconsistent constraint rows: {}, {}, {}'.format(G_x.shape, G_u.shape, b.shape))

        def make(i):
            gx, gu, bi = G_x[i].copy(), G_u[i].copy(), b[i]
            return (lambda x, u: float(gx @ x + gu @ u - bi)), (lambda x, u: (gx, gu))

        pairs = [make(i) for i in range(rows)]
        return cls([p[0] for p in pairs], jacobians=[p[1] for p in pairs],
                   n_x=G_x.shape[1], n_u=G_u.shape[1], names=names,
                   linear_rows=(G_x, G_u, b), **kwargs)

    @classmethod
    def box(cls, x_lower, x_upper, u_lower, u_upper, **kwargs) -> 'ConstraintSet':
        """ Linear constraints from (possibly infinite) state and input bounds. """
        x_lower, x_upper = np.asarray(x_lower, dtype=float), np.asarray(x_upper, dtype=float)
        u_lower, u_upper = np.asarray(u_lower, dtype=float), np.asarray(u_upper, dtype=float)
        n_x, n_u = x_lower.size, u_lower.size
        G_x, G_u, b, names = [], [], [], []
        for n, lower, upper, label, is_state in ((n_x, x_lower, x_upper, 'x', True),
                                                  (n_u, u_lower, u_upper, 'u', False)):
            for i in range(n):
                for sign, bound, tag in ((1.0, upper[i], '<='), (-1.0, lower[i], '>=')):
                    if not np.isfinite(bound):
                        continue
                    row_x, row_u = np.zeros(n_x), np.zeros(n_u)
                    (row_x if is_state else row_u)[i] = sign
                    G_x.append(row_x)
                    G_u.append(row_u)
                    b.append(sign * bound)
                    names.append('{}{} {} {:g}'.format(label, i + 1, tag, bound))
        return cls.linear(np.reshape(G_x, (-1, n_x)), np.reshape(G_u, (-1, n_u)), b, names=names,
                          x_box=(x_lower, x_upper), u_box=(u_lower, u_upper), **kwargs)

    @property
    def r(self) -> int:
        return len(self.g)

    def with_tightening(self, tightening_s: Sequence[KFunction],
                        tightening_o: Sequence[KFunction]) -> 'ConstraintSet':
        """ Copy of this set with other tightening gains. """
        return ConstraintSet(self.g, tightening_s, tightening_o, jacobians=self.jacobians,
                             n_x=self.n_x, n_u=self.n_u, x_box=self.x_box, u_box=self.u_box,
                             names=self.names, linear_rows=self.linear_rows)

    def evaluate(self, x, u) -> np.ndarray:
        """ Vector of g_i(x, u); feasible iff every entry <= 0. """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.array([float(gi(x, u)) for gi in self.g])

    def jacobian(self, x, u) -> Tuple[np.ndarray, np.ndarray]:
        """ (dg/dx, dg/du) stacked over all constraints """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.linear_rows is not None:
            return self.linear_rows[0], self.linear_rows[1]
        if self.jacobians is not None:
            pairs = [jac(x, u) for jac in self.jacobians]
            return (np.array([np.reshape(p[0], -1) for p in pairs]).reshape(self.r, x.size),
                    np.array([np.reshape(p[1], -1) for p in pairs]).reshape(self.r, u.size))
        Jx = numeric_jacobian(lambda z: self.evaluate(z, u), x)
        Ju = numeric_jacobian(lambda v: self.evaluate(x, v), u)
        return Jx, Ju

    def tightening(self, s: float, e: float) -> np.ndarray:
        """ sigma_s_i(s) + sigma_o_i(e) for each constraint """
        return np.array([gs(s) + go(e) for gs, go in zip(self.tightening_s, self.tightening_o)])

    def margin(self, x, u) -> float:
        """ -max_i g_i(x, u); negative when violated """
        values = self.evaluate(x, u)
        return float(-values.max()) if values.size else math.inf

    def is_feasible(self, x, u, tol: float = 0.0) -> bool:
        return self.margin(x, u) >= -tol


def _box(box, n: Optional[int]):
    if box is None:
        if n is None:
            return None
        return np.full(n, -np.inf), np.full(n, np.inf)
    lower, upper = box
    return np.asarray(lower, dtype=float).copy(), np.asarray(upper, dtype=float).copy()
