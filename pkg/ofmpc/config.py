"""
Run configuration: flat "key = value" files with dotted keys.

    # comments and blank lines are ignored
    model.name = quadrotor
    model.h = 0.05
    estimator.name = setmember
    controller.N = 20
    initial.x0 = 3.7, 3, 10, 0, 0, 0, 0, 0, 0, 0

Values stay strings until SimConfig coerces them through SCHEMA. Keys
under "model." other than name and w_bar are passed to the model builder.
"model.w_bar = auto" takes disturbance.limit_fraction of the largest bound
at which the setpoint keeps the RPI-tightened constraints.
"""
import logging
import math
from typing import Any, Dict, Iterable, Iterator, List

import numpy as np

from .core import OfmpcError

LOGGER = logging.getLogger('ofmpc.config')

FULL_SCALE = dict(N=40, steps=300)
DESK_SCALE = dict(N=20, steps=150)
AUTO = 'auto'


class ConfigError(OfmpcError, ValueError):
    """ Invalid configuration text or values. """
    pass


def _boolean(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError('expected a boolean, got {!r}'.format(value))


def _vector(value: str) -> np.ndarray:
    return np.array([float(v) for v in value.replace(',', ' ').split()])


def _integers(value: str) -> List[int]:
    return [int(v) for v in value.replace(',', ' ').split()]


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise ValueError('expected an integer >= 1, got {}'.format(number))
    return number


def _non_negative_float(value: str) -> float:
    number = float(value)
    if not number >= 0:
        raise ValueError('expected a number >= 0, got {}'.format(number))
    return number


def _disturbance_bound(value: str):
    if value.strip().lower() == AUTO:
        return AUTO
    return _non_negative_float(value)


def _fraction(value: str) -> float:
    number = float(value)
    if not 0 < number <= 1:
        raise ValueError('expected a number in (0, 1], got {}'.format(number))
    return number


# key -> (attribute, coercion, default)
SCHEMA = {
    'model.name': ('model', str, 'double-integrator'),
    'model.w_bar': ('w_bar', _disturbance_bound, None),
    'estimator.name': ('estimator', str, 'ioss'),
    'estimator.M': ('M', _positive_int, 4),
    'estimator.M_bar': ('M_bar', _positive_int, 5),
    'estimator.starts': ('starts', _positive_int, 8),
    'controller.name': ('controller', str, 'homothetic'),
    'controller.N': ('N', _positive_int, None),
    'controller.terminal': ('terminal', str, 'equality'),
    'controller.terminal_level': ('terminal_level', _non_negative_float, 1.0),
    'controller.mhe_M': ('mhe_M', _positive_int, 10),
    'run.steps': ('steps', _positive_int, None),
    'run.seed': ('seed', int, 0),
    'run.full_scale': ('full_scale', _boolean, False),
    'run.strict': ('strict', _boolean, False),
    'run.workers': ('workers', int, 1),
    'initial.x0': ('x0', _vector, None),
    'initial.x_hat0': ('x_hat0', _vector, None),
    'initial.e0': ('e0', _non_negative_float, 0.0),
    'disturbance.outlier_steps': ('outlier_steps', _integers, ()),
    'disturbance.outlier_factor': ('outlier_factor', _non_negative_float, 10.0),
    'disturbance.limit_fraction': ('limit_fraction', _fraction, 0.5),
    'solver.max_iters': ('max_iters', _positive_int, 100),
    'solver.tol': ('tol', _non_negative_float, 1e-8),
    'solver.feas_tol': ('feas_tol', _non_negative_float, 1e-6),
    'output.trace': ('trace_path', str, None),
    'output.summary': ('summary_path', str, None),
    'output.solver_trace': ('solver_trace', str, None),
}

ESTIMATOR_CHOICES = ('apriori', 'ioss', 'general', 'observability', 'setmember', 'mhe', 'combined')
CONTROLLER_CHOICES = ('homothetic', 'tightened', 'rigid', 'mhe-mpc')
TERMINAL_CHOICES = ('equality', 'set')


def parse_text(text: str, source: str = '<string>') -> Dict[str, str]:
    """
    key = value pairs of a config text.

    :raises: ConfigError on malformed lines or repeated keys
    """
    values = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError('{}:{}: expected "key = value", got {!r}'.format(source, number, line))
        if key in values:
            raise ConfigError('{}:{}: {!r} given twice'.format(source, number, key))
        values[key] = value
    return values


def expand_seed_range(text: str) -> Iterator[int]:
    """
    Seeds from strings such as '3', '3-7' or '1,4-6'.

    :raises: ValueError on malformed ranges
    """
    if not text or not text.strip():
        raise ValueError('seed range is required')
    for part in text.split(','):
        part = part.strip()
        start, sep, end = part.partition('-')
        try:
            first = int(start)
            last = int(end) if sep else first
        except ValueError:
            raise ValueError('Invalid seed range {!r}'.format(part))
        if last < first:
            raise ValueError('Seed range {!r} is decreasing'.format(part))
        yield from range(first, last + 1)


class SimConfig(object):
    """ Settings of one closed-loop run; see SCHEMA for the keys. """

    def __init__(self, values: Dict[str, str] = None, **overrides):
        """
        :param values: raw key/value strings, as from parse_text
        :param overrides: attribute values that replace those from values
        :raises: ConfigError on unknown keys or invalid values
        """
        values = dict(values or {})
        self.model_parameters = {}
        """ extra model builder arguments """
        for key, value in list(values.items()):
            if key.startswith('model.') and key not in SCHEMA:
                try:
                    self.model_parameters[key[len('model.'):]] = float(value)
                except ValueError:
                    raise ConfigError('{}: expected a number, got {!r}'.format(key, value))
                del values[key]
        unknown = sorted(set(values) - set(SCHEMA))
        if unknown:
            raise ConfigError('Unknown configuration keys: {}'.format(', '.join(unknown)))
        for key, (attribute, coerce, default) in SCHEMA.items():
            value = default
            if key in values:
                try:
                    value = coerce(values[key])
                except ValueError as e:
                    raise ConfigError('{}: {}'.format(key, e))
            setattr(self, attribute, value)
        for attribute, value in overrides.items():
            if value is None:
                continue
            if not hasattr(self, attribute):
                raise ConfigError('Unknown configuration attribute {!r}'.format(attribute))
            setattr(self, attribute, value)
        scale = FULL_SCALE if self.full_scale else DESK_SCALE
        if self.N is None:
            self.N = scale['N']
        if self.steps is None:
            self.steps = scale['steps']
        self.validate()

    @classmethod
    def from_text(cls, text: str, source: str = '<string>', **overrides) -> 'SimConfig':
        return cls(parse_text(text, source), **overrides)

    @classmethod
    def from_file(cls, path: str, **overrides) -> 'SimConfig':
        """ :raises: ConfigError if the file cannot be read or is invalid """
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError('Cannot read {}: {}'.format(path, e))
        LOGGER.debug('Loaded configuration from {}'.format(path))
        return cls.from_text(text, path, **overrides)

    def validate(self):
        """ :raises: ConfigError """
        _choice('estimator.name', self.estimator, ESTIMATOR_CHOICES, open_ended=True)
        _choice('controller.name', self.controller, CONTROLLER_CHOICES, open_ended=True)
        _choice('controller.terminal', self.terminal, TERMINAL_CHOICES)
        for name in ('N', 'M', 'M_bar', 'mhe_M', 'steps', 'starts'):
            if int(getattr(self, name)) < 1:
                raise ConfigError('{} must be >= 1, got {}'.format(name, getattr(self, name)))
        if any(t < 0 or t >= self.steps for t in self.outlier_steps):
            raise ConfigError('Outlier steps must lie in [0, {}), got {}'.format(self.steps, self.outlier_steps))
        if not math.isfinite(self.e0):
            raise ConfigError('initial.e0 must be finite')

    @property
    def outliers(self) -> Dict[int, float]:
        return {t: self.outlier_factor for t in self.outlier_steps}

    def copy(self, **changes) -> 'SimConfig':
        clone = object.__new__(SimConfig)
        clone.__dict__.update(self.__dict__)
        for attribute, value in changes.items():
            setattr(clone, attribute, value)
        clone.validate()
        return clone

    def as_dict(self) -> Dict[str, Any]:
        """ Settings as plain values, for trace headers and summaries. """
        data = {}
        for attribute, value in sorted(self.__dict__.items()):
            if isinstance(value, np.ndarray):
                value = value.tolist()
            data[attribute] = value
        return data

    def __repr__(self):
        return 'SimConfig(model={!r}, estimator={!r}, controller={!r}, N={}, steps={}, seed={})'.format(
            self.model, self.estimator, self.controller, self.N, self.steps, self.seed)


def _choice(key: str, value: str, choices: Iterable[str], open_ended: bool = False):
    """ Built-in choices are checked here; plugin names (open_ended) are checked at lookup. """
    if value in choices or open_ended:
        return
    raise ConfigError('{} must be one of {}, got {!r}'.format(key, ', '.join(choices), value))


