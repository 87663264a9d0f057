"""
Self-registering estimator and controller plugins.

globals:
    * ESTIMATORS maps an estimator name to its class.
    * CONTROLLERS maps a controller name to its class.

Plugins subclass AbstractEstimator or AbstractController and set "name";
the PluginMeta metaclass registers every concrete subclass. The runner
instantiates the class with the SimContext of the run.

    class MyEstimator(AbstractEstimator):
        name = 'mine'

        def update(self, st, u, y):
            ...

A plugin module may raise NotSupportedError at import time when it cannot
work on this system; find_plugins() then skips it.

find_plugins() imports all modules in the namespace package "ofmpc.plugins",
so other distributions can add plugins.
"""
import abc
import contextlib
import importlib
import inspect
import logging
import pkgutil
import time
from typing import Callable, Dict, Iterable, Tuple

from .context import SimContext  # for type hints
from .core import OfmpcError

ESTIMATORS = {}
"""
estimator name to class

:type: dict[str, type]
"""
CONTROLLERS = {}
"""
controller name to class

:type: dict[str, type]
"""
SKIPPED = []
""" names of plugin modules that reported NotSupportedError """

LOGGER = logging.getLogger('ofmpc.registry')

_IMPORT_FLAG_NAME = '__ofmpc_loaded__'


def reset_plugins():
    """ Clear the global variables populated by find_plugins() """
    ESTIMATORS.clear()
    CONTROLLERS.clear()
    SKIPPED.clear()


def find_plugins():
    """
    Load plugins from the ofmpc.plugins namespace package.

    See:
        * https://packaging.python.org/guides/creating-and-discovering-plugins/
        * https://packaging.python.org/guides/packaging-namespace-packages/
    """
    import ofmpc.plugins
    namespace_package = ofmpc.plugins
    ns_path = namespace_package.__path__
    ns_name = namespace_package.__name__ + "."

    # the prefix makes the names absolute, ready for import_module
    for finder, name, is_package in pkgutil.iter_modules(ns_path, ns_name):
        if '._' in name:
            continue  # skip anything starting with an underscore

        with import_exception_manager(name):
            module = importlib.import_module(name)
            if getattr(module, _IMPORT_FLAG_NAME, False):
                # reload to call the registration again after reset_plugins()
                importlib.reload(module)
            else:
                setattr(module, _IMPORT_FLAG_NAME, True)


def load_plugins():
    """ find_plugins() unless plugins are already registered. """
    if not (ESTIMATORS or CONTROLLERS):
        find_plugins()


@contextlib.contextmanager
def import_exception_manager(name):
    """ Processes plugin-loading exceptions. """
    try:
        yield
    except NotSupportedError as e:
        LOGGER.debug('Unsupported plugin {}: {}'.format(name, e))
        SKIPPED.append(name)


def get_recommendation(registry: Dict[str, type], excluded: Iterable[str] = None) -> str:
    """ A standard message listing the other available plugins. """
    others = sorted(set(registry) - set(excluded or []))
    if not others:
        return ''
    return 'Available: {}.'.format(', '.join('"{}"'.format(p) for p in others))


def lookup(registry: Dict[str, type], name: str) -> type:
    """ :raises: ImplementationError if name is not registered """
    try:
        return registry[name]
    except KeyError:
        raise ImplementationError('Plugin {!r} is not available. {}'
                                  .format(name, get_recommendation(registry, [name])))


def get_logger(name: str) -> logging.Logger:
    """ Gets the appropriate logger for this plugin name. """
    return logging.getLogger('ofmpc.' + name)


class NotSupportedError(OfmpcError):
    """ Raised when importing a plugin if it is not possible to run on this system. """


class ImplementationError(OfmpcError):
    """ Raised if a plugin does not conform to an interface. """
    pass


class AlreadyInRegistry(ImplementationError):
    """ Raised when the same plugin name is registered twice """
    pass


def register(registry: Dict[str, type], name: str, plugin: type):
    """ Registers a plugin class. """
    if not name:
        raise ValueError('Missing plugin name!')
    if not isinstance(name, str):
        raise TypeError('name should be a string, got {}!'.format(type(name).__name__))
    if not callable(plugin):
        raise TypeError('plugin should be callable, got {}!'.format(type(plugin).__name__))
    if name in registry:
        raise AlreadyInRegistry(name)
    registry[name] = plugin


class PluginMeta(abc.ABCMeta):
    """
    Registers every concrete class in the registry named by its "registry" attribute.
    """

    def __init__(cls, name, bases, dictionary):
        super().__init__(name, bases, dictionary)
        if inspect.isabstract(cls):
            return
        plugin_name = getattr(cls, 'name', None)
        if not plugin_name:
            raise ImplementationError('"name" attribute is empty in {}!'.format(name))
        register(cls.registry, plugin_name, cls)


class AbstractEstimator(metaclass=PluginMeta):
    """
    Produces the estimate and certified radius of step t from step t - 1.

    Radii are in the units of the squared observer form.
    """
    name = None  # must be overridden
    """:type: str """
    registry = ESTIMATORS
    capacity = 1
    """ history records to keep """

    def __init__(self, context: SimContext) -> None:
        super().__init__()
        self.context = context
        self.log = get_logger(self.name)

    def prepare(self, st):
        """ Hook called once with the initial state. """
        pass

    @abc.abstractmethod
    def update(self, st, u, y):
        """
        :param st: EstimatorState at t - 1
        :param u: input applied at t - 1
        :param y: output measured at t - 1
        :returns: EstimatorState at t
        """
        pass


class AbstractController(metaclass=PluginMeta):
    """
    Computes the tube MPC solution for the current estimate.

    The shifted previous solution is kept as the candidate of the next solve.
    """
    name = None  # must be overridden
    """:type: str """
    registry = CONTROLLERS
    capacity = 1
    """ history records to keep """

    def __init__(self, context: SimContext) -> None:
        super().__init__()
        self.context = context
        self.log = get_logger(self.name)
        self.previous = None
        """:type: ofmpc.tubempc.TubeSolution """
        self.estimator_time = 0.0
        """ wall time of the last estimator update """

    def step(self, estimator: AbstractEstimator, st, u, y,
             on_event: Callable[[str], None] = None) -> Tuple[object, object]:
        """
        Advance the estimator (unless t = 0) and solve.

        :param on_event: called with "estimate" and "solve" as the steps complete
        :returns: (TubeSolution, EstimatorState)
        """
        on_event = on_event or _ignore
        started = time.monotonic()
        if u is not None:
            st = estimator.update(st, u, y)
            on_event('estimate')
        self.estimator_time = time.monotonic() - started
        solution = self.solve(st)
        on_event('solve')
        self.previous = solution
        return solution, st

    @abc.abstractmethod
    def solve(self, st):
        """ :returns: TubeSolution for the estimate and radius in st """
        pass


def _ignore(event: str):
    pass
