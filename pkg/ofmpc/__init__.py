""" The ofmpc package. """
from .ofmpc import *

from .version import __version__

# ofmpc.plugins is a namespace package so other distributions can add
# estimators and controllers; "pkgutil-style" lets this __init__.py stay.
# see https://packaging.python.org/guides/packaging-namespace-packages/#pkgutil-style-namespace-packages
# noinspection PyUnboundLocalVariable
__path__ = __import__('pkgutil').extend_path(__path__, __name__)  # noqa: F405
