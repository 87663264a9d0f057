"""
Example controller whose solve always fails.

Used for testing.
"""
from ofmpc import registry
from ofmpc.core import OfmpcError


class BrokenSolver(OfmpcError):
    pass


class BrokenController(registry.AbstractController):
    name = 'broken'

    def solve(self, st):
        raise BrokenSolver('broken controller')
