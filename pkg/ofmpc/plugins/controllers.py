"""
Tube MPC controllers.

Estimator radii are squared observer-form values; the tube problems take
their norm-form square root.
"""
import math

from ofmpc import registry
from ofmpc.certificates import norm_radius
from ofmpc.tubempc import next_value_bound, solve_homothetic, solve_mhe_mpc, solve_rigid, solve_tightened


class HomotheticController(registry.AbstractController):
    """ Homothetic tube with a free initial nominal state. """
    name = 'homothetic'

    def solve(self, st):
        return solve_homothetic(self.context.setup, st.x_hat, norm_radius(st.e_bar), self.context.nlp_opts,
                                self.previous)


class TightenedController(registry.AbstractController):
    name = 'tightened'

    def solve(self, st):
        return solve_tightened(self.context.setup, st.x_hat, norm_radius(st.e_bar), self.context.nlp_opts,
                               self.previous)


class RigidController(registry.AbstractController):
    name = 'rigid'

    def solve(self, st):
        return solve_rigid(self.context.setup, st.x_hat, norm_radius(st.e_bar), self.context.nlp_opts,
                           self.previous)


class MheMpcController(registry.AbstractController):
    """
    Joint moving horizon estimation and homothetic tube MPC.

    The estimator plugin is bypassed: the joint problem produces the
    estimate, and the Luenberger update with solve_homothetic is the
    fallback whenever the joint cost exceeds the running value bound.
    """
    name = 'mhe-mpc'

    def __init__(self, context):
        super().__init__(context)
        self.capacity = context.mhe_cfg.M
        self.value_bound = math.inf
        self.branch = None

    def step(self, estimator, st, u, y, on_event=None):
        context = self.context
        solution, st, self.branch = solve_mhe_mpc(context.setup, context.mhe_cfg, context.observer, st, u, y,
                                                  context.cert_ioss, context.cert_obs, self.value_bound,
                                                  context.nlp_opts, self.previous)
        if on_event is not None:
            on_event(self.branch)
        if solution.feasible:
            self.value_bound = next_value_bound(solution.cost, solution, context.setup)
        self.previous = solution
        return solution, st

    def solve(self, st):
        return solve_homothetic(self.context.setup, st.x_hat, norm_radius(st.e_bar), self.context.nlp_opts,
                                self.previous)
