"""
Estimators with online-validated error bounds.

Every estimator advances the Luenberger estimate with the newest (u, y)
and replaces the carried radius by a certified one.
"""
from ofmpc import registry
from ofmpc.core import UnsupportedCertificate
from ofmpc.mhe import combined_update, mhe_update
from ofmpc.observer import (error_update_general, error_update_identical, observability_update, observer_step,
                            predict_error)
from ofmpc.setmember import InfeasibleMembership, MembershipWindow, membership_update, solve_membership


class AprioriEstimator(registry.AbstractEstimator):
    """ Luenberger observer with the worst-case bound propagated open loop. """
    name = 'apriori'

    def update(self, st, u, y):
        new = observer_step(self.context.observer, st, u, y)
        e_bar = predict_error(st.e_bar, 1, self.context.cert_obs, self.context.w_bar)
        return new.with_bound(e_bar, 'apriori')


class IossEstimator(registry.AbstractEstimator):
    """ One-step data-based bound; W and Vo must be the same form. """
    name = 'ioss'

    def prepare(self, st):
        if not self.context.cert_ioss.W.same_form(self.context.cert_obs.Vo):
            raise UnsupportedCertificate('"ioss" needs identical Lyapunov functions; use "general"')

    def update(self, st, u, y):
        new = observer_step(self.context.observer, st, u, y)
        e_bar = error_update_identical(new, self.context.cert_ioss, self.context.cert_obs, self.context.w_bar)
        return new.with_bound(e_bar, 'ioss')


class GeneralIossEstimator(registry.AbstractEstimator):
    """ Windowed data-based bound for any pair of IOSS and observer certificates. """
    name = 'general'

    def __init__(self, context):
        super().__init__(context)
        self.capacity = context.config.M_bar

    def update(self, st, u, y):
        new = observer_step(self.context.observer, st, u, y)
        e_bar = error_update_general(new, self.context.cert_ioss, self.context.cert_obs, self.context.w_bar,
                                     M_bar=self.capacity)
        return new.with_bound(e_bar, 'general')


class ObservabilityEstimator(registry.AbstractEstimator):
    """ Bound from an observability certificate once nu records exist, a-priori before. """
    name = 'observability'

    def __init__(self, context):
        super().__init__(context)
        if context.observability is not None:
            self.capacity = context.observability.nu

    def prepare(self, st):
        if self.context.observability is None:
            raise UnsupportedCertificate('Model {!r} has no observability certificate'
                                         .format(self.context.config.model))

    def update(self, st, u, y):
        oc = self.context.observability
        new = observer_step(self.context.observer, st, u, y)
        if new.t < oc.nu:
            return new.with_bound(predict_error(st.e_bar, 1, self.context.cert_obs, self.context.w_bar), 'apriori')
        e_bar = observability_update(new, oc, self.context.cert_obs, self.context.w_bar, st.e_bar)
        return new.with_bound(e_bar, 'observability')


class SetMembershipEstimator(registry.AbstractEstimator):
    """
    Worst-case distance from the estimate to any state consistent with the
    last M measurements, found by multistart optimization.
    """
    name = 'setmember'

    def __init__(self, context):
        super().__init__(context)
        self.capacity = context.config.M
        self.starts = context.config.starts

    def update(self, st, u, y):
        context = self.context
        new = observer_step(context.observer, st, u, y)
        if new.t < self.capacity:
            return new.with_bound(predict_error(st.e_bar, 1, context.cert_obs, context.w_bar), 'apriori')
        window = MembershipWindow.from_state(new, self.capacity)
        try:
            solution = solve_membership(context.model, window, context.cert_obs.Vo, new.x_hat, context.w_bar,
                                        context.nlp_opts, n_starts=self.starts, seed=context.seed + new.t)
        except InfeasibleMembership as e:
            self.log.warning('t={}: {}; keeping the a-priori bound'.format(new.t, e))
            return new.with_bound(predict_error(st.e_bar, 1, context.cert_obs, context.w_bar), 'apriori')
        e_bar = membership_update(solution.gamma_hat, st.e_bar, context.cert_obs, context.w_bar)
        new = new.with_bound(e_bar, 'setmember')
        new.info.update(gamma_hat=solution.gamma_hat, nlp_status=solution.status, wall_time=solution.wall_time)
        return new


class MheEstimator(registry.AbstractEstimator):
    """ Moving horizon estimate with its certified radius. """
    name = 'mhe'

    def __init__(self, context):
        super().__init__(context)
        self.capacity = context.mhe_cfg.M

    def prepare(self, st):
        if not self.context.cert_ioss.W.same_form(self.context.cert_obs.Vo):
            raise UnsupportedCertificate('"mhe" radii live in W, which must equal Vo; use "combined"')

    def update(self, st, u, y):
        new, _ = mhe_update(self.context.model, self.context.mhe_cfg, self.context.observer, st, u, y,
                            self.context.w_bar, self.context.nlp_opts)
        return new


class CombinedEstimator(registry.AbstractEstimator):
    """ MHE accepted only when it beats the Luenberger update; otherwise the Luenberger estimate. """
    name = 'combined'

    def __init__(self, context):
        super().__init__(context)
        self.capacity = context.mhe_cfg.M

    def update(self, st, u, y):
        return combined_update(self.context.model, self.context.mhe_cfg, self.context.observer, st, u, y,
                               self.context.w_bar, self.context.cert_ioss, self.context.cert_obs,
                               self.context.nlp_opts)
