"""
Single-shooting rollouts with forward sensitivities.

Estimation and control problems eliminate the dynamics by simulating from
an initial state and a parameter sequence (inputs or disturbances). The
sensitivities of every state with respect to [x0, p_0, ..., p_{N-1}] give
exact gradients for the objectives and constraints built on top.
"""
import threading
from typing import Callable, Tuple

import numpy as np

# step(k, x, p) -> (x_next, d x_next / dx, d x_next / dp)
StepFunction = Callable[[int, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]


class Rollout(object):
    """ states[k] and sens[k] = d states[k] / d theta for k = 0..N """

    def __init__(self, states: np.ndarray, sens: np.ndarray, x0_free: bool, n_p: int):
        self.states = states
        self.sens = sens
        self.x0_free = x0_free
        self.n_p = n_p

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    def param_columns(self, k: int) -> slice:
        """ Columns of theta holding p_k. """
        offset = self.states.shape[1] if self.x0_free else 0
        return slice(offset + k * self.n_p, offset + (k + 1) * self.n_p)


def rollout(step: StepFunction, x0: np.ndarray, params: np.ndarray, x0_free: bool = True) -> Rollout:
    """
    Simulate x_{k+1} = step(k, x_k, p_k) and propagate sensitivities.

    :param params: array of shape (N, n_p)
    :param x0_free: whether x0 is part of theta
    """
    x0 = np.asarray(x0, dtype=float)
    params = np.asarray(params, dtype=float)
    if params.ndim == 1:
        params = params.reshape(-1, 1) if params.size else params.reshape(0, 0)
    N = params.shape[0]
    n_x = x0.size
    n_p = params.shape[1] if N else 0
    offset = n_x if x0_free else 0
    n_theta = offset + N * n_p
    states = np.zeros((N + 1, n_x))
    sens = np.zeros((N + 1, n_x, n_theta))
    states[0] = x0
    if x0_free:
        sens[0][:, :n_x] = np.eye(n_x)
    for k in range(N):
        x_next, A, B = step(k, states[k], params[k])
        states[k + 1] = x_next
        sens[k + 1] = A @ sens[k]
        sens[k + 1][:, offset + k * n_p:offset + (k + 1) * n_p] += B
    return Rollout(states, sens, x0_free, n_p)


class Memo(object):
    """
    Caches the value of fn for the most recent argument, per thread.

    Solver callbacks evaluate the objective, constraints and their
    Jacobians at the same point; one rollout serves all of them.
    """

    def __init__(self, fn: Callable[[np.ndarray], object]):
        self.fn = fn
        self._local = threading.local()

    def __call__(self, v: np.ndarray):
        v = np.asarray(v, dtype=float)
        key = v.tobytes()
        if getattr(self._local, 'key', None) != key:
            self._local.value = self.fn(v.copy())
            self._local.key = key
        return self._local.value
