"""Disturbance estimator: nominal recursion, learned-mismatch variant with a
supplementary disturbance state, and direct steady-state back-calculation
from plant I/O."""

from dataclasses import dataclass

import numpy as np

from . import numerics
from .model import estimator_error_matrix, steady_io_matrix


@dataclass
class AugmentedEstimate:
    x_hat: np.ndarray
    d_hat: np.ndarray

    def __post_init__(self):
        self.x_hat = np.asarray(self.x_hat, dtype=float).reshape(-1)
        self.d_hat = np.asarray(self.d_hat, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(self.x_hat)) and np.all(np.isfinite(self.d_hat))):
            raise ValueError("non-finite estimate")

    def stacked(self):
        return np.concatenate([self.x_hat, self.d_hat])


@dataclass
class CombinedDisturbance:
    d_learned: np.ndarray
    d_supp: np.ndarray

    def __post_init__(self):
        self.d_learned = np.asarray(self.d_learned, dtype=float).reshape(-1)
        self.d_supp = np.asarray(self.d_supp, dtype=float).reshape(-1)

    @property
    def d_total(self):
        return self.d_learned + self.d_supp


class DisturbanceEstimator:
    """Holds (model, dist, gains) and exposes the update maps.

    Updates are pure: estimate in, new estimate out. All vectors are in
    deviation coordinates; zero initial estimates correspond to starting
    at the operating point.
    """

    def __init__(self, model, dist, gains):
        self.model = model
        self.dist = dist
        self.gains = gains
        self.M_err = estimator_error_matrix(model, dist, gains)
        self._B_stack = np.vstack([model.B,
                                   np.zeros((dist.n_d, model.n_u))])
        self._L_stack = np.vstack([gains.L_x, gains.L_d])
        # forcing injected by an exogenous learned disturbance
        self._D_stack = np.vstack([dist.B_d + gains.L_x @ dist.C_d,
                                   gains.L_d @ dist.C_d])

    def initial(self):
        return AugmentedEstimate(np.zeros(self.model.n_x),
                                 np.zeros(self.dist.n_d))

    def nominal_step(self, est, u, y_p):
        w = (self.M_err @ est.stacked()
             + self._B_stack @ np.asarray(u, dtype=float)
             - self._L_stack @ np.asarray(y_p, dtype=float))
        n_x = self.model.n_x
        return AugmentedEstimate(w[:n_x], w[n_x:])

    def learned_step(self, est, u, y_p, d_learned):
        w = (self.M_err @ est.stacked()
             + self._B_stack @ np.asarray(u, dtype=float)
             - self._L_stack @ np.asarray(y_p, dtype=float)
             + self._D_stack @ np.asarray(d_learned, dtype=float))
        n_x = self.model.n_x
        return AugmentedEstimate(w[:n_x], w[n_x:])

    def steady_state_from_io(self, y_p_inf, u_inf):
        """Invert the steady-state estimate equations for constant (y_p, u).

        Solves [[A-I+LxC, Bd+LxCd],[LdC, LdCd]] [x; d] =
               [Lx y_p - B u; Ld y_p].
        """
        y_p_inf = np.asarray(y_p_inf, dtype=float)
        u_inf = np.asarray(u_inf, dtype=float)
        M = steady_io_matrix(self.model, self.dist, self.gains)
        rhs = np.concatenate([
            self.gains.L_x @ y_p_inf - self.model.B @ u_inf,
            self.gains.L_d @ y_p_inf,
        ])
        sol = numerics.solve_linear(M, rhs)
        n_x = self.model.n_x
        return AugmentedEstimate(sol[:n_x], sol[n_x:])
