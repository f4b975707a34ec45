"""Finite-horizon optimal control problem in condensed form.

The horizon cost is written as a dense quadratic in the stacked input
sequence; box constraints on inputs and predicted states become linear
inequality rows; the QP is solved with a primal active-set method.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics


class Infeasible(Exception):
    pass


class MaxIterations(Exception):
    pass


class DimensionMismatch(Exception):
    pass


TOL_KKT = 1e-8
TOL_FEAS = 1e-9


@dataclass
class OcpConfig:
    N: int
    q_x: np.ndarray          # diagonal state weights
    q_u: np.ndarray          # diagonal input weights, strictly positive
    q_xN: np.ndarray         # diagonal terminal weights
    u_bounds: tuple          # (lb, ub) arrays, deviation units
    x_bounds: Optional[tuple] = None
    terminal_rho: Optional[float] = None

    def __post_init__(self):
        self.N = int(self.N)
        self.q_x = np.asarray(self.q_x, dtype=float).reshape(-1)
        self.q_u = np.asarray(self.q_u, dtype=float).reshape(-1)
        self.q_xN = np.asarray(self.q_xN, dtype=float).reshape(-1)
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        if np.any(self.q_x < 0) or np.any(self.q_xN < 0):
            raise ValueError("state weights must be >= 0")
        if np.any(self.q_u <= 0):
            raise ValueError("input weights must be > 0")
        self.u_bounds = (np.asarray(self.u_bounds[0], dtype=float),
                         np.asarray(self.u_bounds[1], dtype=float))
        if np.any(self.u_bounds[0] >= self.u_bounds[1]):
            raise ValueError("u bounds must satisfy lo < hi")
        if self.x_bounds is not None:
            self.x_bounds = (np.asarray(self.x_bounds[0], dtype=float),
                             np.asarray(self.x_bounds[1], dtype=float))
            if np.any(self.x_bounds[0] >= self.x_bounds[1]):
                raise ValueError("x bounds must satisfy lo < hi")

    @property
    def n_x(self):
        return self.q_x.shape[0]

    @property
    def n_u(self):
        return self.q_u.shape[0]


@dataclass
class PredictionMatrices:
    Phi: np.ndarray
    Psi: np.ndarray
    Psi_d: np.ndarray


@dataclass
class CondensedQp:
    H_j: np.ndarray
    f_j: np.ndarray
    c_j: float
    A_in: np.ndarray
    b_in: np.ndarray


@dataclass
class QpSolution:
    u_seq: np.ndarray
    active_set: list
    kkt_residual: float
    objective: float
    iterations: int = 0


def build_prediction(model, dist, cfg):
    """Phi = [A; A^2; ...; A^N]; Psi, Psi_d block lower-triangular Toeplitz
    with blocks A^(i-j) B and A^(i-j) B_d."""
    n_x, n_u, n_d = model.n_x, model.n_u, dist.n_d
    N = cfg.N
    powers = [np.eye(n_x)]
    for _ in range(N):
        powers.append(model.A @ powers[-1])
    Phi = np.vstack([powers[i] for i in range(1, N + 1)])
    Psi = np.zeros((N * n_x, N * n_u))
    Psi_d = np.zeros((N * n_x, N * n_d))
    for i in range(1, N + 1):
        for j in range(1, i + 1):
            Psi[(i - 1) * n_x:i * n_x, (j - 1) * n_u:j * n_u] = powers[i - j] @ model.B
            Psi_d[(i - 1) * n_x:i * n_x, (j - 1) * n_d:j * n_d] = powers[i - j] @ dist.B_d
    return PredictionMatrices(Phi, Psi, Psi_d)


def stacked_weights(cfg):
    qx_stack = np.concatenate([np.tile(cfg.q_x, cfg.N - 1), cfg.q_xN]) \
        if cfg.N > 1 else cfg.q_xN.copy()
    qu_stack = np.tile(cfg.q_u, cfg.N)
    return qx_stack, qu_stack


def condense(pred, cfg, x_hat, d_hat, tgt):
    """Quadratic in the stacked input sequence u:

        J(u) = u'H_j u + 2 f_j'u + c_j
             = sum_i |x_i - x_bar|^2_Qx + |u_i - u_bar|^2_Qu  (terminal QxN)

    with x_i rolled out from x_hat under constant d_hat; the i = 0 state
    term is constant in u and lands in c_j. Inequality rows, in fixed
    order: u-upper, u-lower, x-upper, x-lower.
    """
    x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
    d_hat = np.asarray(d_hat, dtype=float).reshape(-1)
    N, n_x, n_u = cfg.N, cfg.n_x, cfg.n_u
    n_d = pred.Psi_d.shape[1] // N
    if x_hat.shape[0] != n_x or d_hat.shape[0] != n_d:
        raise DimensionMismatch("x_hat/d_hat dimensions")
    qx_stack, qu_stack = stacked_weights(cfg)
    Psi, Phi, Psi_d = pred.Psi, pred.Phi, pred.Psi_d
    d_stack = np.tile(d_hat, N)
    xbar_stack = np.tile(tgt.x_bar, N)
    ubar_stack = np.tile(tgt.u_bar, N)

    g = Phi @ x_hat + Psi_d @ d_stack - xbar_stack
    PsiTQx = Psi.T * qx_stack
    H_j = PsiTQx @ Psi + np.diag(qu_stack)
    f_j = PsiTQx @ g - qu_stack * ubar_stack
    dx0 = x_hat - tgt.x_bar
    c_j = float(g @ (qx_stack * g) + ubar_stack @ (qu_stack * ubar_stack)
                + dx0 @ (cfg.q_x * dx0))

    rows = []
    rhs = []
    I_u = np.eye(N * n_u)
    rows.append(I_u); rhs.append(np.tile(cfg.u_bounds[1], N))
    rows.append(-I_u); rhs.append(-np.tile(cfg.u_bounds[0], N))
    if cfg.x_bounds is not None:
        offset = Phi @ x_hat + Psi_d @ d_stack
        rows.append(Psi); rhs.append(np.tile(cfg.x_bounds[1], N) - offset)
        rows.append(-Psi); rhs.append(-(np.tile(cfg.x_bounds[0], N) - offset))
    A_in = np.vstack(rows)
    b_in = np.concatenate(rhs)
    return CondensedQp(H_j, f_j, c_j, A_in, b_in)


def _kkt_solve(H, f, G, h, W):
    n = H.shape[0]
    m = len(W)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = 2.0 * H
    if m:
        GW = G[W]
        K[:n, n:] = GW.T
        K[n:, :n] = GW
    rhs = np.concatenate([-2.0 * f, h[W] if m else np.zeros(0)])
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:]


def _active_set_core(H, f, G, h, x0, W0, itmax):
    """min x'Hx + 2f'x s.t. Gx <= h from a feasible x0.

    Entering/leaving constraints follow Bland's lowest-index rule (the
    ascending scans pick the lowest achiever), which rules out cycling.
    """
    n = H.shape[0]
    m = G.shape[0]
    x = x0.copy()
    W = sorted(W0)
    for it in range(itmax):
        try:
            xs, lam = _kkt_solve(H, f, G, h, W)
        except np.linalg.LinAlgError:
            # dependent working set; drop the highest index and retry
            W = W[:-1]
            continue
        p = xs - x
        if np.abs(p).max() <= 1e-11 * (1.0 + np.abs(x).max()):
            if len(W) == 0 or lam.min() >= -TOL_KKT:
                return xs, W, it
            j = min(i for i, l in zip(W, lam) if l < -TOL_KKT)
            W.remove(j)
            continue
        alpha = 1.0
        blocker = -1
        Gp = G @ p
        Gx = G @ x
        for i in range(m):
            if i in W or Gp[i] <= 1e-13 * (1.0 + abs(h[i])):
                continue
            ai = (h[i] - Gx[i]) / Gp[i]
            if ai < alpha - 1e-12:
                alpha = max(ai, 0.0)
                blocker = i
        x = x + alpha * p
        if blocker >= 0:
            W.append(blocker)
            W.sort()
    raise MaxIterations(f"active set did not converge in {itmax} iterations")


def _kkt_residual(H, f, G, h, x, W, lam):
    mu = np.zeros(G.shape[0])
    for i, l in zip(W, lam):
        mu[i] = l
    r_stat = np.abs(2.0 * H @ x + 2.0 * f + G.T @ mu).max()
    slack = G @ x - h
    r_prim = max(0.0, slack.max()) if slack.size else 0.0
    r_comp = np.abs(mu * slack).max() if slack.size else 0.0
    r_dual = max(0.0, -mu.min()) if mu.size else 0.0
    return max(r_stat, r_prim, r_comp, r_dual)


def solve_qp(qp, warm_start=None, active_guess=None):
    """Minimize u'H_j u + 2 f_j'u + c_j subject to A_in u <= b_in.

    warm_start seeds the initial point (projected to feasibility via a
    phase-1 solve when needed); active_guess seeds the working set with
    rows still active at that point.
    """
    H, f, G, h = qp.H_j, qp.f_j, qp.A_in, qp.b_in
    n = H.shape[0]
    m = G.shape[0] if G is not None and G.size else 0
    if m == 0:
        u = numerics.solve_linear(2.0 * H, -2.0 * f)
        obj = float(u @ H @ u + 2.0 * f @ u + qp.c_j)
        return QpSolution(u, [], 0.0, obj, 0)

    itmax = 50 * (n + m + 1)
    x0 = np.zeros(n) if warm_start is None else np.asarray(warm_start, dtype=float).copy()
    if (G @ x0 - h).max() > TOL_FEAS:
        x0 = _phase1(H, f, G, h, x0, itmax)
    W0 = []
    if active_guess:
        act = G @ x0 - h
        W0 = [i for i in active_guess if 0 <= i < m and act[i] >= -1e-9]
        if W0 and numerics.matrix_rank(G[W0]) < len(W0):
            W0 = []
    x, W, it = _active_set_core(H, f, G, h, x0, W0, itmax)
    _, lam = _kkt_solve(H, f, G, h, W)
    res = _kkt_residual(H, f, G, h, x, W, lam)
    obj = float(x @ H @ x + 2.0 * f @ x + qp.c_j)
    return QpSolution(x, W, float(res), obj, it)


def _phase1(H, f, G, h, x0, itmax):
    """Single-slack relaxation: same objective plus a heavily weighted
    slack s, rows relaxed to Gx - s <= h with s >= 0. The start
    (x0, max-violation + 1) is strictly feasible by construction."""
    n = H.shape[0]
    m = G.shape[0]
    big = 1e6 * (np.trace(H) + np.abs(f).sum() + 1.0)
    H2 = np.zeros((n + 1, n + 1))
    H2[:n, :n] = H
    H2[n, n] = big
    f2 = np.concatenate([f, [big]])
    G2 = np.hstack([G, -np.ones((m, 1))])
    G2 = np.vstack([G2, np.concatenate([np.zeros(n), [-1.0]])])
    h2 = np.concatenate([h, [0.0]])
    s0 = max((G @ x0 - h).max(), 0.0) + 1.0
    z0 = np.concatenate([x0, [s0]])
    z, _, _ = _active_set_core(H2, f2, G2, h2, z0, [], itmax)
    if z[n] > 1e-8:
        raise Infeasible(f"phase-1 slack {z[n]:.3e} > 1e-8")
    return z[:n]


def unconstrained_gain(pred, cfg):
    """First input block of the unconstrained minimizer as a linear gain on
    the deviation from target: u0 - u_bar = K (x_hat - x_bar)."""
    qx_stack, qu_stack = stacked_weights(cfg)
    PsiTQx = pred.Psi.T * qx_stack
    H_j = PsiTQx @ pred.Psi + np.diag(qu_stack)
    K_full = numerics.solve_linear(H_j, -(PsiTQx @ pred.Phi))
    return K_full[:cfg.n_u, :]


def value_function(pred, cfg, x_hat, d_hat, tgt):
    """Optimal objective of the constrained horizon problem."""
    qp = condense(pred, cfg, x_hat, d_hat, tgt)
    return solve_qp(qp).objective


def check_terminal_set(cfg, x_N, tgt):
    if cfg.terminal_rho is None:
        raise ValueError("terminal_rho not configured")
    dx = np.asarray(x_N, dtype=float) - tgt.x_bar
    return float(dx @ (cfg.q_xN * dx)) <= cfg.terminal_rho
