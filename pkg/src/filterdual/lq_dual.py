"""Deterministic LQ duals: Kalman-Bucy, and the Kalman filter for a Markov chain.

Restricting the dual control to deterministic schedules turns the BSDE into
an ODE and the optimal control problem into a classical LQ problem whose
Riccati equation is the Kalman covariance equation.  For a Markov chain the
resulting filter is only suboptimal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, linalg

from .errors import ModelError, NumericalError
from .markov_model import FiniteModel, LinearGaussianModel, covariance_of, expected_covariation
from .path_sim import ObsPath, PathBundle, TimeGrid


def _rk4(F, x0: np.ndarray, n: int, dt: float, check=None) -> np.ndarray:
    """Classical RK4 for an autonomous ODE; returns all ``n+1`` iterates."""
    out = np.empty((n + 1,) + np.shape(x0))
    x = np.array(x0, dtype=float)
    out[0] = x
    for k in range(n):
        k1 = F(x)
        k2 = F(x + 0.5 * dt * k1)
        k3 = F(x + 0.5 * dt * k2)
        k4 = F(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if check is not None:
            x = check(x, k)
        out[k + 1] = x
    return out


def _default_grid(model, grid: TimeGrid | None, n_steps: int = 1000) -> TimeGrid:
    return grid if grid is not None else TimeGrid(model.T, n_steps)


@dataclass(frozen=True)
class LqSolution:
    """Optimal deterministic dual: Riccati path, costate, control and value."""

    grid: TimeGrid
    SigmaBar: np.ndarray
    y: np.ndarray
    u: np.ndarray
    value: float
    u_mid: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "grid": {"T": self.grid.T, "n_steps": self.grid.n_steps},
            "value": float(self.value),
            "t": self.grid.nodes.tolist(),
            "y": self.y.tolist(),
            "u": self.u.tolist(),
            "SigmaBar": self.SigmaBar.tolist(),
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    def save_csv(self, path) -> None:
        d, m = self.y.shape[1], self.u.shape[1]
        cols = ["t"] + [f"y_{i + 1}" for i in range(d)] + [f"u_{j + 1}" for j in range(m)]
        cols += [f"SigmaBar_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        rows = np.column_stack([self.grid.nodes, self.y, self.u, self.SigmaBar.reshape(len(self.y), -1)])
        np.savetxt(path, rows, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")


def marginal_moments(model: FiniteModel, grid: TimeGrid | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``rho_t = exp(A^T t) pi_0`` by RK4 and ``E[Q(X_t)] = rho_t(Q)`` at every node."""
    grid = _default_grid(model, grid)
    rho = _rk4(lambda r: model.A.T @ r, model.prior, grid.n_steps, grid.dt)
    return rho, expected_covariation(model.A, rho)


def dre_forward(model: FiniteModel, grid: TimeGrid | None = None) -> np.ndarray:
    """Chain Kalman DRE ``dS/dt = SA + A^T S - S H R^-1 H^T S + E[Q(X_t)]``, ``S_0 = Sigma_0``.

    ``rho_t`` is integrated alongside so the RK4 stages see consistent
    ``E[Q]``.  Symmetrized every step.

    Raises
    ------
    NumericalError
        If an iterate loses positive semidefiniteness.
    """
    grid = _default_grid(model, grid)
    A, d = model.A, model.d
    G = model.H @ model.R_inv @ model.H.T

    def F(x):
        rho, S = x[0], x[1:]
        return np.vstack([A.T @ rho, S @ A + A.T @ S - S @ G @ S + expected_covariation(A, rho)])

    def check(x, k):
        S = 0.5 * (x[1:] + x[1:].T)
        if not np.all(np.isfinite(S)) or np.linalg.eigvalsh(S).min() < -1e-9 * max(1.0, np.abs(S).max()):
            raise NumericalError(f"DRE iterate lost positive semidefiniteness at step {k}")
        x[1:] = S
        return x

    x0 = np.vstack([model.prior, covariance_of(model.prior)])
    return _rk4(F, x0, grid.n_steps, grid.dt, check)[:, 1:, :]


def _backward_linear(Mfun, f: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Integrate ``dy/dt = M(t) y`` backward from ``y_T = f``.

    ``Mfun(k2)`` returns ``M`` at half-step node ``k2`` (``t = k2 dt / 2``).
    """
    n, dt = grid.n_steps, grid.dt
    y = np.empty((n + 1, len(f)))
    y[n] = f
    for k in range(n, 0, -1):
        x = y[k]
        Mk, Mh, Mp = Mfun(2 * k), Mfun(2 * k - 1), Mfun(2 * k - 2)
        k1 = Mk @ x
        k2 = Mh @ (x - 0.5 * dt * k1)
        k3 = Mh @ (x - 0.5 * dt * k2)
        k4 = Mp @ (x - dt * k3)
        y[k - 1] = x - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def lq_solve(model: FiniteModel, f, grid: TimeGrid | None = None) -> LqSolution:
    """Optimal deterministic schedule for the chain's dual problem.

    ``u = -R^-1 H^T SigmaBar y`` with ``dy/dt = (-A + H R^-1 H^T SigmaBar) y``,
    ``y_T = f``.  The value
    ``1/2 y_0^T Sigma_0 y_0 + int (1/2 u^T R u + 1/2 y^T E[Q] y) dt``
    uses Simpson's rule on the grid.
    """
    grid = _default_grid(model, grid)
    f = np.asarray(f, dtype=float)
    if f.shape != (model.d,):
        raise ModelError(f"f must have length {model.d}")
    fine = TimeGrid(grid.T, 2 * grid.n_steps)
    S_fine = dre_forward(model, fine)
    rho_fine, EQ_fine = marginal_moments(model, fine)
    G = model.H @ model.R_inv @ model.H.T
    y = _backward_linear(lambda k2: -model.A + G @ S_fine[k2], f, grid)
    S = S_fine[::2]
    gain = -model.R_inv @ model.H.T
    u = np.einsum("kl,tlj,tj->tk", gain, S, y)
    value = _lq_value(model, y, u, EQ_fine[::2], grid)
    # midpoint controls for RK4 re-integration of the schedule; cubic Hermite
    # interpolation of y keeps them fourth-order accurate
    dy = np.einsum("tij,tj->ti", -model.A + G @ S, y)
    y_mid = 0.5 * (y[:-1] + y[1:]) + grid.dt / 8.0 * (dy[:-1] - dy[1:])
    u_mid = np.einsum("kl,tlj,tj->tk", gain, S_fine[1::2], y_mid)
    return LqSolution(grid, S, y, u, value, u_mid)


def _lq_value(model: FiniteModel, y, u, EQ, grid: TimeGrid) -> float:
    run = 0.5 * np.einsum("tk,kl,tl->t", u, model.R, u) + 0.5 * np.einsum("ti,tij,tj->t", y, EQ, y)
    return float(0.5 * y[0] @ model.Sigma0 @ y[0] + integrate.simpson(run, x=grid.nodes))


# --------------------------------------------------------------------------- #
# Linear-Gaussian case
# --------------------------------------------------------------------------- #


def _kalman_riccati_fine(lg: LinearGaussianModel, grid: TimeGrid) -> np.ndarray:
    from .filters import kalman_riccati

    return kalman_riccati(lg, TimeGrid(grid.T, 2 * grid.n_steps))


def lg_dual_solution(lg: LinearGaussianModel, f, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Costate ``y`` and control ``u`` of the linear-Gaussian dual.

    ``dy/dt = -A^T y + H^T R^-1 H SigmaBar y``, ``y_T = f``,
    ``u = -R^-1 H SigmaBar y``.
    """
    y, u, _ = _lg_dual_parts(lg, f, grid)
    return y, u


def _lg_dual_parts(lg: LinearGaussianModel, f, grid: TimeGrid):
    f = np.asarray(f, dtype=float)
    if f.shape != (lg.d,):
        raise ModelError(f"f must have length {lg.d}")
    S_fine = _kalman_riccati_fine(lg, grid)
    G = lg.H.T @ lg.R_inv @ lg.H
    y = _backward_linear(lambda k2: -lg.A.T + G @ S_fine[k2], f, grid)
    gain = -lg.R_inv @ lg.H
    u = np.einsum("kl,tlj,tj->tk", gain, S_fine[::2], y)
    dy = np.einsum("tij,tj->ti", -lg.A.T + G @ S_fine[::2], y)
    y_mid = 0.5 * (y[:-1] + y[1:]) + grid.dt / 8.0 * (dy[:-1] - dy[1:])
    u_mid = np.einsum("kl,tlj,tj->tk", gain, S_fine[1::2], y_mid)
    return y, u, u_mid


def dual_estimator_lg(lg: LinearGaussianModel, f, obs, grid: TimeGrid | None = None) -> np.ndarray:
    """``S_T = y_0^T m_0 - int u^T dZ`` for one path or a batch.

    Each increment ``dZ_k`` is weighted by the control at the centre of its
    cell, the same quadrature the Kalman-Bucy mean uses.
    """
    dZ = obs.dZ if isinstance(obs, (ObsPath, PathBundle)) else np.asarray(obs, dtype=float)
    grid = grid or TimeGrid(lg.T, dZ.shape[-2])
    y, _, u_mid = _lg_dual_parts(lg, f, grid)
    return y[0] @ lg.m0 - np.einsum("...km,km->...", dZ, u_mid)


def control_riccati(lg: LinearGaussianModel, grid: TimeGrid) -> np.ndarray:
    """Riccati matrix of the LQ dual from its Hamiltonian system.

    Propagates ``[X; Y]`` with ``d/dt [X; Y] = [[-A^T, H^T R^-1 H], [Q, A]] [X; Y]``
    by the exact matrix exponential and returns ``K = Y X^-1``, starting
    from ``K_0 = Sigma_0``.
    """
    d = lg.d
    M = np.block([[-lg.A.T, lg.H.T @ lg.R_inv @ lg.H], [lg.Q, lg.A]])
    E = linalg.expm(M * grid.dt)
    K = np.empty((grid.n_steps + 1, d, d))
    K[0] = lg.Sigma0
    for k in range(grid.n_steps):
        XY = E @ np.vstack([np.eye(d), K[k]])
        Kn = np.linalg.solve(XY[:d].T, XY[d:].T).T
        K[k + 1] = 0.5 * (Kn + Kn.T)
    return K


def riccati_duality_check(lg: LinearGaussianModel, grid: TimeGrid | None = None) -> float:
    """Sup-norm distance between the filter Riccati path and the control Riccati path.

    The filter side is the RK4 integration used by the Kalman-Bucy filter;
    the control side comes from the Hamiltonian system of the LQ dual.
    """
    from .filters import kalman_riccati

    grid = _default_grid(lg, grid)
    return float(np.abs(kalman_riccati(lg, grid) - control_riccati(lg, grid)).max())
