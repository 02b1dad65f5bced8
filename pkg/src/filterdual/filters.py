"""Reference filters: Wonham, its covariance DRE, Kalman-Bucy, grid Kushner.

All filters run on a whole batch at once: observations of shape
``(N, n, m)`` give trajectories of shape ``(N, n+1, ...)``; a single
``(n, m)`` path works the same way without the leading axis.

Two time-stepping schemes are offered for the Wonham filter and the DRE.
``"euler"`` is plain Euler-Maruyama.  ``"milstein"`` adds the second-order
Ito-Taylor term, using ``(dI dI^T - R dt) / 2`` for the double Ito
integrals; this is exact for scalar observations and the usual commutative
approximation otherwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridMismatchError, ModelError, NumericalError
from .markov_model import (
    Diffusion1DModel,
    FiniteModel,
    LinearGaussianModel,
    covariance_of,
    expected_covariation,
    grid_generator,
)
from .path_sim import ObsPath, PathBundle, TimeGrid

SCHEMES = ("euler", "milstein")


@dataclass(frozen=True)
class FilterTrajectory:
    """Posterior path ``pi`` with innovations ``dI`` on ``grid``.

    ``min_raw`` is the smallest entry of each path's iterate before clipping,
    a measure of how far the scheme strayed off the simplex.
    """

    model: FiniteModel
    grid: TimeGrid
    pi: np.ndarray
    dI: np.ndarray
    min_raw: np.ndarray | float = 0.0
    nodes: np.ndarray | None = None

    @property
    def Sigma(self) -> np.ndarray:
        return covariance_of(self.pi)

    def estimate(self, f) -> np.ndarray:
        """``pi_t(f)`` at every node."""
        return self.pi @ np.asarray(f, dtype=float)

    def mean(self) -> np.ndarray:
        """Posterior mean of the node locations (grid filters only)."""
        if self.nodes is None:
            raise ModelError("trajectory has no spatial nodes")
        return self.pi @ self.nodes

    def variance(self) -> np.ndarray:
        mu = self.mean()
        return self.pi @ self.nodes**2 - mu**2


@dataclass(frozen=True)
class KalmanTrajectory:
    """Conditional mean ``m`` and covariance ``cov`` (shared across paths)."""

    grid: TimeGrid
    m: np.ndarray
    cov: np.ndarray
    dI: np.ndarray | None = None


def _dZ_of(obs) -> np.ndarray:
    if isinstance(obs, ObsPath):
        return obs.dZ
    if isinstance(obs, PathBundle):
        return obs.dZ
    return np.asarray(obs, dtype=float)


def _grid_for(model, dZ: np.ndarray, grid: TimeGrid | None) -> TimeGrid:
    n = dZ.shape[-2]
    if grid is None:
        return TimeGrid(model.T, n)
    if grid.n_steps != n:
        raise GridMismatchError(f"observations have {n} steps, grid has {grid.n_steps}")
    return grid


def _cov_derivative(pi: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Directional derivative of ``diag(pi) - pi pi^T`` along ``w``."""
    out = -w[..., :, None] * pi[..., None, :] - pi[..., :, None] * w[..., None, :]
    idx = np.arange(pi.shape[-1])
    out[..., idx, idx] += w
    return out


def _matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", M, v)


def _double_ito_pairs(dI: np.ndarray, R: np.ndarray, dt: float):
    """Yield ``(l, j, I_lj)`` with ``I_lj = (dI_l dI_j - R_lj dt) / 2``."""
    m = R.shape[0]
    for l in range(m):
        for j in range(m):
            yield l, j, 0.5 * (dI[..., l] * dI[..., j] - R[l, j] * dt)


def wonham_filter(model: FiniteModel, obs, grid: TimeGrid | None = None, scheme: str = "euler") -> FilterTrajectory:
    """Wonham filter ``d pi = A^T pi dt + Sigma H R^-1 dI`` with clip-and-renormalize.

    Parameters
    ----------
    model : FiniteModel
    obs : ObsPath, PathBundle or array
        Observation increments, ``(n, m)`` or ``(N, n, m)``.
    grid : TimeGrid, optional
        Defaults to ``n`` uniform steps on ``[0, model.T]``.
    scheme : {"euler", "milstein"}

    Raises
    ------
    NumericalError
        If clipping removes all probability mass on some path.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    dZ = _dZ_of(obs)
    grid = _grid_for(model, dZ, grid)
    dt = grid.dt
    A, H, R = model.A, model.H, model.R
    C = H @ model.R_inv
    batch = dZ.shape[:-2]
    n = grid.n_steps
    pi = np.empty(batch + (n + 1, model.d))
    dI = np.empty_like(dZ)
    pi[..., 0, :] = model.prior
    p = np.broadcast_to(model.prior, batch + (model.d,)).copy()
    min_raw = np.full(batch, np.inf)
    for k in range(n):
        inc = dZ[..., k, :] - (p @ H) * dt
        Sig = covariance_of(p)
        B = Sig @ C
        step = (p @ A) * dt + _matvec(B, inc)
        if scheme == "milstein":
            for l, j, Ilj in _double_ito_pairs(inc, R, dt):
                step += Ilj[..., None] * _matvec(_cov_derivative(p, B[..., l]), C[:, j])
        p = p + step
        min_raw = np.minimum(min_raw, p.min(axis=-1))
        np.clip(p, 0.0, None, out=p)
        mass = p.sum(axis=-1, keepdims=True)
        if np.any(mass <= 0):
            raise NumericalError(f"all posterior mass clipped at step {k}; dt too large for the noise level")
        p /= mass
        pi[..., k + 1, :] = p
        dI[..., k, :] = inc
    return FilterTrajectory(model, grid, pi, dI, min_raw)


def sigma_dre_step(filt: FilterTrajectory, model: FiniteModel | None = None, scheme: str = "euler") -> np.ndarray:
    """Integrate the covariance DRE driven by the filter's innovations.

    ``dSigma = (A^T S + S A + pi(Q) - S H R^-1 H^T S) dt
    + diag(S H R^-1 dI) - S H R^-1 dI pi^T - pi dI^T R^-1 H^T S``
    from ``covariance_of(pi_0)``.  Returns ``(..., n+1, d, d)``; compare it
    with ``filt.Sigma``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    model = model or filt.model
    A, H, R = model.A, model.H, model.R
    C = H @ model.R_inv
    G = C @ H.T
    dt = filt.grid.dt
    pi, dI = filt.pi, filt.dI
    batch = pi.shape[:-2]
    out = np.empty(batch + (filt.grid.n_steps + 1, model.d, model.d))
    S = covariance_of(pi[..., 0, :]).copy()
    out[..., 0, :, :] = S
    for k in range(filt.grid.n_steps):
        p = pi[..., k, :]
        inc = dI[..., k, :]
        drift = A.T @ S + S @ A + expected_covariation(A, p) - S @ G @ S
        step = drift * dt + _cov_derivative(p, _matvec(S @ C, inc))
        if scheme == "milstein":
            SC = S @ C
            Bpi = covariance_of(p) @ C
            for l, j, Ilj in _double_ito_pairs(inc, R, dt):
                bl = _cov_derivative(p, SC[..., l])
                bc = _matvec(bl, C[:, j])
                sc = SC[..., j]
                sp = Bpi[..., l]
                corr = (
                    _cov_derivative(p, bc)
                    - sc[..., :, None] * sp[..., None, :]
                    - sp[..., :, None] * sc[..., None, :]
                )
                step = step + Ilj[..., None, None] * corr
        S = S + step
        S = 0.5 * (S + np.swapaxes(S, -1, -2))
        out[..., k + 1, :, :] = S
    return out


def _riccati_rk4(F, S0: np.ndarray, n: int, dt: float) -> np.ndarray:
    out = np.empty((n + 1,) + S0.shape)
    S = S0.copy()
    out[0] = S
    for k in range(n):
        k1 = F(S)
        k2 = F(S + 0.5 * dt * k1)
        k3 = F(S + 0.5 * dt * k2)
        k4 = F(S + dt * k3)
        S = S + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        S = 0.5 * (S + S.T)
        if not np.all(np.isfinite(S)) or np.linalg.eigvalsh(S).min() < -1e-9 * max(1.0, np.abs(S).max()):
            raise NumericalError(f"Riccati iterate lost positive semidefiniteness at step {k}")
        out[k + 1] = S
    return out


def kalman_riccati(model: LinearGaussianModel, grid: TimeGrid) -> np.ndarray:
    """Filter Riccati ``dS/dt = AS + SA^T + Q - S H^T R^-1 H S`` by RK4."""
    A, H, Q = model.A, model.H, model.Q
    G = H.T @ model.R_inv @ H
    return _riccati_rk4(lambda S: A @ S + S @ A.T + Q - S @ G @ S, model.Sigma0, grid.n_steps, grid.dt)


def kalman_bucy(model: LinearGaussianModel, obs, grid: TimeGrid | None = None) -> KalmanTrajectory:
    """Kalman-Bucy filter.

    The Riccati equation is integrated by RK4 on a grid twice as fine, so
    the gain is available at cell midpoints.  The mean takes a
    Crank-Nicolson step with the midpoint gain,
    ``(I - dt/2 M) m_{k+1} = (I + dt/2 M) m_k + K_{k+1/2} dZ_k`` with
    ``M = A - K_{k+1/2} H``, which weights each increment by the gain at the
    centre of its cell.
    """
    if not isinstance(model, LinearGaussianModel):
        raise ModelError("kalman_bucy needs a LinearGaussianModel")
    dZ = _dZ_of(obs)
    grid = _grid_for(model, dZ, grid)
    dt = grid.dt
    cov_fine = kalman_riccati(model, TimeGrid(grid.T, 2 * grid.n_steps))
    cov = cov_fine[::2]
    A, H = model.A, model.H
    K = cov_fine[1::2] @ H.T @ model.R_inv
    eye = np.eye(model.d)
    M = A - K @ H
    lhs = eye - 0.5 * dt * M
    prop = np.linalg.solve(lhs, eye + 0.5 * dt * M)
    gain = np.linalg.solve(lhs, K)
    batch = dZ.shape[:-2]
    m = np.empty(batch + (grid.n_steps + 1, model.d))
    dI = np.empty_like(dZ)
    x = np.broadcast_to(model.m0, batch + (model.d,)).copy()
    m[..., 0, :] = x
    for k in range(grid.n_steps):
        x_new = x @ prop[k].T + dZ[..., k, :] @ gain[k].T
        dI[..., k, :] = dZ[..., k, :] - (0.5 * (x + x_new) @ H.T) * dt
        x = x_new
        m[..., k + 1, :] = x
    return KalmanTrajectory(grid, m, cov, dI)


def grid_kushner(model: Diffusion1DModel, n: int, obs, grid: TimeGrid | None = None, scheme: str = "euler") -> FilterTrajectory:
    """Wonham filter on the grid chain of a scalar diffusion.

    Node weights are probabilities, i.e. density times node spacing.

    Raises
    ------
    NumericalError
        If the explicit step is unstable for the chain, ``dt max_i |A_ii| > 1``.
    """
    fm, nodes = grid_generator(model, n)
    dZ = _dZ_of(obs)
    g = _grid_for(fm, dZ, grid)
    rate = float(np.abs(np.diag(fm.A)).max())
    if g.dt * rate > 1.0:
        raise NumericalError(f"grid of {n} nodes too fine for dt={g.dt:g}: dt * max rate = {g.dt * rate:.3g} > 1")
    filt = wonham_filter(fm, obs, g, scheme)
    return FilterTrajectory(fm, filt.grid, filt.pi, filt.dI, filt.min_raw, nodes)


def mc_kalman(model: FiniteModel, obs, SigmaBar: np.ndarray | None = None, grid: TimeGrid | None = None) -> KalmanTrajectory:
    """Kalman filter for the chain: ``dX = A^T X dt + SigmaBar H R^-1 (dZ - H^T X dt)``.

    ``SigmaBar`` defaults to the deterministic DRE solution on the grid.
    """
    if not isinstance(model, FiniteModel):
        raise ModelError("mc_kalman needs a FiniteModel")
    dZ = _dZ_of(obs)
    grid = _grid_for(model, dZ, grid)
    if SigmaBar is None:
        from .lq_dual import dre_forward

        SigmaBar = dre_forward(model, grid)
    if SigmaBar.shape[0] != grid.n_steps + 1:
        raise GridMismatchError("SigmaBar path does not match the observation grid")
    dt = grid.dt
    A, H = model.A, model.H
    K = SigmaBar @ H @ model.R_inv
    batch = dZ.shape[:-2]
    xs = np.empty(batch + (grid.n_steps + 1, model.d))
    dI = np.empty_like(dZ)
    x = np.broadcast_to(model.prior, batch + (model.d,)).copy()
    xs[..., 0, :] = x
    for k in range(grid.n_steps):
        inc = dZ[..., k, :] - (x @ H) * dt
        x = x + (x @ A) * dt + inc @ K[k].T
        xs[..., k + 1, :] = x
        dI[..., k, :] = inc
    return KalmanTrajectory(grid, xs, SigmaBar, dI)


def export_trajectory(traj: FilterTrajectory | KalmanTrajectory, path, index: int | None = None) -> Path:
    """Write one trajectory as CSV: ``t``, state estimate, flattened covariance, ``dI``.

    Covariance columns are ``Sigma_i_j``.  A grid filter (one with spatial
    nodes) writes the posterior ``mean`` and ``variance`` of the diffusion
    instead of the node covariance matrix.  ``index`` selects a path from a
    batched trajectory.
    """
    if isinstance(traj, FilterTrajectory):
        est, prefix = traj.pi, "pi"
    else:
        est, prefix = traj.m, "m"
    dI = traj.dI
    if index is not None:
        est = est[index]
        dI = dI[index] if dI is not None else None
    if est.ndim != 2:
        raise ValueError("batched trajectory: pass index")
    d = est.shape[1]
    header = ["t", *[f"{prefix}_{i + 1}" for i in range(d)]]
    if isinstance(traj, FilterTrajectory) and traj.nodes is not None:
        mean = est @ traj.nodes
        extra = np.column_stack([mean, est @ traj.nodes**2 - mean**2])
        header += ["mean", "variance"]
    else:
        cov = covariance_of(est) if isinstance(traj, FilterTrajectory) else traj.cov
        extra = cov.reshape(len(cov), -1)
        header += [f"Sigma_{i + 1}_{j + 1}" for i in range(d) for j in range(d)]
    m = 0 if dI is None else dI.shape[1]
    header += [f"dI_{j + 1}" for j in range(m)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t = traj.grid.nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(t)):
            row = [repr(float(t[k]))] + [repr(float(v)) for v in est[k]] + [repr(float(v)) for v in extra[k]]
            if m:
                row += [repr(float(v)) for v in dI[k]] if k < len(t) - 1 else [""] * m
            w.writerow(row)
    return path
