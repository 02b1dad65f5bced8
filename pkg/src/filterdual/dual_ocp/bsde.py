"""Solvers for the dual BSDE and the forward co-state equation.

The BSDE in innovation form reads

    dY = -(A Y + H U + diag(H V^T) - V H^T pi) dt + V dI,   Y_T = f.

Three solvers are provided: an ODE solver for deterministic controls
(``V = 0``), least-squares Monte Carlo regression on features of ``pi``, and
for two-state chains an optimal synthesis that tabulates ``Y = y(t, pi)`` by
solving the backward PDE the optimal pair satisfies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..errors import GridMismatchError, ModelError, RegressionError
from ..filters import FilterTrajectory, _cov_derivative, _double_ito_pairs, wonham_filter
from ..markov_model import FiniteModel, bsde_drift, covariance_of, expected_covariation
from ..path_sim import PathBundle, TimeGrid
from .policy import BasisSpec, ControlPolicy, DualTrajectory, optimal_control_law


# --------------------------------------------------------------------------- #
# Deterministic controls
# --------------------------------------------------------------------------- #


def bsde_solve_deterministic(u, f, model: FiniteModel, grid: TimeGrid | None = None) -> np.ndarray:
    """Backward RK4 for ``dY/dt = -(A Y + H u_t)``, ``Y_T = f``.

    ``u`` is a deterministic :class:`ControlPolicy` or an ``(n+1, m)``
    schedule on ``grid``.  Returns ``Y`` at the nodes, ``(n+1, d)``.
    """
    if not isinstance(u, ControlPolicy):
        if grid is None:
            raise ModelError("a raw schedule needs its grid")
        u = ControlPolicy.deterministic(u, grid)
    if not u.is_deterministic:
        raise ModelError("bsde_solve_deterministic needs a deterministic schedule")
    grid = u.grid
    f = np.asarray(f, dtype=float)
    A, H, dt = model.A, model.H, grid.dt
    us, um = u.schedule, u.midpoints()
    Y = np.empty((grid.n_steps + 1, model.d))
    Y[-1] = f
    F = lambda y, v: -(A @ y + H @ v)
    for k in range(grid.n_steps, 0, -1):
        y = Y[k]
        k1 = F(y, us[k])
        k2 = F(y - 0.5 * dt * k1, um[k - 1])
        k3 = F(y - 0.5 * dt * k2, um[k - 1])
        k4 = F(y - dt * k3, us[k - 1])
        Y[k - 1] = y - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return Y


def deterministic_trajectory(policy: ControlPolicy, f, model: FiniteModel, filt: FilterTrajectory) -> DualTrajectory:
    """Dual trajectory of a deterministic policy, broadcast over the filter's paths."""
    if policy.grid.n_steps != filt.grid.n_steps:
        raise GridMismatchError("policy and filter grids differ")
    Y = bsde_solve_deterministic(policy, f, model)
    batch = filt.pi.shape[:-2]
    n = filt.grid.n_steps
    return DualTrajectory(
        grid=filt.grid,
        Y=np.broadcast_to(Y, batch + Y.shape),
        V=np.broadcast_to(0.0, batch + (n + 1, model.d, model.m)),
        U=np.broadcast_to(policy.schedule, batch + (n + 1, model.m)),
        filt=filt,
    )


# --------------------------------------------------------------------------- #
# Least-squares Monte Carlo
# --------------------------------------------------------------------------- #


def _fit(X: np.ndarray, target: np.ndarray, step: int) -> np.ndarray:
    """Least squares of ``target (N, q)`` on features ``X (N, p)`` with a constant first column.

    Non-constant columns are standardized before solving; columns with no
    spread (every path at the same ``pi``) are dropped.  Returns raw-basis
    coefficients ``(p, q)``.
    """
    mean = X[:, 1:].mean(axis=0)
    sd = X[:, 1:].std(axis=0)
    keep = np.nonzero(sd > 1e-10)[0]
    coef = np.zeros((X.shape[1], target.shape[1]))
    if keep.size == 0:
        coef[0] = target.mean(axis=0)
        return coef
    Z = (X[:, 1 + keep] - mean[keep]) / sd[keep]
    D = np.column_stack([np.ones(len(Z)), Z])
    sol, _, rank, sv = np.linalg.lstsq(D, target, rcond=None)
    if rank < D.shape[1] or sv[-1] < 1e-8 * sv[0]:
        raise RegressionError("regression basis is collinear on the visited posteriors", step)
    coef[1 + keep] = sol[1:] / sd[keep, None]
    coef[0] = sol[0] - (mean[keep] / sd[keep]) @ sol[1:]
    return coef


@dataclass(frozen=True)
class RegressionSolution:
    """Per-step regression tables ``Y_k(pi) = phi(pi) coef_Y[k]`` and likewise for ``V``.

    Both tables cover all ``n + 1`` nodes; ``V`` vanishes at ``T`` where
    ``Y = f`` is constant.
    """

    grid: TimeGrid
    basis: BasisSpec
    coef_Y: np.ndarray
    coef_V: np.ndarray
    m: int

    def Y_at(self, k: int, pi) -> np.ndarray:
        return self.basis.evaluate(pi) @ self.coef_Y[k]

    def V_at(self, k: int, pi) -> np.ndarray:
        phi = self.basis.evaluate(pi)
        d = self.basis.d
        return (phi @ self.coef_V[k]).reshape(phi.shape[:-1] + (d, self.m))

    def trajectory(self, policy: ControlPolicy, filt: FilterTrajectory) -> DualTrajectory:
        """Evaluate the tables along every path of ``filt``."""
        n = filt.grid.n_steps
        if n != self.grid.n_steps:
            raise GridMismatchError("regression tables and filter use different grids")
        pi = filt.pi
        phi = self.basis.evaluate(pi)
        Y = np.einsum("...kp,kpd->...kd", phi, self.coef_Y)
        V = np.einsum("...kp,kpq->...kq", phi, self.coef_V).reshape(pi.shape[:-2] + (n + 1, self.basis.d, self.m))
        t = filt.grid.nodes
        U = np.stack([policy.control(k, t[k], pi[..., k, :]) for k in range(n + 1)], axis=-2)
        return DualTrajectory(filt.grid, Y, V, np.broadcast_to(U, pi.shape[:-2] + (n + 1, self.m)), filt=filt)

    def tables_dict(self) -> dict:
        return {
            "grid": {"T": self.grid.T, "n_steps": self.grid.n_steps},
            "basis": self.basis.to_dict(),
            "m": self.m,
            "coef_Y": self.coef_Y.tolist(),
            "coef_V": self.coef_V.tolist(),
        }

    @staticmethod
    def from_tables(doc: dict) -> "RegressionSolution":
        return RegressionSolution(
            TimeGrid(doc["grid"]["T"], doc["grid"]["n_steps"]),
            BasisSpec(**doc["basis"]),
            np.asarray(doc["coef_Y"], dtype=float),
            np.asarray(doc["coef_V"], dtype=float),
            int(doc["m"]),
        )


def bsde_solve_regression(
    policy: ControlPolicy,
    f,
    bundle: PathBundle,
    basis: BasisSpec | None = None,
    filt: FilterTrajectory | None = None,
) -> RegressionSolution:
    """Least-squares Monte Carlo backward induction for the dual BSDE.

    At each step, from the fitted ``Y_{k+1}``:

    * ``V_k`` regresses ``(Y_{k+1}(pi_{k+1}) - Y_{k+1}(pi_k)) dI_k^T R^-1 / dt``;
      subtracting ``Y_{k+1}(pi_k)``, which is uncorrelated with ``dI_k``,
      only removes variance;
    * ``Y_k`` regresses ``Y_{k+1} + (A Y_{k+1} + H U_k + diag(H V_k^T)
      - V_k H^T pi_k) dt - V_k dI_k``; the last term has conditional mean 0.

    Raises
    ------
    RegressionError
        With the offending time index, if the basis is collinear there.
    """
    model = bundle.model
    filt = filt or wonham_filter(model, bundle)
    basis = basis or BasisSpec(model.d)
    grid, dt = filt.grid, filt.grid.dt
    n, d, m = grid.n_steps, model.d, model.m
    f = np.asarray(f, dtype=float)
    pi, dI = filt.pi, filt.dI
    N = pi.shape[0]
    Rinv = model.R_inv
    t = grid.nodes
    coef_Y = np.zeros((n + 1, basis.size, d))
    coef_V = np.zeros((n + 1, basis.size, d * m))
    coef_Y[n, 0] = f
    phi_next = basis.evaluate(pi[:, n])
    for k in range(n - 1, -1, -1):
        phi = basis.evaluate(pi[:, k])
        y_next = phi_next @ coef_Y[k + 1]
        dY = y_next - phi @ coef_Y[k + 1]
        tgt_V = (dY[:, :, None] * (dI[:, k] @ Rinv.T)[:, None, :] / dt).reshape(N, d * m)
        coef_V[k] = _fit(phi, tgt_V, k)
        V = (phi @ coef_V[k]).reshape(N, d, m)
        U = np.broadcast_to(policy.control(k, t[k], pi[:, k]), (N, m))
        tgt_Y = y_next - bsde_drift(y_next, V, U, pi[:, k], model) * dt - np.einsum("nim,nm->ni", V, dI[:, k])
        coef_Y[k] = _fit(phi, tgt_Y, k)
        phi_next = phi
    return RegressionSolution(grid, basis, coef_Y, coef_V, m)


# --------------------------------------------------------------------------- #
# Co-state
# --------------------------------------------------------------------------- #


def costate_forward(Y, V, U, filt: FilterTrajectory, model: FiniteModel | None = None, scheme: str = "euler", dU=None, dV=None) -> np.ndarray:
    """Forward co-state along a dual trajectory.

    ``dP = (A^T P + pi(Q) Y) dt + (diag(P) - P pi^T) H R^-1 dI
    + (pi U^T + diag(pi) V) dI`` with ``P_0 = Sigma_0 Y_0``.

    ``scheme="milstein"`` needs the sensitivities ``dU`` and ``dV`` of the
    control and of ``V`` to each innovation component (see
    :class:`DualTrajectory`).
    """
    model = model or filt.model
    if scheme not in ("euler", "milstein"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "milstein" and (dU is None or dV is None):
        raise ModelError("the Milstein co-state needs control sensitivities dU and dV")
    A, R = model.A, model.R
    C = model.H @ model.R_inv
    pi, dI, dt = filt.pi, filt.dI, filt.grid.dt
    n = filt.grid.n_steps
    if Y.shape[-2] != n + 1:
        raise GridMismatchError("Y and the filter use different grids")
    P = np.empty(np.broadcast_shapes(Y.shape, pi.shape))
    P[..., 0, :] = np.einsum("...ij,...j->...i", covariance_of(pi[..., 0, :]), Y[..., 0, :])
    for k in range(n):
        p, y, v, u, inc = pi[..., k, :], Y[..., k, :], V[..., k, :, :], U[..., k, :], dI[..., k, :]
        Pk = P[..., k, :]
        drift = Pk @ A + np.einsum("...ij,...j->...i", expected_covariation(A, p), y)
        w = inc @ C.T
        diff = Pk * w - Pk * (p * w).sum(-1, keepdims=True)
        diff += p * (u * inc).sum(-1, keepdims=True) + p * np.einsum("...im,...m->...i", v, inc)
        step = drift * dt + diff
        if scheme == "milstein":
            Sc = covariance_of(p) @ C
            cols = []
            for l in range(model.m):
                cl = C[:, l]
                cols.append(Pk * cl - Pk * (p @ cl)[..., None] + p * u[..., l : l + 1] + p * v[..., :, l])
            for l, j, Ilj in _double_ito_pairs(inc, R, dt):
                cj = C[:, j]
                sl = Sc[..., l]
                bl = cols[l]
                corr = (
                    bl * cj
                    - bl * (p @ cj)[..., None]
                    - Pk * (sl @ cj)[..., None]
                    + sl * u[..., j : j + 1]
                    + sl * v[..., :, j]
                    + p * dU[..., k, l, j][..., None]
                    + p * dV[..., k, l, :, j]
                )
                step = step + Ilj[..., None] * corr
        P[..., k + 1, :] = Pk + step
    return P


# --------------------------------------------------------------------------- #
# Optimal synthesis for two-state chains
# --------------------------------------------------------------------------- #


def _obs_increments(obs, filt: FilterTrajectory) -> np.ndarray:
    if obs is None:
        return filt.dI + filt.pi[..., :-1, :] @ filt.model.H * filt.grid.dt
    return obs.dZ if hasattr(obs, "dZ") else np.asarray(obs, dtype=float)


@dataclass(frozen=True)
class SimplexTable:
    """``y(t_k, p)`` on a uniform grid of ``p = pi_1`` in ``[0, 1]``, shape ``(n+1, d, n_p)``."""

    grid: TimeGrid
    p: np.ndarray
    y: np.ndarray
    y_p: np.ndarray
    y_pp: np.ndarray

    def _locate(self, pk: np.ndarray):
        h = self.p[1] - self.p[0]
        x = np.clip(pk, 0.0, 1.0) / h
        i = np.minimum(x.astype(int), len(self.p) - 2)
        return i, (x - i)[..., None]

    def lookup(self, k: int, pk: np.ndarray):
        """Linear interpolation of ``y``, ``y_p`` and ``y_pp`` at ``p = pk``."""
        i, w = self._locate(pk)
        out = []
        for tab in (self.y, self.y_p, self.y_pp):
            t = tab[k].T
            out.append((1 - w) * t[i] + w * t[i + 1])
        return out


def _two_state_parts(model: FiniteModel, p: np.ndarray):
    e = np.array([1.0, -1.0])
    pi = np.stack([p, 1.0 - p], axis=-1)
    delta = model.H.T @ e
    rd = model.R_inv @ delta
    g = (p * (1 - p))[..., None] * rd
    g_p = (1 - 2 * p)[..., None] * rd
    return e, pi, g, g_p


def synthesis_table(model: FiniteModel, f, grid: TimeGrid, n_p: int = 401, theta: float = 0.5) -> SimplexTable:
    """Solve the backward PDE for ``y(t, p)`` on ``[0, T] x [0, 1]``.

    With ``pi = (p, 1-p)``, ``e = (1, -1)``, ``g = p(1-p) R^-1 H^T e`` and
    ``mu = (A^T pi)_1``, the posterior moves as ``dp = mu dt + g^T dI``.
    Writing ``Y = y(t, p)`` gives ``V = y_p g^T``; inserting the optimal
    control into the BSDE yields

        y_t + mu y_p + 1/2 g^T R g y_pp + A y - H R^-1 H^T Sigma y
            - H g (pi^T y_p) + diag(H g) y_p - (g^T H^T pi) y_p = 0,

    with ``y(T) = f``.  Central differences inside, second-order one-sided
    differences at ``p = 0, 1`` (where ``g`` vanishes and the drift points
    inward), theta-scheme in time.
    """
    if model.d != 2:
        raise ModelError("optimal synthesis is implemented for two-state chains only")
    f = np.asarray(f, dtype=float)
    N, d = n_p, 2
    p = np.linspace(0.0, 1.0, N)
    h = p[1] - p[0]
    e, pis, gs, _ = _two_state_parts(model, p)
    A, H, R, Rinv = model.A, model.H, model.R, model.R_inv
    G = H @ Rinv @ H.T
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for j in range(N):
        pi, g = pis[j], gs[j]
        Sig = p[j] * (1 - p[j]) * np.outer(e, e)
        M0 = A - G @ Sig
        mu = (A.T @ pi)[0]
        diffusion = 0.5 * g @ R @ g
        Hg = H @ g
        ghp = g @ (H.T @ pi)
        if j == 0:
            st1, st2 = [(0, -1.5 / h), (1, 2.0 / h), (2, -0.5 / h)], []
        elif j == N - 1:
            st1, st2 = [(N - 1, 1.5 / h), (N - 2, -2.0 / h), (N - 3, 0.5 / h)], []
        else:
            st1 = [(j - 1, -0.5 / h), (j + 1, 0.5 / h)]
            st2 = [(j - 1, 1 / h**2), (j, -2 / h**2), (j + 1, 1 / h**2)]
        for i in range(d):
            r = i * N + j
            for k in range(d):
                if M0[i, k] != 0.0:
                    add(r, k * N + j, M0[i, k])
            for jj, w in st1:
                add(r, i * N + jj, (mu + Hg[i] - ghp) * w)
                for k in range(d):
                    add(r, k * N + jj, -Hg[i] * pi[k] * w)
            for jj, w in st2:
                add(r, i * N + jj, diffusion * w)
    L = sp.csr_matrix((vals, (rows, cols)), shape=(d * N, d * N))
    I = sp.identity(d * N, format="csc")
    dt = grid.dt
    lhs = spla.splu((I - theta * dt * L).tocsc())
    rhs = (I + (1 - theta) * dt * L).tocsr()
    Y = np.empty((grid.n_steps + 1, d, N))
    y = np.repeat(f[:, None], N, axis=1).ravel()
    Y[-1] = y.reshape(d, N)
    for k in range(grid.n_steps - 1, -1, -1):
        y = lhs.solve(rhs @ y)
        Y[k] = y.reshape(d, N)
    Yp = np.gradient(Y, h, axis=2, edge_order=2)
    Ypp = np.gradient(Yp, h, axis=2, edge_order=2)
    return SimplexTable(grid, p, Y, Yp, Ypp)


def bsde_solve_optimal_synthesis(
    f,
    obs,
    model: FiniteModel,
    grid: TimeGrid | None = None,
    n_p: int = 401,
    scheme: str = "euler",
    table: SimplexTable | None = None,
    filt: FilterTrajectory | None = None,
) -> DualTrajectory:
    """Optimal dual trajectory along observed paths, without regression.

    ``Y_k = y(t_k, pi_k)`` from :func:`synthesis_table`, ``V_k = y_p g^T``,
    ``U_k`` from the optimal law, ``S`` the running estimator and ``P`` the
    forward co-state.  ``scheme`` applies to both the Wonham filter and the
    co-state; with ``"milstein"`` the sensitivities of ``U`` and ``V`` are
    computed from the table's ``p``-derivatives.

    Errors are ``O(dt)`` from time stepping plus ``O(h^2)`` from the
    ``p``-grid of spacing ``h = 1/(n_p - 1)``.  Supports ``d = 1`` (trivial)
    and ``d = 2``.
    """
    f = np.asarray(f, dtype=float)
    filt = filt or wonham_filter(model, obs, grid, scheme)
    grid = filt.grid
    pi = filt.pi
    batch = pi.shape[:-2]
    n, d, m = grid.n_steps, model.d, model.m
    if d == 1:
        Y = np.broadcast_to(f, batch + (n + 1, 1)).copy()
        zeros_U = np.zeros(batch + (n + 1, m))
        V = np.zeros(batch + (n + 1, 1, m))
        S = np.full(batch + (n + 1,), float(f[0]))
        P = np.zeros(batch + (n + 1, 1))
        return DualTrajectory(grid, Y, V, zeros_U, S, P, np.zeros(batch + (n, m, m)), np.zeros(batch + (n, m, 1, m)), filt)
    if d != 2:
        raise ModelError("optimal synthesis is implemented for d <= 2; use bsde_solve_regression")
    table = table or synthesis_table(model, f, grid, n_p)
    if table.grid.n_steps != n:
        raise GridMismatchError("synthesis table and filter use different grids")
    Rinv, H = model.R_inv, model.H
    Y = np.empty(batch + (n + 1, d))
    V = np.empty(batch + (n + 1, d, m))
    U = np.empty(batch + (n + 1, m))
    dU = np.empty(batch + (n, m, m))
    dV = np.empty(batch + (n, m, d, m))
    for k in range(n + 1):
        pk = pi[..., k, 0]
        y, yp, ypp = table.lookup(k, pk)
        Y[..., k, :] = y
        e, pik, g, g_p = _two_state_parts(model, pk)
        v = yp[..., :, None] * g[..., None, :]
        V[..., k, :, :] = v
        U[..., k, :] = optimal_control_law(y, v, pik, model)
        if k == n:
            break
        # p-derivatives of V and U
        v_p = ypp[..., :, None] * g[..., None, :] + yp[..., :, None] * g_p[..., None, :]
        s = (pk * (1 - pk))[..., None]
        s_p = (1 - 2 * pk)[..., None]
        ey, eyp = (y @ e)[..., None], (yp @ e)[..., None]
        Sy_p = (s_p * ey + s * eyp) * e
        u_p = -(Sy_p @ H) @ Rinv.T - np.einsum("...im,...i->...m", v_p, pik) - np.einsum("...im,i->...m", v, e)
        dU[..., k, :, :] = g[..., :, None] * u_p[..., None, :]
        dV[..., k, :, :, :] = g[..., :, None, None] * v_p[..., None, :, :]
    dZ = _obs_increments(obs, filt)
    S = np.empty(batch + (n + 1,))
    S[..., 0] = Y[..., 0, :] @ model.prior
    S[..., 1:] = S[..., :1] - np.cumsum(np.einsum("...km,...km->...k", U[..., :-1, :], dZ), axis=-1)
    P = costate_forward(Y, V, U, filt, model, scheme, dU, dV)
    return DualTrajectory(grid, Y, V, U, S, P, dU, dV, filt)
