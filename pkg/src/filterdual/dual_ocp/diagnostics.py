"""Monte Carlo evaluation of dual costs, estimators and optimality diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from ..errors import GridMismatchError, ModelError
from ..filters import FilterTrajectory, wonham_filter
from ..lq_dual import lq_solve, marginal_moments
from ..markov_model import FiniteModel, lagrangian, terminal_value
from ..path_sim import PathBundle
from .bsde import RegressionSolution, bsde_solve_deterministic, bsde_solve_regression, deterministic_trajectory
from .policy import BasisSpec, ControlPolicy, CostReport, DualTrajectory, GapReport


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    n = len(x)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


def estimator_S(policy: ControlPolicy, Y0, obs, filt: FilterTrajectory | None = None, prior=None) -> np.ndarray:
    """Running estimator ``S_k = prior^T Y_0 - sum_{j<k} U_j^T dZ_j`` (left-point sum).

    ``Y0`` is ``(d,)`` or ``(N, d)``.  Feedback controls are evaluated along
    ``filt``; a deterministic policy needs no filter when ``prior`` (``pi_0``,
    or ``m_0`` for a linear-Gaussian model) is given.  Returns ``(..., n+1)``.
    """
    dZ = obs.dZ if hasattr(obs, "dZ") else np.asarray(obs, dtype=float)
    if filt is None and not (policy.is_deterministic and prior is not None):
        raise ModelError("estimator_S needs a filter trajectory, or a prior for a deterministic policy")
    grid = filt.grid if filt is not None else policy.grid
    if dZ.shape[-2] != grid.n_steps:
        raise GridMismatchError("observations and filter use different grids")
    t = grid.nodes
    n = grid.n_steps
    if policy.is_deterministic:
        if policy.schedule.shape[0] != n + 1:
            raise GridMismatchError("schedule and observations use different grids")
        incr = np.einsum("...km,km->...k", dZ, policy.schedule[:-1])
    else:
        incr = np.stack(
            [np.einsum("...m,...m->...", policy.control(k, t[k], filt.pi[..., k, :]), dZ[..., k, :]) for k in range(n)],
            axis=-1,
        )
    prior = filt.model.prior if prior is None else np.asarray(prior, dtype=float)
    S0 = np.asarray(Y0, dtype=float) @ prior
    S = np.empty(incr.shape[:-1] + (n + 1,))
    S[..., 0] = S0
    S[..., 1:] = np.expand_dims(S0, -1) - np.cumsum(incr, axis=-1)
    return S


def dual_trajectory(
    policy: ControlPolicy,
    f,
    bundle: PathBundle,
    filt: FilterTrajectory | None = None,
    solution: RegressionSolution | None = None,
) -> DualTrajectory:
    """Dual state ``(Y, V, U, S)`` for ``policy`` on every path of ``bundle``.

    Deterministic policies use the ODE solution; other policies need the
    regression ``solution`` computed under them.
    """
    model = bundle.model
    filt = filt or wonham_filter(model, bundle)
    if policy.is_deterministic:
        dual = deterministic_trajectory(policy, f, model, filt)
    else:
        if solution is None:
            raise ModelError("missing BSDE solution: a feedback policy needs a regression solution")
        dual = solution.trajectory(policy, filt)
    dual.S = estimator_S(policy, dual.Y[..., 0, :], bundle, filt)
    return dual


def cost_samples(dual: DualTrajectory, model: FiniteModel, x0, include_v_terms: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-path initial-variance and running-cost terms of the dual cost.

    The running cost integrates the Lagrangian by the trapezoid rule.

    ``x0`` holds the initial state indices.  ``include_v_terms=False``
    removes every ``V``-dependent part of the Lagrangian; it exists only to
    confirm that the duality check detects a wrong cost.
    """
    filt = dual.filt
    pi0 = filt.pi[..., 0, :]
    Y0 = dual.Y[..., 0, :]
    x0 = np.asarray(x0)
    Yx = np.take_along_axis(np.broadcast_to(Y0, x0.shape + Y0.shape[-1:]), x0[..., None].astype(np.intp), axis=-1)[..., 0]
    init = 0.5 * (Yx - np.einsum("...i,...i->...", Y0, pi0)) ** 2
    V = dual.V if include_v_terms else np.zeros_like(dual.V)
    L = lagrangian(dual.Y, V, dual.U, filt.pi, model)
    running = integrate.trapezoid(L, dx=filt.grid.dt, axis=-1)
    return np.broadcast_to(init, running.shape), running


def closed_form_cost(policy: ControlPolicy, f, model: FiniteModel) -> float:
    """Cost of a deterministic schedule: ``1/2 Y_0^T Sigma_0 Y_0 + int (1/2 u^T R u + 1/2 Y^T rho_t(Q) Y) dt``.

    Simpson's rule on the policy grid, ``rho_t = exp(A^T t) pi_0``.
    """
    if not policy.is_deterministic:
        raise ModelError("closed-form cost exists only for deterministic schedules")
    Y = bsde_solve_deterministic(policy, f, model)
    _, EQ = marginal_moments(model, policy.grid)
    u = policy.schedule
    run = 0.5 * np.einsum("tk,kl,tl->t", u, model.R, u) + 0.5 * np.einsum("ti,tij,tj->t", Y, EQ, Y)
    return float(0.5 * Y[0] @ model.Sigma0 @ Y[0] + integrate.simpson(run, x=policy.grid.nodes))


def cost_J(
    policy: ControlPolicy,
    f,
    bundle: PathBundle,
    filt: FilterTrajectory | None = None,
    solution: RegressionSolution | None = None,
    dual: DualTrajectory | None = None,
) -> CostReport:
    """Monte Carlo dual cost ``E[1/2 |Y_0^T (X_0 - pi_0)|^2 + sum_k L_k dt]``.

    Deterministic policies also get the closed-form value.
    """
    model = bundle.model
    dual = dual or dual_trajectory(policy, f, bundle, filt, solution)
    init, running = cost_samples(dual, model, bundle.states[:, 0])
    J, se = _mean_se(init + running)
    cf = closed_form_cost(policy, f, model) if policy.is_deterministic else None
    return CostReport(J, {"initial": float(init.mean()), "running": float(running.mean())}, se, len(init), cf)


def gap_samples(dual: DualTrajectory, bundle: PathBundle, f, include_v_terms: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-path dual cost and half squared estimation error ``1/2 (S_T - f^T X_T)^2``."""
    init, running = cost_samples(dual, bundle.model, bundle.states[:, 0], include_v_terms)
    err = 0.5 * (dual.S[..., -1] - bundle.terminal_values(f)) ** 2
    return init + running, err


def gap_report(cost, err, bias_allowance: float = 0.0, sigmas: float = 3.0) -> GapReport:
    """Paired comparison of per-path costs and half squared errors.

    Passes iff ``|gap| <= sigmas (se + bias_allowance)``.
    """
    cost = np.asarray(cost, dtype=float)
    err = np.asarray(err, dtype=float)
    gap, se = _mean_se(cost - err)
    ok = abs(gap) <= sigmas * (se + bias_allowance)
    return GapReport(float(cost.mean()), float(err.mean()), gap, se, bool(ok), len(err), float(bias_allowance))


def duality_gap(
    policy: ControlPolicy,
    f,
    bundle: PathBundle,
    filt: FilterTrajectory | None = None,
    solution: RegressionSolution | None = None,
    dual: DualTrajectory | None = None,
    bias_allowance: float = 0.0,
    include_v_terms: bool = True,
) -> GapReport:
    """Compare ``J(U)`` with ``1/2 E|S_T - f^T X_T|^2`` on one bundle.

    The two sides are paired per path, so the standard error is that of the
    per-path difference.  See :func:`gap_report` for the pass rule and
    :func:`calibrate_bias` for the allowance.
    """
    dual = dual or dual_trajectory(policy, f, bundle, filt, solution)
    cost, err = gap_samples(dual, bundle, f, include_v_terms)
    return gap_report(cost, err, bias_allowance)


@dataclass(frozen=True)
class BiasCalibration:
    """Discretization bias of the gap estimated from steps ``dt`` and ``2 dt``.

    ``allowance`` is ``|gap(2dt) - gap(dt)|``, the first-order extrapolated
    bias remaining at ``dt``.  ``halves`` records that the fine gap is at most
    ``ratio`` times the coarse one, up to three standard errors of the fine
    gap; Monte Carlo noise is shared by both levels and does not shrink with
    ``dt``.
    """

    gap_fine: float
    gap_coarse: float
    se_fine: float
    diff_se: float
    allowance: float
    halves: bool

    def to_dict(self) -> dict:
        return {
            "gap_fine": self.gap_fine,
            "gap_coarse": self.gap_coarse,
            "se_fine": self.se_fine,
            "diff_se": self.diff_se,
            "allowance": self.allowance,
            "halves": bool(self.halves),
        }


def calibrate_bias(fine_samples, coarse_samples, ratio: float = 0.6) -> BiasCalibration:
    """Bias allowance from per-path gap samples ``cost - err`` at ``dt`` and ``2 dt``.

    Both arrays must come from the same (nested) paths so the difference is paired.
    """
    fine = np.asarray(fine_samples, dtype=float)
    coarse = np.asarray(coarse_samples, dtype=float)
    if fine.shape != coarse.shape:
        raise GridMismatchError("bias calibration needs paired samples from the same paths")
    g1, se1 = _mean_se(fine)
    g2 = float(coarse.mean())
    _, dse = _mean_se(fine - coarse)
    halves = abs(g1) <= ratio * abs(g2) + 3.0 * se1
    return BiasCalibration(g1, g2, se1, dse, abs(g2 - g1), bool(halves))


def running_estimator_check(dual: DualTrajectory, filt: FilterTrajectory | None = None) -> np.ndarray:
    """Per-path ``max_k |pi_k^T Y_k - S_k|``; zero along an optimal trajectory."""
    filt = filt or dual.filt
    return np.abs(np.einsum("...ki,...ki->...k", filt.pi, dual.Y) - dual.S).max(axis=-1)


@dataclass(frozen=True)
class MartingaleReport:
    """Mean curve of ``M_t = V(Y_t; pi_t) - int_0^t L ds`` and its trend statistic.

    ``trend_stat`` is the mean per-path least-squares slope of ``M`` against
    ``t`` divided by its standard error.
    """

    t: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    slope: float
    trend_stat: float

    def to_dict(self) -> dict:
        return {"slope": self.slope, "trend_stat": self.trend_stat, "N_nodes": len(self.t)}


def martingale_process(dual: DualTrajectory, model: FiniteModel) -> np.ndarray:
    """``M_k`` per path, ``(N, n+1)``."""
    filt = dual.filt
    L = lagrangian(dual.Y, dual.V, dual.U, filt.pi, model)
    integral = integrate.cumulative_trapezoid(L, dx=filt.grid.dt, axis=-1, initial=0.0)
    return terminal_value(dual.Y, filt.pi) - integral


def martingale_diagnostic(
    policy: ControlPolicy | None,
    f,
    bundle: PathBundle,
    filt: FilterTrajectory | None = None,
    solution: RegressionSolution | None = None,
    dual: DualTrajectory | None = None,
) -> MartingaleReport:
    """Mean of ``M_t`` over the bundle with a linear-trend t-statistic.

    Flat (statistic within +-3) for the optimal policy; decreasing for a
    suboptimal one.
    """
    dual = dual or dual_trajectory(policy, f, bundle, filt, solution)
    M = martingale_process(dual, bundle.model)
    t = dual.grid.nodes
    tc = t - t.mean()
    slopes = (M - M.mean(axis=-1, keepdims=True)) @ tc / (tc @ tc)
    s, se = _mean_se(slopes)
    mean = M.mean(axis=0)
    return MartingaleReport(t, mean, M.std(axis=0, ddof=1) / np.sqrt(len(M)), s, s / se if se > 0 else 0.0)


def value_function(f, bundle: PathBundle | None = None, filt: FilterTrajectory | None = None) -> tuple[float, float]:
    """``E[V(f; pi_T)]`` with its Monte Carlo standard error."""
    if filt is None:
        if bundle is None:
            raise ModelError("value_function needs a bundle or a filter trajectory")
        filt = wonham_filter(bundle.model, bundle)
    return _mean_se(terminal_value(np.asarray(f, dtype=float), filt.pi[..., -1, :]))


@dataclass
class PolicyIterationResult:
    """Policies ``U^0 .. U^n`` and the cost report of each."""

    policies: list[ControlPolicy] = field(default_factory=list)
    reports: list[CostReport] = field(default_factory=list)
    solutions: list[RegressionSolution] = field(default_factory=list)

    @property
    def costs(self) -> list[float]:
        return [r.J_total for r in self.reports]


def policy_iteration(
    f,
    bundle: PathBundle,
    basis: BasisSpec | None = None,
    n_iters: int = 3,
    filt: FilterTrajectory | None = None,
) -> PolicyIterationResult:
    """Iterate ``U^{k+1} = -R^-1 H^T Sigma(pi) Y^k(t, pi) - V^k(t, pi)^T pi``.

    ``U^0`` is the optimal deterministic (LQ) schedule.  Every policy is
    evaluated by regression on ``bundle``; ``n_iters`` improvements are made,
    so ``n_iters + 1`` reports are returned.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be at least 1")
    model = bundle.model
    filt = filt or wonham_filter(model, bundle)
    basis = basis or BasisSpec(model.d)
    policy = ControlPolicy.from_lq(lq_solve(model, f, filt.grid))
    out = PolicyIterationResult()
    for it in range(n_iters + 1):
        sol = bsde_solve_regression(policy, f, bundle, basis, filt)
        rep = cost_J(policy, f, bundle, filt, sol)
        out.policies.append(policy)
        out.reports.append(rep)
        out.solutions.append(sol)
        if it < n_iters:
            policy = ControlPolicy.from_regression(sol, model)
    return out
