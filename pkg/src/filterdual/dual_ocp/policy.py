"""Control policies, regression bases and result containers for the dual problem."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from ..errors import GridMismatchError, ModelError
from ..markov_model import FiniteModel, covariance_of
from ..path_sim import TimeGrid


def optimal_control_law(Y, V, pi, model: FiniteModel) -> np.ndarray:
    """Optimal feedback ``U* = -R^-1 H^T Sigma(pi) Y - V^T pi``.

    Broadcasts over leading axes: ``Y`` is ``(..., d)``, ``V`` is
    ``(..., d, m)`` and ``pi`` is ``(..., d)``.
    """
    Y, V, pi = (np.asarray(a, dtype=float) for a in (Y, V, pi))
    P = np.einsum("...ij,...j->...i", covariance_of(pi), Y)
    return -(P @ model.H) @ model.R_inv.T - np.einsum("...im,...i->...m", V, pi)


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial features of ``pi``: a constant, ``pi_1 .. pi_{d-1}`` and,
    with ``degree=2``, their pairwise products.

    The last coordinate is left out because ``pi`` sums to one.
    """

    d: int
    degree: int = 1

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")

    @property
    def size(self) -> int:
        k = self.d - 1
        return 1 + k + (k * (k + 1) // 2 if self.degree == 2 else 0)

    def evaluate(self, pi) -> np.ndarray:
        pi = np.asarray(pi, dtype=float)
        lin = pi[..., : self.d - 1]
        cols = [np.ones(pi.shape[:-1] + (1,)), lin]
        if self.degree == 2:
            pairs = list(combinations_with_replacement(range(self.d - 1), 2))
            cols.append(np.stack([lin[..., i] * lin[..., j] for i, j in pairs], axis=-1).reshape(pi.shape[:-1] + (len(pairs),)))
        return np.concatenate(cols, axis=-1)

    def to_dict(self) -> dict:
        return {"d": self.d, "degree": self.degree}


@dataclass(frozen=True)
class ControlPolicy:
    """Dual control input ``U``.

    kind ``"deterministic"``
        ``schedule`` holds ``U`` at the grid nodes, ``(n+1, m)``;
        ``schedule_mid`` optionally holds cell midpoints for RK4.
    kind ``"feedback"``
        ``feedback(t, pi)`` maps time and a batch of posteriors to controls.
    kind ``"regression"``
        ``solution`` is a regression BSDE solution; ``U`` is the optimal law
        evaluated on its fitted ``Y`` and ``V``.
    """

    kind: str
    grid: TimeGrid | None = None
    schedule: np.ndarray | None = None
    schedule_mid: np.ndarray | None = None
    feedback: Callable | None = None
    solution: object | None = None
    model: FiniteModel | None = None
    shift: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("deterministic", "feedback", "regression"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "deterministic":
            if self.schedule is None or self.grid is None:
                raise ModelError("deterministic policy needs a schedule and its grid")
            if self.schedule.shape[0] != self.grid.n_steps + 1:
                raise GridMismatchError("schedule length does not match grid")
        if self.kind == "feedback" and self.feedback is None:
            raise ModelError("feedback policy needs a callable")
        if self.kind == "regression" and (self.solution is None or self.model is None):
            raise ModelError("regression policy needs a solution and a model")

    # construction helpers
    @staticmethod
    def zero(model: FiniteModel, grid: TimeGrid) -> "ControlPolicy":
        return ControlPolicy("deterministic", grid, np.zeros((grid.n_steps + 1, model.m)), np.zeros((grid.n_steps, model.m)))

    @staticmethod
    def deterministic(schedule, grid: TimeGrid, schedule_mid=None) -> "ControlPolicy":
        s = np.asarray(schedule, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        mid = None if schedule_mid is None else np.asarray(schedule_mid, dtype=float).reshape(grid.n_steps, -1)
        return ControlPolicy("deterministic", grid, s, mid)

    @staticmethod
    def from_lq(sol) -> "ControlPolicy":
        return ControlPolicy("deterministic", sol.grid, sol.u, sol.u_mid)

    @staticmethod
    def from_feedback(fn: Callable) -> "ControlPolicy":
        return ControlPolicy("feedback", feedback=fn)

    @staticmethod
    def from_regression(solution, model: FiniteModel) -> "ControlPolicy":
        return ControlPolicy("regression", solution.grid, solution=solution, model=model)

    @property
    def is_deterministic(self) -> bool:
        return self.kind == "deterministic"

    def midpoints(self) -> np.ndarray:
        """Schedule at cell midpoints (stored, else cubic-spline interpolated)."""
        if self.schedule_mid is not None:
            return self.schedule_mid
        t = self.grid.nodes
        return CubicSpline(t, self.schedule, axis=0)(t[:-1] + 0.5 * self.grid.dt)

    def shifted(self, delta) -> "ControlPolicy":
        """The policy plus a deterministic schedule ``delta``, ``(n, m)`` or ``(n+1, m)``.

        An ``(n, m)`` schedule is extended to the terminal node by repeating
        its last row.
        """
        delta = np.asarray(delta, dtype=float)
        if delta.ndim == 1:
            delta = delta[:, None]
        if self.grid is not None and len(delta) == self.grid.n_steps:
            delta = np.vstack([delta, delta[-1:]])
        if self.kind == "deterministic":
            return ControlPolicy.deterministic(self.schedule + delta, self.grid)
        base = self.shift if self.shift is not None else 0.0
        return ControlPolicy(self.kind, self.grid, feedback=self.feedback, solution=self.solution, model=self.model, shift=base + delta)

    def control(self, k: int, t: float, pi) -> np.ndarray:
        """Control at step ``k`` (time ``t``) for posteriors ``pi`` of shape ``(..., d)``."""
        pi = np.asarray(pi, dtype=float)
        if self.kind == "deterministic":
            return np.broadcast_to(self.schedule[k], pi.shape[:-1] + self.schedule.shape[1:])
        if self.kind == "feedback":
            u = np.asarray(self.feedback(t, pi), dtype=float)
        else:
            sol = self.solution
            u = optimal_control_law(sol.Y_at(k, pi), sol.V_at(k, pi), pi, self.model)
        if self.shift is not None:
            u = u + self.shift[k]
        return u

    def to_dict(self) -> dict:
        if self.kind == "deterministic":
            return {
                "kind": "deterministic",
                "grid": {"T": self.grid.T, "n_steps": self.grid.n_steps},
                "schedule": self.schedule.tolist(),
            }
        if self.kind == "regression":
            doc = {"kind": "regression", **self.solution.tables_dict()}
            if self.shift is not None:
                doc["shift"] = self.shift.tolist()
            return doc
        raise ModelError("feedback policies wrap arbitrary callables and cannot be serialized")

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class CostReport:
    """Monte Carlo dual cost with its term breakdown.

    ``closed_form`` is the deterministic-policy value, when applicable.
    """

    J_total: float
    terms: dict
    mc_std_error: float
    N: int
    closed_form: float | None = None

    def to_dict(self) -> dict:
        return {
            "J_total": self.J_total,
            "terms": dict(self.terms),
            "mc_std_error": self.mc_std_error,
            "N": self.N,
            "closed_form": self.closed_form,
        }


@dataclass(frozen=True)
class GapReport:
    """Both sides of the cost/error duality and their difference."""

    J: float
    half_mse: float
    gap: float
    se: float
    passed: bool
    N: int
    bias_allowance: float = 0.0

    def to_dict(self) -> dict:
        return {
            "J": self.J,
            "half_mse": self.half_mse,
            "gap": self.gap,
            "se": self.se,
            "pass": bool(self.passed),
            "N": self.N,
            "bias_allowance": self.bias_allowance,
        }


@dataclass
class DualTrajectory:
    """Dual state along a batch of paths.

    Shapes: ``Y (N, n+1, d)``, ``V (N, n+1, d, m)``, ``U (N, n+1, m)``,
    ``S (N, n+1)``, ``P (N, n+1, d)``.  Ito sums use nodes ``0 .. n-1`` of
    ``U`` and ``V``; the terminal node enters time integrals only.  ``dU`` and ``dV`` are optional
    sensitivities of ``U`` and ``V`` to each innovation component,
    ``(N, n, m, m)`` and ``(N, n, m, d, m)``, used by the Milstein costate.
    """

    grid: TimeGrid
    Y: np.ndarray
    V: np.ndarray
    U: np.ndarray
    S: np.ndarray | None = None
    P: np.ndarray | None = None
    dU: np.ndarray | None = None
    dV: np.ndarray | None = None
    filt: object | None = None
