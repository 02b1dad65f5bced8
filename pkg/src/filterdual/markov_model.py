"""Hidden Markov model definitions and the algebra of the dual control problem.

Conventions
-----------
* ``A[i, j]`` is the jump rate from state ``i`` to state ``j``; the posterior
  moves as ``d pi = A.T @ pi dt + ...``.
* In a :class:`FiniteModel` the observation matrix ``H`` is ``d x m`` and
  ``h(e_i) = H[i]``.  In a :class:`LinearGaussianModel` it is ``m x d`` and
  ``h(x) = H @ x``.  Nothing in the package transposes between the two.

All array functions broadcast over leading axes, so a batch of ``N`` paths is
handled by passing ``(N, d)`` vectors, ``(N, d, m)`` matrices and so on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy import integrate

from .errors import ModelError

SIMPLEX_TOL = 1e-9
GENERATOR_TOL = 1e-10


def _matrix(x, name: str, ndim: int = 2) -> np.ndarray:
    a = np.array(x, dtype=float)
    if a.ndim != ndim:
        raise ModelError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    a.setflags(write=False)
    return a


def as_simplex(v, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Return ``v`` renormalized onto the probability simplex.

    Vectors within ``tol`` of the simplex (entrywise negativity and total mass)
    are clipped and rescaled; anything further away raises :class:`ModelError`.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < -tol) or np.any(np.abs(v.sum(axis=-1) - 1.0) > tol):
        raise ModelError(f"vector is not within {tol:g} of the probability simplex")
    v = np.clip(v, 0.0, None)
    return v / v.sum(axis=-1, keepdims=True)


def validate_generator(A) -> list[str]:
    """List every way ``A`` fails to be a rate matrix; empty means valid."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        return [f"matrix is not square: shape {A.shape}"]
    problems = []
    for i, s in enumerate(A.sum(axis=1)):
        if abs(s) > GENERATOR_TOL:
            problems.append(f"row {i} sums to {s:.6g}")
    off = ~np.eye(A.shape[0], dtype=bool)
    for i, j in zip(*np.nonzero((A < 0) & off)):
        problems.append(f"off-diagonal A[{i},{j}] = {A[i, j]:.6g} is negative")
    return problems


# --------------------------------------------------------------------------- #
# Model types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class FiniteModel:
    """Continuous-time Markov chain on ``{e_1..e_d}`` observed in white noise."""

    A: np.ndarray
    H: np.ndarray
    R: np.ndarray
    prior: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        A = _matrix(self.A, "A")
        H = np.array(self.H, dtype=float)
        if H.ndim == 1:
            H = H[:, None]
        H = _matrix(H, "H")
        R = _matrix(np.atleast_2d(np.asarray(self.R, dtype=float)), "R")
        problems = validate_generator(A)
        if problems:
            raise ModelError("invalid generator: " + "; ".join(problems))
        d = A.shape[0]
        if H.shape[0] != d:
            raise ModelError(f"H must have {d} rows, got shape {H.shape}")
        if R.shape != (H.shape[1], H.shape[1]):
            raise ModelError(f"R must be {H.shape[1]}x{H.shape[1]}, got {R.shape}")
        _check_spd(R, "R")
        prior = np.asarray(self.prior, dtype=float)
        if prior.shape != (d,):
            raise ModelError(f"prior must have length {d}")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise ModelError("prior must be nonnegative and sum to 1")
        prior = prior.copy()
        prior.setflags(write=False)
        if not self.T > 0:
            raise ModelError("horizon T must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "T", float(self.T))

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def R_inv(self) -> np.ndarray:
        return np.linalg.inv(self.R)

    @property
    def Sigma0(self) -> np.ndarray:
        return covariance_of(self.prior)

    def replace(self, **changes) -> "FiniteModel":
        fields = dict(A=self.A, H=self.H, R=self.R, prior=self.prior, T=self.T)
        fields.update(changes)
        return FiniteModel(**fields)


@dataclass(frozen=True)
class LinearGaussianModel:
    """``dX = A X dt + sigma dB``, ``dZ = H X dt + dW`` with Gaussian prior.

    ``H`` is ``m x d`` here, unlike :class:`FiniteModel`.
    """

    A: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    Sigma0: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        A = _matrix(np.atleast_2d(np.asarray(self.A, dtype=float)), "A")
        H = _matrix(np.atleast_2d(np.asarray(self.H, dtype=float)), "H")
        Q = _matrix(np.atleast_2d(np.asarray(self.Q, dtype=float)), "Q")
        R = _matrix(np.atleast_2d(np.asarray(self.R, dtype=float)), "R")
        S0 = _matrix(np.atleast_2d(np.asarray(self.Sigma0, dtype=float)), "Sigma0")
        d = A.shape[0]
        if A.shape != (d, d) or Q.shape != (d, d) or S0.shape != (d, d):
            raise ModelError("A, Q and Sigma0 must be square with matching size")
        if H.shape[1] != d:
            raise ModelError(f"H must be m x {d}, got {H.shape}")
        if R.shape != (H.shape[0], H.shape[0]):
            raise ModelError("R must be m x m")
        for name, M in (("Q", Q), ("R", R), ("Sigma0", S0)):
            if not np.allclose(M, M.T, atol=1e-12):
                raise ModelError(f"{name} must be symmetric")
        _check_spd(R, "R")
        for name, M in (("Q", Q), ("Sigma0", S0)):
            if np.linalg.eigvalsh(M).min() < -1e-12:
                raise ModelError(f"{name} must be positive semidefinite")
        m0 = np.array(self.m0, dtype=float).reshape(d)
        m0.setflags(write=False)
        if not self.T > 0:
            raise ModelError("horizon T must be positive")
        for name, val in (("A", A), ("H", H), ("Q", Q), ("R", R), ("Sigma0", S0), ("m0", m0)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "T", float(self.T))

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def R_inv(self) -> np.ndarray:
        return np.linalg.inv(self.R)

    @property
    def sigma(self) -> np.ndarray:
        """A square root of the process-noise covariance ``Q``."""
        w, U = np.linalg.eigh(self.Q)
        return U * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class GaussianDensity:
    """Normal density, callable on arrays; used as a serializable prior."""

    mean: float = 0.0
    std: float = 1.0

    def __call__(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.std
        return np.exp(-0.5 * z * z) / (self.std * np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class Diffusion1DModel:
    """Scalar Ito diffusion on a truncated interval, observed through ``h``.

    ``drift``, ``sigma`` and ``obs`` are callables on arrays of nodes; ``obs``
    returns an ``(n,)`` or ``(n, m)`` array.  The interval ``domain`` is a
    modelling truncation of the real line.
    """

    drift: Callable
    sigma: Callable
    obs: Callable | Sequence[Callable]
    R: np.ndarray
    prior: Callable
    domain: tuple[float, float]
    T: float = 1.0
    eps: float = 1e-6

    def __post_init__(self):
        lo, hi = map(float, self.domain)
        if not hi > lo:
            raise ModelError("domain must be a nonempty interval")
        object.__setattr__(self, "domain", (lo, hi))
        R = _matrix(np.atleast_2d(np.asarray(self.R, dtype=float)), "R")
        _check_spd(R, "R")
        object.__setattr__(self, "R", R)
        if not self.T > 0:
            raise ModelError("horizon T must be positive")
        probe = np.linspace(lo, hi, 513)
        if np.any(np.asarray(self.sigma(probe)) < self.eps):
            raise ModelError(f"sigma drops below {self.eps:g} on the domain (ellipticity)")
        dens = np.asarray(self.prior(probe), dtype=float)
        if np.any(dens < 0):
            raise ModelError("prior density is negative somewhere on the domain")
        mass = integrate.quad(lambda x: float(self.prior(x)), lo, hi, limit=200)[0]
        if abs(mass - 1.0) > 1e-3:
            raise ModelError(f"prior density integrates to {mass:.6g} on the domain")
        if self.obs_values(probe[:1]).shape[1] != R.shape[0]:
            raise ModelError("obs dimension does not match R")

    def obs_values(self, x) -> np.ndarray:
        """Evaluate ``h`` at nodes ``x`` as an ``(n, m)`` array."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if callable(self.obs):
            out = np.asarray(self.obs(x), dtype=float)
            if out.ndim == 0:
                out = np.full(x.shape, float(out))
        else:
            out = np.stack([np.broadcast_to(np.asarray(h(x), dtype=float), x.shape) for h in self.obs], axis=-1)
        return out.reshape(x.shape[0], -1)

    @property
    def m(self) -> int:
        return self.R.shape[0]


def _check_spd(M: np.ndarray, name: str) -> None:
    if not np.allclose(M, M.T, atol=1e-12):
        raise ModelError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ModelError(f"{name} must be positive definite") from None


# --------------------------------------------------------------------------- #
# Algebraic primitives
# --------------------------------------------------------------------------- #


def _diag_embed(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v
    return out


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., :, None] * b[..., None, :]


def jump_covariation(A, i: int) -> np.ndarray:
    """Quadratic-variation rate ``Q(e_i) = sum_j A_ij (e_j - e_i)(e_j - e_i)^T``.

    ``i`` is zero-based.
    """
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    if not 0 <= i < d:
        raise IndexError(f"state index {i} out of range for {d} states")
    D = np.eye(d) - np.eye(d)[i]
    return (D.T * A[i]) @ D


def expected_covariation(A, mu) -> np.ndarray:
    """``mu(Q) = diag(A^T mu) - A^T diag(mu) - diag(mu) A`` for (batches of) ``mu``."""
    A = np.asarray(A, dtype=float)
    mu = np.asarray(mu, dtype=float)
    AT_mu = mu @ A
    return _diag_embed(AT_mu) - A.T * mu[..., None, :] - mu[..., :, None] * A


def covariance_of(pi) -> np.ndarray:
    """Conditional covariance ``diag(pi) - pi pi^T`` of the indicator vector."""
    pi = np.asarray(pi, dtype=float)
    return _diag_embed(pi) - _outer(pi, pi)


def _basis_index(x, d: int) -> int:
    if np.ndim(x) == 0:
        i = int(x)
        if not 0 <= i < d:
            raise ModelError(f"state index {i} out of range")
        return i
    x = np.asarray(x, dtype=float)
    if not (x.shape == (d,) and np.isin(x, (0.0, 1.0)).all() and x.sum() == 1.0):
        raise ModelError("x must be a standard basis vector e_i")
    return int(np.argmax(x))


def cost_density(y, v, u, x, model: FiniteModel) -> float:
    """Running cost ``1/2 y^T Q(x) y + 1/2 (u + v^T x)^T R (u + v^T x)``.

    ``x`` is a basis vector or a zero-based state index.
    """
    i = _basis_index(x, model.d)
    y = np.asarray(y, dtype=float)
    w = np.asarray(u, dtype=float) + np.asarray(v, dtype=float)[i]
    return 0.5 * y @ jump_covariation(model.A, i) @ y + 0.5 * w @ model.R @ w


def lagrangian(y, v, u, mu, model: FiniteModel):
    """Control Lagrangian: the ``mu``-average of :func:`cost_density`.

    ``1/2 y^T mu(Q) y + 1/2 u^T R u + u^T R v^T mu + 1/2 mu^T diag(v R v^T)``
    """
    y, v, u, mu = (np.asarray(a, dtype=float) for a in (y, v, u, mu))
    R, A = model.R, model.A
    # y^T mu(Q) y without forming mu(Q)
    quad = 0.5 * (np.einsum("...j,...j->...", mu @ A, y * y) - 2.0 * np.einsum("...i,...i->...", mu * y, y @ A.T))
    uR = u @ R
    uRu = 0.5 * np.einsum("...k,...k->...", uR, u)
    if not v.any():
        return quad + uRu
    cross = np.einsum("...l,...l->...", uR, np.einsum("...il,...i->...l", v, mu))
    vRv = 0.5 * np.einsum("...i,...i->...", mu, np.einsum("...ik,...ik->...i", v @ R, v))
    return quad + uRu + cross + vRv


class HamiltonianPartials(NamedTuple):
    Hp: np.ndarray
    Hy: np.ndarray
    Hv: np.ndarray
    Hu: np.ndarray


def bsde_drift(y, v, u, mu, model: FiniteModel) -> np.ndarray:
    """Drift of the dual BSDE in innovation form: ``-Ay - Hu - diag(Hv^T) + v H^T mu``."""
    y, v, u, mu = (np.asarray(a, dtype=float) for a in (y, v, u, mu))
    H = model.H
    diag_HvT = np.einsum("ik,...ik->...i", H, v)
    return -(y @ model.A.T) - u @ H.T - diag_HvT + np.einsum("...ik,...k->...i", v, mu @ H)


def hamiltonian(y, v, u, p, mu, model: FiniteModel):
    """``H(y,v,u,p;mu) = p^T(-Ay - Hu - diag(Hv^T) + v H^T mu) - L(y,v,u;mu)``."""
    p = np.asarray(p, dtype=float)
    return np.einsum("...i,...i->...", p, bsde_drift(y, v, u, mu, model)) - lagrangian(y, v, u, mu, model)


def hamiltonian_partials(y, v, u, p, mu, model: FiniteModel) -> HamiltonianPartials:
    """Gradients of :func:`hamiltonian` in ``p``, ``y``, ``v`` and ``u``.

    ``Hu`` is the true gradient ``-(H^T p + R u + R v^T mu)``; its zero set is
    the optimal-control law.
    """
    y, v, u, p, mu = (np.asarray(a, dtype=float) for a in (y, v, u, p, mu))
    A, H, R = model.A, model.H, model.R
    Hp = bsde_drift(y, v, u, mu, model)
    Hy = -(p @ A) - np.einsum("...ij,...j->...i", expected_covariation(A, mu), y)
    Hv = (
        -p[..., :, None] * H
        + _outer(p, mu @ H)
        - _outer(mu, u @ R)
        - mu[..., :, None] * (v @ R)
    )
    Hu = -(p @ H) - u @ R - np.einsum("...ik,kl,...i->...l", v, R, mu)
    return HamiltonianPartials(Hp, Hy, Hv, Hu)


def terminal_value(y, mu):
    """``V(y; mu) = 1/2 sum_i |y_i - mu^T y|^2 mu_i``, half the variance of ``y`` under ``mu``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    mean = np.einsum("...i,...i->...", y, mu)
    return 0.5 * np.einsum("...i,...i->...", (y - mean[..., None]) ** 2, mu)


# --------------------------------------------------------------------------- #
# Grid discretization of a scalar diffusion
# --------------------------------------------------------------------------- #


def grid_generator(model: Diffusion1DModel, n: int) -> tuple[FiniteModel, np.ndarray]:
    """Markov-chain approximation of a 1-D diffusion on ``n`` uniform nodes.

    Central differences for the diffusion part.  The drift is also centred
    where that keeps the off-diagonal rates nonnegative and upwinded
    elsewhere.  Rows at both ends reflect.  Node weights of the returned prior
    are ``density * spacing``, renormalized.
    """
    if n < 3:
        raise ModelError("grid needs at least 3 nodes")
    lo, hi = model.domain
    x = np.linspace(lo, hi, n)
    dx = x[1] - x[0]
    sig = np.broadcast_to(np.asarray(model.sigma(x), dtype=float), x.shape)
    if np.any(sig < model.eps):
        raise ModelError("sigma below the ellipticity bound at a grid node")
    a = np.broadcast_to(np.asarray(model.drift(x), dtype=float), x.shape)
    diff = 0.5 * sig**2 / dx**2
    central = diff >= np.abs(a) / (2 * dx)
    up = np.where(central, diff + a / (2 * dx), diff + np.clip(a, 0.0, None) / dx)
    down = np.where(central, diff - a / (2 * dx), diff + np.clip(-a, 0.0, None) / dx)
    A = np.zeros((n, n))
    idx = np.arange(n - 1)
    A[idx, idx + 1] = up[:-1]
    A[idx + 1, idx] = down[1:]
    A[np.arange(n), np.arange(n)] = -A.sum(axis=1)
    H = model.obs_values(x)
    w = np.clip(np.asarray(model.prior(x), dtype=float), 0.0, None)
    if w.sum() <= 0:
        raise ModelError("prior density vanishes on every grid node")
    return FiniteModel(A=A, H=H, R=model.R, prior=w / w.sum(), T=model.T), x


# --------------------------------------------------------------------------- #
# JSON
# --------------------------------------------------------------------------- #


def _poly_to_json(fn) -> list[float]:
    if isinstance(fn, Polynomial):
        return [float(c) for c in fn.coef]
    raise ModelError("only numpy Polynomial callables can be serialized")


def model_to_dict(model) -> dict:
    """JSON-ready dict; matrices are row-major nested lists."""
    if isinstance(model, FiniteModel):
        return {
            "type": "finite",
            "d": model.d,
            "A": model.A.tolist(),
            "H": model.H.tolist(),
            "R": model.R.tolist(),
            "prior": model.prior.tolist(),
            "T": model.T,
        }
    if isinstance(model, LinearGaussianModel):
        return {
            "type": "linear_gaussian",
            "A": model.A.tolist(),
            "H": model.H.tolist(),
            "Q": model.Q.tolist(),
            "R": model.R.tolist(),
            "m0": model.m0.tolist(),
            "Sigma0": model.Sigma0.tolist(),
            "T": model.T,
        }
    if isinstance(model, Diffusion1DModel):
        if not isinstance(model.prior, GaussianDensity):
            raise ModelError("only GaussianDensity priors can be serialized")
        obs = [model.obs] if callable(model.obs) else list(model.obs)
        return {
            "type": "diffusion1d",
            "drift": _poly_to_json(model.drift),
            "sigma": _poly_to_json(model.sigma),
            "obs": [_poly_to_json(h) for h in obs],
            "R": model.R.tolist(),
            "prior": {"gaussian": {"mean": model.prior.mean, "std": model.prior.std}},
            "domain": list(model.domain),
            "T": model.T,
        }
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_dict(doc: dict):
    kind = doc.get("type", "finite")
    try:
        if kind == "finite":
            model = FiniteModel(A=doc["A"], H=doc["H"], R=doc["R"], prior=doc["prior"], T=doc.get("T", 1.0))
            if "d" in doc and doc["d"] != model.d:
                raise ModelError(f"d={doc['d']} does not match A ({model.d} states)")
            return model
        if kind == "linear_gaussian":
            return LinearGaussianModel(
                A=doc["A"], H=doc["H"], Q=doc["Q"], R=doc["R"],
                m0=doc["m0"], Sigma0=doc["Sigma0"], T=doc.get("T", 1.0),
            )
        if kind == "diffusion1d":
            obs = [Polynomial(c) for c in doc["obs"]]
            g = doc["prior"]["gaussian"]
            return Diffusion1DModel(
                drift=Polynomial(doc["drift"]),
                sigma=Polynomial(doc["sigma"]),
                obs=obs[0] if len(obs) == 1 else obs,
                R=doc["R"],
                prior=GaussianDensity(g["mean"], g["std"]),
                domain=tuple(doc["domain"]),
                T=doc.get("T", 1.0),
            )
    except KeyError as exc:
        raise ModelError(f"model document is missing field {exc}") from None
    raise ModelError(f"unknown model type {kind!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))


def canonical_model(T: float = 1.0) -> FiniteModel:
    """Symmetric two-state chain with rate 1, ``h = (1, 0)``, ``R = 1``, uniform prior."""
    return FiniteModel(
        A=[[-1.0, 1.0], [1.0, -1.0]],
        H=[[1.0], [0.0]],
        R=[[1.0]],
        prior=[0.5, 0.5],
        T=T,
    )
