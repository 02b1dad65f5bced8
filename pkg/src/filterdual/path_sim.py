"""Exact simulation of hidden Markov paths and their noisy observations.

Every path draws from its own counter-based stream keyed by
``(master_seed, path_index, tag)``, so a bundle is bit-identical no matter
how paths are split across chunks or worker threads.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import GridMismatchError, ModelError
from .markov_model import Diffusion1DModel, FiniteModel, LinearGaussianModel, model_from_dict, model_to_dict

TAG_INIT = 0
TAG_JUMPS = 1
TAG_OBS = 2
TAG_PROCESS = 3


def path_rng(master_seed: int, index: int, tag: int) -> np.random.Generator:
    """Independent generator for one (path, purpose) pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([master_seed, index, tag])))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / n_steps`` on ``[0, T]``."""

    T: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if not self.T > 0:
            raise ValueError("T must be positive")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.n_steps % factor:
            raise GridMismatchError(f"{self.n_steps} steps are not divisible by {factor}")
        return TimeGrid(self.T, self.n_steps // factor)


@dataclass(frozen=True)
class StatePath:
    """Piecewise-constant chain path: ``states[j]`` holds on ``[jump_times[j], jump_times[j+1])``.

    ``jump_times[0] = 0`` marks the initial state.
    """

    jump_times: np.ndarray
    states: np.ndarray

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        """State index at every grid node."""
        idx = np.searchsorted(self.jump_times, grid.nodes, side="right") - 1
        return self.states[idx]

    @property
    def n_jumps(self) -> int:
        return len(self.states) - 1


@dataclass(frozen=True)
class ObsPath:
    """Observation increments ``dZ[k]`` over ``[t_k, t_{k+1}]``, shape ``(n_steps, m)``."""

    dZ: np.ndarray

    @property
    def Z(self) -> np.ndarray:
        m = self.dZ.shape[-1]
        return np.concatenate([np.zeros((1, m)), np.cumsum(self.dZ, axis=0)])


@dataclass
class PathBundle:
    """Monte Carlo bundle of ``N`` paths on one grid.

    ``states`` is ``(N, n+1)`` state indices for a finite model or
    ``(N, n+1, d)`` Euler states for a linear-Gaussian model (``d = 1`` for
    a scalar diffusion).  ``dZ`` is
    ``(N, n, m)``.  ``path_offset`` is the global index of the first path,
    nonzero for chunks of a larger bundle.
    """

    model: FiniteModel | LinearGaussianModel | Diffusion1DModel
    grid: TimeGrid
    master_seed: int
    states: np.ndarray
    dZ: np.ndarray
    state_paths: list[StatePath] | None = None
    path_offset: int = 0

    @property
    def N(self) -> int:
        return self.dZ.shape[0]

    def obs_path(self, i: int) -> ObsPath:
        return ObsPath(self.dZ[i])

    def terminal_values(self, f) -> np.ndarray:
        """``f^T X_T`` per path."""
        f = np.asarray(f, dtype=float)
        if self.states.ndim == 2:
            return f[self.states[:, -1]]
        return self.states[:, -1] @ f

    def coarsen(self, factor: int) -> "PathBundle":
        """Same paths on a grid ``factor`` times coarser (nested noise)."""
        grid = self.grid.coarsen(factor)
        dZ = self.dZ.reshape(self.N, grid.n_steps, factor, -1).sum(axis=2)
        return PathBundle(
            self.model, grid, self.master_seed, self.states[:, ::factor].copy(), dZ,
            self.state_paths, self.path_offset,
        )


# --------------------------------------------------------------------------- #
# Samplers
# --------------------------------------------------------------------------- #


def _as_rng(seed, tag: int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, tuple):
        return path_rng(seed[0], seed[1], tag)
    return path_rng(int(seed), 0, tag)


def sample_ctmc(model: FiniteModel, grid: TimeGrid, seed) -> StatePath:
    """Gillespie simulation of the chain on ``[0, T]``.

    ``seed`` is an int, a ``(master_seed, path_index)`` pair, or a generator
    (then used for both the initial draw and the jumps).
    """
    rng0 = _as_rng(seed, TAG_INIT)
    rng1 = _as_rng(seed, TAG_JUMPS)
    cdf = np.cumsum(model.prior)
    s = min(int(np.searchsorted(cdf, rng0.random() * cdf[-1], side="right")), model.d - 1)
    rates = -np.diag(model.A)
    times, states = [0.0], [s]
    t = 0.0
    while rates[s] > 0:
        t += rng1.exponential(1.0 / rates[s])
        if t >= grid.T:
            break
        p = np.clip(model.A[s], 0.0, None)
        p[s] = 0.0
        c = np.cumsum(p)
        s = min(int(np.searchsorted(c, rng1.random() * c[-1], side="right")), model.d - 1)
        times.append(t)
        states.append(s)
    return StatePath(np.array(times), np.array(states, dtype=np.int16))


def exact_drift_increments(path: StatePath, H: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """``int h(X_s) ds`` over each grid cell, exact for the piecewise-constant path."""
    bp = np.append(path.jump_times, grid.T)
    h = H[path.states]
    cum = np.vstack([np.zeros((1, H.shape[1])), np.cumsum(h * np.diff(bp)[:, None], axis=0)])
    nodes = grid.nodes
    F = np.stack([np.interp(nodes, bp, cum[:, j]) for j in range(H.shape[1])], axis=-1)
    return np.diff(F, axis=0)


def _noise(rng: np.random.Generator, grid: TimeGrid, R: np.ndarray) -> np.ndarray:
    xi = rng.standard_normal((grid.n_steps, R.shape[0]))
    return np.sqrt(grid.dt) * xi @ np.linalg.cholesky(R).T


def sample_obs(path: StatePath, model: FiniteModel, grid: TimeGrid, seed) -> ObsPath:
    """Observation increments: exact drift integral plus ``sqrt(dt) R^(1/2)`` noise."""
    dZ = exact_drift_increments(path, model.H, grid) + _noise(_as_rng(seed, TAG_OBS), grid, model.R)
    return ObsPath(dZ)


def sample_lg_path(model: LinearGaussianModel, grid: TimeGrid, seed) -> tuple[np.ndarray, ObsPath]:
    """Euler-Maruyama path of ``dX = AX dt + sigma dB`` and ``dZ = HX dt + dW``.

    Returns the ``(n+1, d)`` states at nodes and the observations.
    """
    dt = grid.dt
    x = _as_rng(seed, TAG_INIT).multivariate_normal(model.m0, model.Sigma0, method="eigh")
    eta = _as_rng(seed, TAG_PROCESS).standard_normal((grid.n_steps, model.d)) @ model.sigma.T * np.sqrt(dt)
    X = np.empty((grid.n_steps + 1, model.d))
    X[0] = x
    for k in range(grid.n_steps):
        X[k + 1] = X[k] + model.A @ X[k] * dt + eta[k]
    dZ = X[:-1] @ model.H.T * dt + _noise(_as_rng(seed, TAG_OBS), grid, model.R)
    return X, ObsPath(dZ)


def _sample_prior(model: Diffusion1DModel, rng: np.random.Generator, n_nodes: int = 4097) -> float:
    # inverse CDF of the prior density tabulated on the domain
    x = np.linspace(*model.domain, n_nodes)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (model.prior(x[1:]) + model.prior(x[:-1])) * np.diff(x))])
    return float(np.interp(rng.random() * cdf[-1], cdf, x))


def sample_diffusion_path(model: Diffusion1DModel, grid: TimeGrid, seed) -> tuple[np.ndarray, ObsPath]:
    """Euler-Maruyama path of a scalar diffusion, reflected at the domain ends.

    Returns the ``(n+1, 1)`` states at nodes and the observations.
    """
    dt = grid.dt
    lo, hi = model.domain
    X = np.empty(grid.n_steps + 1)
    X[0] = _sample_prior(model, _as_rng(seed, TAG_INIT))
    xi = _as_rng(seed, TAG_PROCESS).standard_normal(grid.n_steps) * np.sqrt(dt)
    for k in range(grid.n_steps):
        x = X[k] + float(model.drift(X[k])) * dt + float(model.sigma(X[k])) * xi[k]
        # reflect into [lo, hi]
        if x < lo:
            x = min(2 * lo - x, hi)
        elif x > hi:
            x = max(2 * hi - x, lo)
        X[k + 1] = x
    dZ = model.obs_values(X[:-1]) * dt + _noise(_as_rng(seed, TAG_OBS), grid, model.R)
    return X[:, None], ObsPath(dZ)


# --------------------------------------------------------------------------- #
# Bundles
# --------------------------------------------------------------------------- #


def _one_path(model, grid: TimeGrid, master_seed: int, index: int):
    key = (master_seed, index)
    if isinstance(model, LinearGaussianModel):
        X, obs = sample_lg_path(model, grid, key)
        return X, obs.dZ, None
    if isinstance(model, Diffusion1DModel):
        X, obs = sample_diffusion_path(model, grid, key)
        return X, obs.dZ, None
    sp = sample_ctmc(model, grid, key)
    return sp.on_grid(grid), sample_obs(sp, model, grid, key).dZ, sp


def simulate_bundle(
    model: FiniteModel | LinearGaussianModel | Diffusion1DModel,
    grid: TimeGrid,
    N: int,
    master_seed: int,
    threads: int = 1,
    start: int = 0,
) -> PathBundle:
    """Simulate paths ``start .. start+N-1`` of the bundle keyed by ``master_seed``."""
    if N < 1:
        raise ModelError("empty bundle")
    indices = range(start, start + N)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda i: _one_path(model, grid, master_seed, i), indices))
    else:
        results = [_one_path(model, grid, master_seed, i) for i in indices]
    states = np.stack([r[0] for r in results])
    dZ = np.stack([r[1] for r in results])
    paths = None if results[0][2] is None else [r[2] for r in results]
    return PathBundle(model, grid, master_seed, states, dZ, paths, start)


def iter_bundle_chunks(model, grid: TimeGrid, N: int, master_seed: int, chunk: int = 5000, threads: int = 1) -> Iterator[PathBundle]:
    """Yield the bundle in consecutive chunks so large ``N`` fits in memory."""
    if N < 1:
        raise ModelError("empty bundle")
    for start in range(0, N, chunk):
        yield simulate_bundle(model, grid, min(chunk, N - start), master_seed, threads, start)


def innovation(obs, filt) -> np.ndarray:
    """``dI_k = dZ_k - pi_k(h) dt`` for one path or a batch.

    ``obs`` is an :class:`ObsPath` or a ``dZ`` array; ``filt`` is a filter
    trajectory carrying ``pi``, ``model`` and ``grid``.
    """
    dZ = obs.dZ if isinstance(obs, ObsPath) else np.asarray(obs)
    pi = filt.pi
    if dZ.shape[-2] != pi.shape[-2] - 1:
        raise GridMismatchError(f"observations have {dZ.shape[-2]} steps, filter has {pi.shape[-2] - 1}")
    return dZ - pi[..., :-1, :] @ filt.model.H * filt.grid.dt


# --------------------------------------------------------------------------- #
# CSV export
# --------------------------------------------------------------------------- #


def _fmt(x: float) -> str:
    return repr(float(x))


def export_bundle(bundle: PathBundle, directory) -> Path:
    """Write ``path_<i>.csv`` files and ``manifest.json``.

    Row ``k`` holds ``t_k``, the state at ``t_k`` and ``dZ`` over
    ``[t_k, t_{k+1}]``; the final row has empty ``dZ`` cells.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    m = bundle.dZ.shape[-1]
    lg = bundle.states.ndim == 3
    state_cols = [f"x_{j + 1}" for j in range(bundle.states.shape[-1])] if lg else ["state"]
    header = ["t", *state_cols, *[f"dZ_{j + 1}" for j in range(m)]]
    t = bundle.grid.nodes
    width = len(str(bundle.path_offset + bundle.N - 1))
    for i in range(bundle.N):
        with open(out / f"path_{bundle.path_offset + i:0{width}d}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(bundle.grid.n_steps + 1):
                st = [_fmt(v) for v in bundle.states[i, k]] if lg else [str(int(bundle.states[i, k]))]
                dz = [_fmt(v) for v in bundle.dZ[i, k]] if k < bundle.grid.n_steps else [""] * m
                w.writerow([_fmt(t[k]), *st, *dz])
    manifest = {
        "model": model_to_dict(bundle.model),
        "grid": {"T": bundle.grid.T, "n_steps": bundle.grid.n_steps},
        "master_seed": bundle.master_seed,
        "N": bundle.N,
        "path_offset": bundle.path_offset,
        "columns": header,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_bundle(directory) -> PathBundle:
    """Read a bundle written by :func:`export_bundle` (jump times are not stored)."""
    src = Path(directory)
    try:
        man = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no bundle manifest in {src}") from None
    model = model_from_dict(man["model"])
    grid = TimeGrid(man["grid"]["T"], man["grid"]["n_steps"])
    files = sorted(src.glob("path_*.csv"))
    if len(files) != man["N"]:
        raise ModelError(f"manifest lists {man['N']} paths, found {len(files)} files")
    lg = not isinstance(model, FiniteModel)
    n_state = model.d if isinstance(model, LinearGaussianModel) else 1
    states, dZ = [], []
    for fp in files:
        data = np.genfromtxt(fp, delimiter=",", skip_header=1)
        data = data.reshape(grid.n_steps + 1, -1)
        st = data[:, 1 : 1 + n_state]
        states.append(st if lg else st[:, 0].astype(np.int16))
        dZ.append(data[:-1, 1 + n_state :])
    return PathBundle(model, grid, man["master_seed"], np.stack(states), np.stack(dZ), None, man.get("path_offset", 0))
