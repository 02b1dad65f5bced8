"""Command line entry point: ``filterdual simulate | filter | dual | lq | acceptance``.

Every subcommand reads one JSON config and writes JSON reports and CSV
curves under the output directory.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure, 4 acceptance failure.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .. import __version__
from ..dual_ocp import (
    BasisSpec,
    ControlPolicy,
    bsde_solve_optimal_synthesis,
    bsde_solve_regression,
    calibrate_bias,
    cost_J,
    cost_samples,
    dual_trajectory,
    gap_report,
    gap_samples,
    martingale_diagnostic,
    policy_iteration,
    running_estimator_check,
    value_function,
)
from ..errors import ConfigError, GridMismatchError, ModelError, NumericalError
from ..filters import export_trajectory, grid_kushner, kalman_bucy, mc_kalman, wonham_filter
from ..lq_dual import dual_estimator_lg, lg_dual_solution, lq_solve, riccati_duality_check
from ..markov_model import Diffusion1DModel, FiniteModel, GaussianDensity, LinearGaussianModel, covariance_of, model_to_dict
from ..path_sim import PathBundle, TimeGrid, export_bundle, load_bundle, simulate_bundle
from .acceptance import run_acceptance
from .config import ExperimentConfig, validate

EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPTANCE = 2, 3, 4
FILTER_KINDS = ("wonham", "kalman", "grid-kushner", "mc-kalman")
DUAL_ACTIONS = ("cost", "gap", "policy-iter", "martingale", "synthesis")


def _handle_errors(fn):
    """Map library exceptions to exit codes with a one-line message."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ModelError, GridMismatchError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    return wrapper


def _write_json(doc: dict, path: Path, schema: str | None = None) -> None:
    if schema is not None:
        validate(doc, schema)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, columns: list[str], rows: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)]
    lines += [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(rows)]
    path.write_text("\n".join(lines) + "\n")


def _out_dir(cfg: ExperimentConfig | None, out: str | None) -> Path:
    if out:
        return Path(out)
    return Path(cfg.output_dir if cfg is not None else "out")


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        raise ConfigError("--config is required")
    return ExperimentConfig.load(path)


def _bundle_for(out: Path) -> PathBundle:
    src = out / "bundle"
    if not (src / "manifest.json").exists():
        raise ConfigError(f"missing prerequisite: bundle at {src} (run 'filterdual simulate' first)")
    return load_bundle(src)


def _f_for(cfg: ExperimentConfig, d: int) -> np.ndarray:
    f = np.asarray(cfg.f, dtype=float)
    if f.shape != (d,):
        raise ConfigError(f"f has length {len(f)}, model state dimension is {d}")
    return f


def _require_finite(model, what: str) -> FiniteModel:
    if not isinstance(model, FiniteModel):
        raise ConfigError(f"{what} needs a finite-state model, got {type(model).__name__}")
    return model


common_options = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment config (JSON)."),
    click.option("--out", envvar="FILTERDUAL_OUT", type=click.Path(file_okay=False), help="Output directory."),
    click.option(
        "--threads",
        envvar="FILTERDUAL_THREADS",
        type=click.IntRange(min=1),
        default=lambda: os.cpu_count() or 1,
        show_default="machine parallelism",
        help="Worker threads for path simulation.",
    ),
    click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the master seed."),
]


def with_common(fn):
    for opt in reversed(common_options):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(version=__version__, prog_name="filterdual")
def cli():
    """Estimation/control duality experiments for hidden Markov models."""


# --------------------------------------------------------------------------- #
# simulate
# --------------------------------------------------------------------------- #


@cli.command()
@with_common
@_handle_errors
def simulate(config_path, out, threads, seed):
    """Simulate the configured bundle and write it as CSV plus manifest."""
    cfg = _load_config(config_path)
    model = cfg.model_obj()
    grid = TimeGrid(cfg.grid["T"], cfg.grid["n_steps"])
    master = cfg.bundle["master_seed"] if seed is None else seed
    bundle = simulate_bundle(model, grid, cfg.bundle["N"], master, threads)
    dest = export_bundle(bundle, _out_dir(cfg, out) / "bundle")
    validate(json.loads((dest / "manifest.json").read_text()), "manifest")
    click.echo(f"wrote {bundle.N} paths to {dest}")


# --------------------------------------------------------------------------- #
# filter
# --------------------------------------------------------------------------- #


def _linear_twin(model: Diffusion1DModel) -> LinearGaussianModel | None:
    """Linear-Gaussian model with the same law, if the diffusion is linear."""
    obs = model.obs
    if not callable(obs):
        if len(obs) != 1:
            return None
        obs = obs[0]
    try:
        drift, sig, obs = (np.asarray(p.coef, dtype=float) for p in (model.drift, model.sigma, obs))
    except AttributeError:
        return None
    if len(drift) > 2 or len(sig) != 1 or len(obs) > 2 or not isinstance(model.prior, GaussianDensity):
        return None
    if drift[0] != 0.0 or obs[0] != 0.0:
        return None
    a = drift[1] if len(drift) == 2 else 0.0
    h = obs[1] if len(obs) == 2 else 0.0
    return LinearGaussianModel(
        A=[[a]], H=[[h]], Q=[[sig[0] ** 2]], R=model.R, m0=[model.prior.mean], Sigma0=[[model.prior.std**2]], T=model.T
    )


@cli.command(name="filter")
@with_common
@click.option("--kind", type=click.Choice(FILTER_KINDS), required=True, help="Filter to run on the bundle.")
@_handle_errors
def filter_cmd(config_path, out, threads, seed, kind):
    """Run a filter on the simulated bundle; writes trajectories and a summary."""
    cfg = _load_config(config_path)
    out_dir = _out_dir(cfg, out)
    bundle = _bundle_for(out_dir)
    model = bundle.model
    dest = out_dir / "filter" / kind
    summary: dict = {"kind": kind, "N": bundle.N}
    if kind in ("wonham", "mc-kalman"):
        _require_finite(model, f"filter kind '{kind}'")
        f = _f_for(cfg, model.d)
        if kind == "wonham":
            traj = wonham_filter(model, bundle, scheme=cfg.filter.get("scheme", "euler"))
            est = traj.estimate(f)[:, -1]
        else:
            traj = mc_kalman(model, bundle)
            est = traj.m[:, -1] @ f
        target = bundle.terminal_values(f)
        summary["f"] = f.tolist()
    elif kind == "kalman":
        if not isinstance(model, LinearGaussianModel):
            raise ConfigError(f"filter kind 'kalman' needs a linear-Gaussian model, got {type(model).__name__}")
        f = _f_for(cfg, model.d)
        traj = kalman_bucy(model, bundle)
        est, target = traj.m[:, -1] @ f, bundle.terminal_values(f)
        summary["f"] = f.tolist()
    else:
        if not isinstance(model, Diffusion1DModel):
            raise ConfigError(f"filter kind 'grid-kushner' needs a diffusion1d model, got {type(model).__name__}")
        n = int(cfg.filter.get("grid_n", 101))
        traj = grid_kushner(model, n, bundle, scheme=cfg.filter.get("scheme", "euler"))
        est, target = traj.mean()[:, -1], bundle.states[:, -1, 0]
        summary["grid_n"] = n
        twin = _linear_twin(model)
        if twin is not None:
            diff = np.abs(est - kalman_bucy(twin, bundle).m[:, -1, 0])
            summary["kalman_comparison"] = {
                "mean_abs_diff": float(diff.mean()),
                "max_abs_diff": float(diff.max()),
                "prior_std": float(model.prior.std),
            }
    sq = (est - target) ** 2
    summary["terminal_estimates"] = [float(v) for v in est]
    summary["mse"] = float(sq.mean())
    summary["mse_se"] = float(sq.std(ddof=1) / np.sqrt(len(sq))) if len(sq) > 1 else 0.0
    width = len(str(bundle.N - 1))
    for i in range(bundle.N):
        export_trajectory(traj, dest / "trajectories" / f"path_{bundle.path_offset + i:0{width}d}.csv", index=i)
    _write_json(summary, dest / "summary.json", "filter_summary")
    click.echo(f"{kind}: MSE {summary['mse']:.6g} +- {summary['mse_se']:.2g} over {bundle.N} paths -> {dest}")


# --------------------------------------------------------------------------- #
# dual
# --------------------------------------------------------------------------- #


def _policy_dual(cfg: ExperimentConfig, bundle: PathBundle, f, filt):
    """Dual trajectory of the configured policy on ``bundle``; returns ``(name, policy, dual)``."""
    model, grid = bundle.model, bundle.grid
    kind = cfg.policy["kind"]
    if kind == "zero":
        policy = ControlPolicy.zero(model, grid)
    elif kind == "lq":
        policy = ControlPolicy.from_lq(lq_solve(model, f, grid))
    elif kind == "deterministic":
        sched = np.asarray(cfg.policy.get("schedule", []), dtype=float)
        if sched.ndim != 2 or sched.shape[1] != model.m:
            raise ConfigError(f"policy.schedule must be a list of {model.m}-vectors")
        if len(sched) != grid.n_steps + 1:
            factor = (len(sched) - 1) // grid.n_steps if grid.n_steps else 0
            if factor < 1 or (len(sched) - 1) != factor * grid.n_steps:
                raise GridMismatchError(f"schedule has {len(sched)} nodes, grid has {grid.n_steps + 1}")
            sched = sched[::factor]
        policy = ControlPolicy.deterministic(sched, grid)
    elif kind == "regression":
        lq = ControlPolicy.from_lq(lq_solve(model, f, grid))
        basis = BasisSpec(model.d, cfg.basis.get("degree", 1))
        sol0 = bsde_solve_regression(lq, f, bundle, basis, filt)
        policy = ControlPolicy.from_regression(sol0, model)
        sol = bsde_solve_regression(policy, f, bundle, basis, filt)
        return kind, policy, dual_trajectory(policy, f, bundle, filt, sol)
    else:
        n_p = int(cfg.filter.get("n_p", 401))
        dual = bsde_solve_optimal_synthesis(f, bundle, model, n_p=n_p, filt=filt)
        return kind, None, dual
    return kind, policy, dual_trajectory(policy, f, bundle, filt)


def _dual_curve(dual, path: Path) -> None:
    t = dual.grid.nodes
    d, m = dual.Y.shape[-1], dual.U.shape[-1]
    cols = ["t"] + [f"Y_{i + 1}" for i in range(d)] + [f"U_{j + 1}" for j in range(m)] + ["S"]
    rows = np.column_stack([t, dual.Y.mean(axis=0), dual.U.mean(axis=0), dual.S.mean(axis=0)])
    _write_csv(path, cols, rows)


@cli.command()
@with_common
@click.option("--action", type=click.Choice(DUAL_ACTIONS), required=True, help="Dual computation to run.")
@_handle_errors
def dual(config_path, out, threads, seed, action):
    """Dual optimal control on the simulated bundle: costs, duality gap and diagnostics."""
    cfg = _load_config(config_path)
    out_dir = _out_dir(cfg, out)
    bundle = _bundle_for(out_dir)
    model = _require_finite(bundle.model, "dual")
    f = _f_for(cfg, model.d)
    filt = wonham_filter(model, bundle)
    dest = out_dir / "dual" / action

    if action == "cost":
        name, policy, dt_ = _policy_dual(cfg, bundle, f, filt)
        if policy is not None:
            rep = cost_J(policy, f, bundle, filt, dual=dt_).to_dict()
        else:
            init, running = cost_samples(dt_, model, bundle.states[:, 0])
            tot = init + running
            rep = {
                "J_total": float(tot.mean()),
                "terms": {"initial": float(init.mean()), "running": float(running.mean())},
                "mc_std_error": float(tot.std(ddof=1) / np.sqrt(len(tot))),
                "N": len(tot),
                "closed_form": None,
            }
        rep["policy"] = name
        _write_json(rep, dest / "report.json", "cost_report")
        _dual_curve(dt_, dest / "mean_trajectory.csv")
        click.echo(f"J({name}) = {rep['J_total']:.6g} +- {rep['mc_std_error']:.2g}")

    elif action == "gap":
        name, _, dual_f = _policy_dual(cfg, bundle, f, filt)
        cost, err = gap_samples(dual_f, bundle, f)
        doc_cal = None
        allowance = 0.0
        if bundle.grid.n_steps % 2 == 0:
            bc = bundle.coarsen(2)
            _, _, dual_c = _policy_dual(cfg, bc, f, wonham_filter(model, bc))
            cost_c, err_c = gap_samples(dual_c, bc, f)
            cal = calibrate_bias(cost - err, cost_c - err_c, cfg.tolerance("c1_halving_ratio"))
            allowance, doc_cal = cal.allowance, cal.to_dict()
        rep = gap_report(cost, err, allowance, cfg.tolerance("c1_gap_sigmas"))
        doc = {**rep.to_dict(), "policy": name}
        if doc_cal is not None:
            doc["calibration"] = doc_cal
            doc["pass"] = bool(rep.passed and doc_cal["halves"])
        _write_json(doc, dest / "report.json", "gap_report")
        click.echo(f"gap({name}) = {rep.gap:.3g}, se {rep.se:.2g}: {'PASS' if doc['pass'] else 'FAIL'}")

    elif action == "policy-iter":
        res = policy_iteration(f, bundle, BasisSpec(model.d, cfg.basis.get("degree", 1)), cfg.iterations, filt)
        costs = res.costs
        doc = {
            "costs": costs,
            "se": [r.mc_std_error for r in res.reports],
            "monotone": all(b <= a for a, b in zip(costs, costs[1:])),
            "iterations": cfg.iterations,
            "N": bundle.N,
        }
        _write_json(doc, dest / "report.json", "policy_iteration")
        for i, (pol, sol) in enumerate(zip(res.policies, res.solutions)):
            _write_json(sol.tables_dict(), dest / f"solution_{i}.json")
        click.echo("J: " + " -> ".join(f"{c:.6g}" for c in costs))

    elif action == "martingale":
        name, _, dual_ = _policy_dual(cfg, bundle, f, filt)
        rep = martingale_diagnostic(None, f, bundle, dual=dual_)
        _write_csv(dest / "curve.csv", ["t", "mean_M", "se_M"], np.column_stack([rep.t, rep.mean, rep.se]))
        _write_json({**rep.to_dict(), "policy": name, "N": bundle.N}, dest / "report.json", "martingale_report")
        click.echo(f"trend statistic ({name}): {rep.trend_stat:.3g}")

    else:
        n_p = int(cfg.filter.get("n_p", 401))
        scheme = cfg.filter.get("scheme", "euler")
        dual_ = bsde_solve_optimal_synthesis(f, bundle, model, n_p=n_p, scheme=scheme)
        fl = dual_.filt
        fX = bundle.terminal_values(f)
        init, running = cost_samples(dual_, model, bundle.states[:, 0])
        tot = init + running
        V, V_se = value_function(f, filt=fl)
        P_err = np.abs(np.einsum("...kij,...kj->...ki", covariance_of(fl.pi), dual_.Y) - dual_.P).max(axis=(-2, -1))
        doc = {
            "N": bundle.N,
            "scheme": scheme,
            "mean_abs_terminal_error": float(np.abs(dual_.S[:, -1] - fl.estimate(f)[:, -1]).mean()),
            "std_fX_T": float(fX.std(ddof=1)) if bundle.N > 1 else 0.0,
            "mean_costate_error": float(P_err.mean()),
            "running_estimator_sup": float(running_estimator_check(dual_).mean()),
            "J": float(tot.mean()),
            "J_se": float(tot.std(ddof=1) / np.sqrt(len(tot))) if bundle.N > 1 else 0.0,
            "value": V,
            "value_se": V_se if bundle.N > 1 else 0.0,
        }
        _write_json(doc, dest / "report.json", "synthesis_summary")
        d, m = model.d, model.m
        cols = (
            ["t"]
            + [f"pi_{i + 1}" for i in range(d)]
            + [f"Y_{i + 1}" for i in range(d)]
            + [f"U_{j + 1}" for j in range(m)]
            + ["S"]
            + [f"P_{i + 1}" for i in range(d)]
        )
        rows = np.column_stack([dual_.grid.nodes, fl.pi[0], dual_.Y[0], dual_.U[0], dual_.S[0], dual_.P[0]])
        _write_csv(dest / "path_0.csv", cols, rows)
        click.echo(f"synthesis: mean |S_T - pi_T(f)| = {doc['mean_abs_terminal_error']:.3g}")


# --------------------------------------------------------------------------- #
# lq
# --------------------------------------------------------------------------- #


@cli.command()
@with_common
@_handle_errors
def lq(config_path, out, threads, seed):
    """Deterministic LQ dual: Riccati path, costate, control and value."""
    cfg = _load_config(config_path)
    model = cfg.model_obj()
    out_dir = _out_dir(cfg, out)
    dest = out_dir / "lq"
    grid = TimeGrid(cfg.grid["T"], cfg.grid["n_steps"])
    if isinstance(model, FiniteModel):
        f = _f_for(cfg, model.d)
        sol = lq_solve(model, f, grid)
        dest.mkdir(parents=True, exist_ok=True)
        sol.save_json(dest / "solution.json")
        sol.save_csv(dest / "solution.csv")
        doc = {"model_type": "finite", "value": sol.value, "y0": sol.y[0].tolist()}
        _write_json(doc, dest / "report.json", "lq_report")
        click.echo(f"LQ value {sol.value:.10g}")
        return
    if not isinstance(model, LinearGaussianModel):
        raise ConfigError(f"lq needs a finite or linear-Gaussian model, got {type(model).__name__}")
    f = _f_for(cfg, model.d)
    y, u = lg_dual_solution(model, f, grid)
    doc = {"model_type": "linear_gaussian", "y0": y[0].tolist(), "riccati_deviation": riccati_duality_check(model, grid)}
    cols = ["t"] + [f"y_{i + 1}" for i in range(model.d)] + [f"u_{j + 1}" for j in range(model.m)]
    _write_csv(dest / "solution.csv", cols, np.column_stack([grid.nodes, y, u]))
    if (out_dir / "bundle" / "manifest.json").exists():
        bundle = load_bundle(out_dir / "bundle")
        if model_to_dict(bundle.model) != model_to_dict(model) or bundle.grid != grid:
            raise ConfigError("bundle on disk was simulated from a different model or grid")
        S = dual_estimator_lg(model, f, bundle)
        doc["dual_estimates"] = [float(v) for v in S]
        doc["kalman_max_abs_diff"] = float(np.abs(S - kalman_bucy(model, bundle).m[:, -1] @ f).max())
    _write_json(doc, dest / "report.json", "lq_report")
    click.echo(f"Riccati duality deviation {doc['riccati_deviation']:.3g}")


# --------------------------------------------------------------------------- #
# acceptance
# --------------------------------------------------------------------------- #


@cli.command()
@with_common
@click.option("--profile", type=click.Choice(["quick", "full"]), default="quick", show_default=True)
@_handle_errors
def acceptance(config_path, out, threads, seed, profile):
    """Run the self-contained acceptance suite; exit 4 if any criterion fails.

    A config, when given, only supplies tolerance overrides and the output
    directory.
    """
    cfg = ExperimentConfig.load(config_path) if config_path else None
    tol = cfg.all_tolerances() if cfg is not None else None
    seed = 7 if seed is None else seed
    report, timings = run_acceptance(profile, seed, threads, tol, progress=lambda r: click.echo(r.line()))
    dest = _out_dir(cfg, out) / "acceptance"
    _write_json(report, dest / f"report_{profile}.json", "acceptance_report")
    _write_json({k: v for k, v in timings.items()}, dest / f"timings_{profile}.json")
    verdict = "all criteria passed" if report["all_passed"] else "FAILED"
    click.echo(f"acceptance ({profile}): {verdict}; report in {dest}")
    if not report["all_passed"]:
        sys.exit(EXIT_ACCEPTANCE)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
