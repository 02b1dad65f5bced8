import json

import numpy as np
import pytest
from scipy import integrate, linalg

from filterdual.dual_ocp import ControlPolicy, closed_form_cost
from filterdual.errors import ModelError
from filterdual.filters import kalman_bucy, kalman_riccati
from filterdual.lq_dual import (
    control_riccati,
    dre_forward,
    dual_estimator_lg,
    lg_dual_solution,
    lq_solve,
    marginal_moments,
    riccati_duality_check,
)
from filterdual.markov_model import LinearGaussianModel, covariance_of, expected_covariation
from filterdual.path_sim import TimeGrid, simulate_bundle


def test_marginal_law_matches_matrix_exponential(asym, grid):
    rho, EQ = marginal_moments(asym, grid)
    exact = linalg.expm(asym.A.T) @ asym.prior
    assert np.abs(rho[-1] - exact).max() < 1e-12
    assert np.allclose(EQ[-1], expected_covariation(asym.A, exact), atol=1e-12)


def test_dre_without_observations_is_the_state_covariance(asym, grid):
    model = asym.replace(H=np.zeros((3, 1)))
    S = dre_forward(model, grid)
    rho, _ = marginal_moments(model, grid)
    assert np.abs(S - covariance_of(rho)).max() < 1e-10


def error_covariance_oracle(model, K, T=1.0):
    """Error covariance of a linear estimator with gain path ``K(t)``, by solve_ivp."""
    d = model.d
    A, H, R = model.A, model.H, model.R

    def rhs(t, x):
        P = x.reshape(d, d)
        Kt = K(t)
        rho = linalg.expm(A.T * t) @ model.prior
        M = A.T - Kt @ H.T
        return (M @ P + P @ M.T + expected_covariation(A, rho) + Kt @ R @ Kt.T).ravel()

    sol = integrate.solve_ivp(rhs, (0.0, T), covariance_of(model.prior).ravel(), rtol=1e-11, atol=1e-13)
    return sol.y[:, -1].reshape(d, d)


@pytest.mark.parametrize("f", [[1.0, 0.0, 0.0], [1.0, -1.0, 2.0]])
def test_lq_value_equals_half_error_variance_of_chain_kalman(asym, grid, f):
    f = np.array(f)
    sol = lq_solve(asym, f, grid)
    Sb = sol.SigmaBar
    assert sol.value == pytest.approx(0.5 * f @ Sb[-1] @ f, abs=1e-9)
    fine = TimeGrid(1.0, 4000)
    Sf = dre_forward(asym, fine)

    def K(t):
        k = min(int(round(t / fine.dt)), fine.n_steps)
        return Sf[k] @ asym.H @ asym.R_inv

    P = error_covariance_oracle(asym, K)
    assert sol.value == pytest.approx(0.5 * f @ P @ f, rel=1e-3)


def test_canonical_lq_value(canon, grid):
    sol = lq_solve(canon, [1.0, 0.0], grid)
    assert sol.value == pytest.approx(0.5 * sol.SigmaBar[-1, 0, 0], abs=1e-10)
    assert 0.0 < sol.value < 0.125


def test_lq_schedule_is_optimal_among_perturbations(asym, grid):
    f = np.array([1.0, -1.0, 2.0])
    sol = lq_solve(asym, f, grid)
    best = closed_form_cost(ControlPolicy.from_lq(sol), f, asym)
    assert best == pytest.approx(sol.value, rel=1e-8)
    t = grid.nodes
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, w = rng.normal(scale=0.3), rng.uniform(1, 6)
        bumped = ControlPolicy.deterministic(sol.u + a * np.sin(w * t)[:, None], grid)
        assert closed_form_cost(bumped, f, asym) > best


def test_lq_rejects_wrong_terminal_shape(canon, grid):
    with pytest.raises(ModelError):
        lq_solve(canon, [1.0, 0.0, 0.0], grid)


def test_lq_solution_files(canon, grid, tmp_path):
    sol = lq_solve(canon, [1.0, 0.0], grid)
    sol.save_json(tmp_path / "lq.json")
    doc = json.loads((tmp_path / "lq.json").read_text())
    assert doc["value"] == sol.value and len(doc["y"]) == grid.n_steps + 1
    sol.save_csv(tmp_path / "lq.csv")
    data = np.loadtxt(tmp_path / "lq.csv", delimiter=",", skiprows=1)
    assert np.array_equal(data[:, 1:3], sol.y)


def oscillator():
    return LinearGaussianModel(
        A=[[0.0, 1.0], [-2.0, -0.3]], H=[[1.0, 0.0]], Q=np.diag([0.1, 0.7]), R=[[0.4]], m0=[1.0, -0.5], Sigma0=np.diag([0.4, 0.2])
    )


def test_filter_and_control_riccati_agree():
    lg = oscillator()
    g = TimeGrid(1.0, 500)
    assert riccati_duality_check(lg, g) < 1e-9
    assert np.abs(control_riccati(lg, g) - kalman_riccati(lg, g)).max() < 1e-9


def test_scalar_lg_dual_solution_by_hand():
    a, h, r = -1.0, 2.0, 0.5
    lg = LinearGaussianModel(A=[[a]], H=[[h]], Q=[[0.0]], R=[[r]], m0=[0.0], Sigma0=[[1.0]])
    g = TimeGrid(1.0, 1000)
    y, u = lg_dual_solution(lg, [1.0], g)
    # with Q = 0: 1/S solves d(1/S)/dt = -2a (1/S) + h^2/r
    c = h * h / r
    t = g.nodes
    S = 1.0 / (np.exp(-2 * a * t) + c / (-2 * a) * (np.exp(-2 * a * t) - 1.0))
    assert np.allclose(u[:, 0], -h / r * S * y[:, 0], atol=1e-8)
    # y solves dy/dt = (-a + c S) y backward from 1
    ref = integrate.solve_ivp(
        lambda s, z: (-a + c / (np.exp(-2 * a * s) + c / (-2 * a) * (np.exp(-2 * a * s) - 1.0))) * z,
        (1.0, 0.0), [1.0], rtol=1e-12, atol=1e-14, dense_output=True,
    )
    assert np.abs(y[:, 0] - ref.sol(t)[0]).max() < 1e-8


def test_dual_estimator_reproduces_kalman_mean():
    lg = oscillator()
    g = TimeGrid(1.0, 1000)
    b = simulate_bundle(lg, g, 50, 4)
    f = np.array([1.0, 0.5])
    S = dual_estimator_lg(lg, f, b)
    assert np.abs(S - kalman_bucy(lg, b).m[:, -1] @ f).max() < 1e-5


def test_dual_estimator_degenerate_cases():
    lg = oscillator()
    g = TimeGrid(1.0, 200)
    b = simulate_bundle(lg, g, 5, 1)
    assert np.allclose(dual_estimator_lg(lg, [0.0, 0.0], b), 0.0)
    blind = LinearGaussianModel(A=lg.A, H=[[0.0, 0.0]], Q=lg.Q, R=lg.R, m0=lg.m0, Sigma0=lg.Sigma0)
    f = np.array([1.0, 2.0])
    expected = f @ linalg.expm(lg.A) @ lg.m0
    assert np.allclose(dual_estimator_lg(blind, f, b), expected, atol=1e-10)
