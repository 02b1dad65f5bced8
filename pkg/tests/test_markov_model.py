import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import Polynomial
from scipy import linalg

from filterdual.errors import ModelError
from filterdual.markov_model import (
    Diffusion1DModel,
    FiniteModel,
    GaussianDensity,
    LinearGaussianModel,
    as_simplex,
    canonical_model,
    cost_density,
    covariance_of,
    expected_covariation,
    grid_generator,
    hamiltonian,
    hamiltonian_partials,
    jump_covariation,
    lagrangian,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
    terminal_value,
    validate_generator,
)


def random_model(seed, d=3, m=2):
    rng = np.random.default_rng(seed)
    A = rng.exponential(size=(d, d))
    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(A, -A.sum(axis=1))
    B = rng.normal(size=(m, m))
    return FiniteModel(A=A, H=rng.normal(size=(d, m)), R=B @ B.T + np.eye(m), prior=rng.dirichlet(np.ones(d)))


def test_canonical_generator_is_valid():
    assert validate_generator(canonical_model().A) == []


def test_generator_problems_are_reported():
    assert validate_generator([[-1.0, 2.0], [1.0, -1.0]])
    assert validate_generator([[1.0, -1.0], [1.0, -1.0]])
    with pytest.raises(ModelError, match="generator"):
        FiniteModel(A=[[-1.0, 0.5], [1.0, -1.0]], H=[[1.0], [0.0]], R=[[1.0]], prior=[0.5, 0.5])


def test_finite_model_shape_checks():
    with pytest.raises(ModelError):
        FiniteModel(A=[[-1.0, 1.0], [1.0, -1.0]], H=[[1.0, 0.0, 0.0]], R=[[1.0]], prior=[0.5, 0.5])
    with pytest.raises(ModelError):
        FiniteModel(A=[[-1.0, 1.0], [1.0, -1.0]], H=[[1.0], [0.0]], R=[[1.0]], prior=[0.6, 0.6])
    with pytest.raises(ModelError):
        FiniteModel(A=[[-1.0, 1.0], [1.0, -1.0]], H=[[1.0], [0.0]], R=[[-1.0]], prior=[0.5, 0.5])


def test_as_simplex_rejects_negative_mass():
    assert np.allclose(as_simplex([0.25, 0.75]), [0.25, 0.75])
    with pytest.raises(ModelError):
        as_simplex([1.2, -0.2])


def test_jump_covariation_two_state_by_hand():
    a, b = 2.0, 0.5
    A = np.array([[-a, a], [b, -b]])
    J = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert np.allclose(jump_covariation(A, 0), a * J)
    assert np.allclose(jump_covariation(A, 1), b * J)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(2, 6))
def test_expected_covariation_is_the_average_of_jump_rates(seed, d):
    model = random_model(seed, d, 1)
    mu = np.random.default_rng(seed + 1).dirichlet(np.ones(d))
    direct = sum(mu[i] * jump_covariation(model.A, i) for i in range(d))
    assert np.allclose(expected_covariation(model.A, mu), direct, atol=1e-12)


def test_expected_covariation_is_psd_and_batched():
    model = random_model(3, 4, 1)
    mus = np.random.default_rng(0).dirichlet(np.ones(4), size=7)
    batch = expected_covariation(model.A, mus)
    assert batch.shape == (7, 4, 4)
    for mu, Q in zip(mus, batch):
        assert np.allclose(Q, expected_covariation(model.A, mu))
        assert np.linalg.eigvalsh(Q).min() > -1e-12


def test_covariance_of_vertex_is_zero():
    assert np.allclose(covariance_of([0.0, 1.0, 0.0]), 0.0)
    pi = np.array([0.2, 0.3, 0.5])
    X = np.eye(3)
    direct = sum(p * np.outer(x - pi, x - pi) for p, x in zip(pi, X))
    assert np.allclose(covariance_of(pi), direct)


def test_terminal_value_is_half_the_variance():
    y = np.array([1.0, -2.0, 0.5])
    mu = np.array([0.2, 0.3, 0.5])
    var = mu @ y**2 - (mu @ y) ** 2
    assert terminal_value(y, mu) == pytest.approx(0.5 * var, abs=1e-14)
    assert terminal_value(y, mu) == pytest.approx(0.5 * y @ covariance_of(mu) @ y, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_lagrangian_is_tower_of_cost_density(seed):
    model = random_model(seed)
    rng = np.random.default_rng(seed)
    y, v, u = rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=2)
    mu = rng.dirichlet(np.ones(3))
    tower = sum(mu[i] * cost_density(y, v, u, i, model) for i in range(3))
    assert lagrangian(y, v, u, mu, model) == pytest.approx(tower, rel=1e-12, abs=1e-12)
    assert cost_density(y, v, u, np.eye(3)[1], model) == pytest.approx(cost_density(y, v, u, 1, model))


def test_cost_density_rejects_non_basis_state():
    model = canonical_model()
    with pytest.raises(ModelError):
        cost_density([1.0, 0.0], np.zeros((2, 1)), [0.0], [0.5, 0.5], model)


def _fd(fun, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_hamiltonian_partials_match_finite_differences(seed):
    model = random_model(seed)
    rng = np.random.default_rng(seed)
    y, v, u, p = rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=2), rng.normal(size=3)
    mu = rng.dirichlet(np.ones(3))
    parts = hamiltonian_partials(y, v, u, p, mu, model)
    checks = [
        (parts.Hp, _fd(lambda x: hamiltonian(y, v, u, x, mu, model), p)),
        (parts.Hy, _fd(lambda x: hamiltonian(x, v, u, p, mu, model), y)),
        (parts.Hv, _fd(lambda x: hamiltonian(y, x, u, p, mu, model), v)),
        (parts.Hu, _fd(lambda x: hamiltonian(y, v, x, p, mu, model), u)),
    ]
    for exact, fd in checks:
        assert np.linalg.norm(fd - exact) <= 1e-6 * np.linalg.norm(exact)


def test_hamiltonian_gradient_in_u_vanishes_at_optimal_law():
    model = random_model(11)
    rng = np.random.default_rng(5)
    y, v = rng.normal(size=3), rng.normal(size=(3, 2))
    mu = rng.dirichlet(np.ones(3))
    p = covariance_of(mu) @ y
    u = -model.R_inv @ model.H.T @ p - v.T @ mu
    assert np.abs(hamiltonian_partials(y, v, u, p, mu, model).Hu).max() < 1e-12


def test_linear_gaussian_model_validation():
    lg = LinearGaussianModel(A=[[0.0, 1.0], [-1.0, 0.0]], H=[[1.0, 0.0]], Q=np.diag([0.0, 1.0]), R=[[1.0]], m0=[0, 0], Sigma0=np.eye(2))
    assert lg.d == 2 and lg.m == 1
    assert np.allclose(lg.sigma @ lg.sigma.T, lg.Q)
    with pytest.raises(ModelError):
        LinearGaussianModel(A=[[-1.0]], H=[[1.0, 0.0]], Q=[[1.0]], R=[[1.0]], m0=[0.0], Sigma0=[[1.0]])
    with pytest.raises(ModelError):
        LinearGaussianModel(A=[[-1.0]], H=[[1.0]], Q=[[-1.0]], R=[[1.0]], m0=[0.0], Sigma0=[[1.0]])


def ou_diffusion(domain=(-5.0, 5.0), prior=GaussianDensity(0.0, 1.0)):
    return Diffusion1DModel(
        drift=Polynomial([0.0, -1.0]), sigma=Polynomial([1.0]), obs=Polynomial([0.0, 1.0]), R=[[1.0]], prior=prior, domain=domain
    )


def test_diffusion_model_checks_ellipticity_and_prior_mass():
    with pytest.raises(ModelError, match="ellipticity"):
        Diffusion1DModel(
            drift=Polynomial([0.0]), sigma=Polynomial([0.0, 1.0]), obs=Polynomial([0.0, 1.0]),
            R=[[1.0]], prior=GaussianDensity(1.0, 0.5), domain=(-1.0, 3.0),
        )
    with pytest.raises(ModelError, match="integrates"):
        ou_diffusion(domain=(0.0, 5.0))


def test_grid_generator_rows_and_ou_stationary_law():
    chain, x = grid_generator(ou_diffusion(), 201)
    A = chain.A
    assert np.allclose(A.sum(axis=1), 0.0, atol=1e-9)
    assert (A - np.diag(np.diag(A)) >= 0).all()
    # stationary law of dX = -X dt + dB is N(0, 1/2)
    w = linalg.null_space(A.T)[:, 0]
    w = w / w.sum()
    assert w @ x == pytest.approx(0.0, abs=1e-9)
    assert w @ x**2 == pytest.approx(0.5, rel=0.03)


def test_grid_generator_prior_weights():
    chain, x = grid_generator(ou_diffusion(prior=GaussianDensity(0.5, 0.7)), 101)
    assert chain.prior.sum() == pytest.approx(1.0)
    assert chain.prior @ x == pytest.approx(0.5, abs=1e-3)
    assert chain.prior @ x**2 - (chain.prior @ x) ** 2 == pytest.approx(0.49, rel=1e-2)


@pytest.mark.parametrize(
    "model",
    [
        canonical_model(T=2.0),
        LinearGaussianModel(A=[[-1.0]], H=[[2.0]], Q=[[0.5]], R=[[0.25]], m0=[0.3], Sigma0=[[2.0]]),
        ou_diffusion(),
    ],
)
def test_model_json_round_trip(model, tmp_path):
    doc = model_to_dict(model)
    again = model_from_dict(json.loads(json.dumps(doc)))
    assert model_to_dict(again) == doc
    save_model(model, tmp_path / "m.json")
    assert model_to_dict(load_model(tmp_path / "m.json")) == doc


def test_model_from_dict_errors():
    with pytest.raises(ModelError, match="missing"):
        model_from_dict({"type": "finite", "A": [[-1, 1], [1, -1]]})
    with pytest.raises(ModelError, match="unknown"):
        model_from_dict({"type": "sde"})
    doc = model_to_dict(canonical_model())
    doc["d"] = 3
    with pytest.raises(ModelError):
        model_from_dict(doc)
