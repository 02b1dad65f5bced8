import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from filterdual.errors import GridMismatchError, ModelError
from filterdual.filters import wonham_filter
from filterdual.markov_model import FiniteModel, LinearGaussianModel
from filterdual.path_sim import (
    StatePath,
    TimeGrid,
    exact_drift_increments,
    export_bundle,
    innovation,
    iter_bundle_chunks,
    load_bundle,
    path_rng,
    sample_ctmc,
    sample_lg_path,
    sample_obs,
    simulate_bundle,
)


def test_time_grid():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25
    assert g.nodes[-1] == 2.0 and len(g.nodes) == 9
    assert g.coarsen(4).n_steps == 2
    with pytest.raises(GridMismatchError):
        g.coarsen(3)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_streams_are_independent_of_each_other():
    a = path_rng(1, 0, 0).random(5)
    assert np.array_equal(a, path_rng(1, 0, 0).random(5))
    assert not np.array_equal(a, path_rng(1, 1, 0).random(5))
    assert not np.array_equal(a, path_rng(1, 0, 1).random(5))
    assert not np.array_equal(a, path_rng(2, 0, 0).random(5))


def test_bundle_identical_across_threads_and_chunks(canon):
    g = TimeGrid(1.0, 200)
    one = simulate_bundle(canon, g, 40, 5, threads=1)
    many = simulate_bundle(canon, g, 40, 5, threads=4)
    assert np.array_equal(one.states, many.states) and np.array_equal(one.dZ, many.dZ)
    chunks = list(iter_bundle_chunks(canon, g, 40, 5, chunk=15))
    assert [c.path_offset for c in chunks] == [0, 15, 30]
    assert np.array_equal(np.concatenate([c.dZ for c in chunks]), one.dZ)


def test_empty_bundle_is_an_error(canon, grid):
    with pytest.raises(ModelError, match="empty bundle"):
        simulate_bundle(canon, grid, 0, 1)


def test_ctmc_transition_law_matches_matrix_exponential():
    A = np.array([[-2.0, 1.5, 0.5], [0.3, -0.8, 0.5], [1.0, 1.0, -2.0]])
    model = FiniteModel(A=A, H=np.zeros((3, 1)), R=[[1.0]], prior=[1.0, 0.0, 0.0], T=0.7)
    g = TimeGrid(0.7, 7)
    N = 20_000
    ends = np.array([sample_ctmc(model, g, (9, i)).states[-1] for i in range(N)])
    freq = np.bincount(ends, minlength=3) / N
    exact = linalg.expm(A * 0.7)[0]
    se = np.sqrt(exact * (1 - exact) / N)
    assert np.all(np.abs(freq - exact) < 4 * se)


def test_holding_time_is_exponential(canon):
    g = TimeGrid(50.0, 10)
    model = canon.replace(T=50.0)
    gaps = np.concatenate([np.diff(sample_ctmc(model, g, (3, i)).jump_times)[1:] for i in range(200)])
    # rate-one holding times: mean 1, variance 1
    assert abs(gaps.mean() - 1.0) < 4 / np.sqrt(len(gaps))
    assert abs(gaps.var() - 1.0) < 0.1


def test_exact_drift_integral_on_hand_built_path():
    path = StatePath(np.array([0.0, 0.3, 0.55]), np.array([0, 1, 0], dtype=np.int16))
    H = np.array([[1.0], [-2.0]])
    inc = exact_drift_increments(path, H, TimeGrid(1.0, 4))
    # cells [0,.25] [.25,.5] [.5,.75] [.75,1]
    expected = np.array([0.25, 0.05 - 0.4, -0.1 + 0.2, 0.25])
    assert np.allclose(inc[:, 0], expected)


def test_observation_noise_has_covariance_R_dt(canon):
    model = canon.replace(H=np.zeros((2, 1)), R=[[2.0]])
    g = TimeGrid(1.0, 1000)
    sp = sample_ctmc(model, g, (0, 0))
    dZ = sample_obs(sp, model, g, (0, 0)).dZ
    assert abs(dZ.var() / (2.0 * g.dt) - 1.0) < 4 * np.sqrt(2 / 1000)


def test_linear_gaussian_path_moments():
    lg = LinearGaussianModel(A=[[-1.0]], H=[[1.0]], Q=[[1.0]], R=[[1.0]], m0=[1.0], Sigma0=[[0.25]])
    g = TimeGrid(1.0, 500)
    XT = np.array([sample_lg_path(lg, g, (4, i))[0][-1, 0] for i in range(4000)])
    mean = np.exp(-1.0)
    var = 0.25 * np.exp(-2.0) + 0.5 * (1 - np.exp(-2.0))
    assert abs(XT.mean() - mean) < 4 * np.sqrt(var / 4000)
    assert abs(XT.var() / var - 1.0) < 0.1


def test_coarsen_sums_increments(canon):
    b = simulate_bundle(canon, TimeGrid(1.0, 100), 3, 1)
    c = b.coarsen(4)
    assert c.grid.n_steps == 25
    assert np.allclose(c.dZ.sum(axis=1), b.dZ.sum(axis=1))
    assert np.array_equal(c.states, b.states[:, ::4])


def test_innovations_are_white(canon_bundle, canon):
    filt = wonham_filter(canon, canon_bundle)
    dI = innovation(canon_bundle.dZ, filt)
    dt = canon_bundle.grid.dt
    assert abs(dI.mean()) < 4 * np.sqrt(dt / dI.size)
    assert abs(dI.var() / dt - 1.0) < 0.01
    lag = (dI[:, 1:] * dI[:, :-1]).mean() / dt
    assert abs(lag) < 4 / np.sqrt(dI.size)


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_bundle_csv_round_trip_is_exact(seed, tmp_path_factory, canon):
    b = simulate_bundle(canon, TimeGrid(1.0, 20), 3, seed)
    out = tmp_path_factory.mktemp("bundle")
    export_bundle(b, out)
    back = load_bundle(out)
    assert np.array_equal(back.states, b.states)
    assert np.array_equal(back.dZ, b.dZ)
    assert back.master_seed == seed


def test_export_is_byte_identical(tmp_path, canon):
    g = TimeGrid(1.0, 50)
    for name in ("a", "b"):
        export_bundle(simulate_bundle(canon, g, 3, 42), tmp_path / name)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_linear_gaussian_bundle_round_trip(tmp_path):
    lg = LinearGaussianModel(A=[[0.0, 1.0], [-1.0, 0.0]], H=[[1.0, 0.0]], Q=np.eye(2), R=[[1.0]], m0=[0, 0], Sigma0=np.eye(2))
    b = simulate_bundle(lg, TimeGrid(1.0, 10), 2, 3)
    export_bundle(b, tmp_path)
    back = load_bundle(tmp_path)
    assert np.array_equal(back.states, b.states)
    assert back.terminal_values([1.0, 2.0]).shape == (2,)
