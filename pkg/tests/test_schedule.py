import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iia_diffusion.schedule import GridError, NoiseParam, TimeGrid, build_grid, noise_level, refine_slot

from oracles import edm_rho

VP = NoiseParam("VP")


def test_uniform_two_steps():
    grid = build_grid("uniform", 2, 0.0, 1.0)
    assert grid.times.tolist() == [1.0, 0.5, 0.0]


def test_rho_one_is_linear_with_terminal_zero():
    grid = build_grid("edm_rho", 2, 0.1, 0.9, rho=1.0)
    np.testing.assert_allclose(grid.times, [0.9, 0.5, 0.1], rtol=0, atol=1e-15)
    grid = build_grid("edm_rho", 2, 0.1, 0.9, rho=1.0, terminal_zero=True)
    np.testing.assert_allclose(grid.times, [0.9, 0.5, 0.1, 0.0], rtol=0, atol=1e-15)
    assert grid.is_terminal(grid.N - 1) and not grid.is_terminal(0)


def test_edm_rho_matches_formula():
    for N in (2, 5, 6, 18):
        grid = build_grid("edm_rho", N, 0.002, 80.0)
        np.testing.assert_allclose(grid.times, edm_rho(N, 0.002, 80.0, 7.0), rtol=1e-14)


def test_edm_rho_six_times_spacing():
    t = build_grid("edm_rho", 5, 0.002, 80.0).times
    assert t.size == 6
    assert t[0] / t[1] > 3 and t[1] / t[2] > 3
    assert math.isclose(t[1], 24.41, abs_tol=5e-3)


def test_quadratic_is_dense_near_t_min():
    grid = build_grid("quadratic", 4, 0.0, 1.0)
    widths = -np.diff(grid.times)
    assert np.all(np.diff(widths) < 0)
    assert grid.times[0] == 1.0 and grid.times[-1] == 0.0


@pytest.mark.parametrize(
    "args",
    [("uniform", 1, 0.1, 1.0), ("uniform", 4, 1.0, 1.0), ("uniform", 4, 2.0, 1.0), ("edm_rho", 4, 0.0, 1.0),
     ("edm_rho", 4, 0.1, 1.0, -1.0), ("spiral", 4, 0.1, 1.0), ("uniform", 4, -0.5, 1.0)],
)
def test_build_grid_rejects(args):
    with pytest.raises(GridError):
        build_grid(*args)


def test_refine_slot_examples():
    grid = TimeGrid(np.array([1.0, 0.4, 0.0]))
    np.testing.assert_allclose(refine_slot(grid, 0, 3), [1.0, 0.8, 0.6, 0.4], rtol=1e-15)
    assert refine_slot(grid, 1, 1).tolist() == [0.4, 0.0]
    grid = TimeGrid(np.array([80.0, 24.41]))
    sub = refine_slot(grid, 0, 3)
    np.testing.assert_allclose(np.diff(sub), (24.41 - 80.0) / 3, rtol=1e-13)


def test_refine_slot_errors():
    grid = build_grid("uniform", 3, 0.0, 1.0)
    for i in (-1, 3):
        with pytest.raises(GridError):
            refine_slot(grid, i, 2)
    with pytest.raises(GridError):
        refine_slot(grid, 0, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.integers(1, 9), st.floats(0.001, 1.0), st.floats(1.5, 100.0), st.floats(0.5, 9.0))
def test_global_fine_grid_is_decreasing_with_exact_endpoints(N, M, t_min, t_max, rho):
    grid = build_grid("edm_rho", N, t_min, t_max, rho=rho, terminal_zero=True)
    pieces = [refine_slot(grid, i, M) for i in range(grid.N)]
    for i, p in enumerate(pieces):
        assert p[0] == grid.times[i] and p[-1] == grid.times[i + 1]
    fine = np.concatenate([pieces[0]] + [p[1:] for p in pieces[1:]])
    assert np.all(np.diff(fine) < 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 50), st.floats(0.0, 1.0), st.floats(1.5, 100.0))
def test_rho_one_equals_uniform(N, t_min, span):
    t_min = max(t_min, 1e-3)
    a = build_grid("edm_rho", N, t_min, t_min + span, rho=1.0)
    b = build_grid("uniform", N, t_min, t_min + span)
    np.testing.assert_allclose(a.times, b.times, rtol=0, atol=1e-12 * (t_min + span))


def test_noise_levels():
    assert noise_level(NoiseParam(), 2.0) == (1.0, 2.0)
    assert noise_level(VP, 0.0) == (1.0, 0.0)
    t = np.linspace(0.0, 1.0, 101)
    np.testing.assert_allclose(VP.alpha(t) ** 2 + VP.sigma(t) ** 2, 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(NoiseParam().sigma_tilde(t), t, rtol=0, atol=0)


def test_vp_derivatives_match_finite_differences():
    h = 1e-6
    for t in (0.05, 0.3, 0.9):
        dla = (VP.log_alpha(t + h) - VP.log_alpha(t - h)) / (2 * h)
        dst = (VP.sigma_tilde(t + h) - VP.sigma_tilde(t - h)) / (2 * h)
        assert math.isclose(VP.dlog_alpha(t), dla, rel_tol=1e-7)
        assert math.isclose(VP.dsigma_tilde(t), dst, rel_tol=1e-6)


def test_noise_level_is_continuous():
    t = np.linspace(1e-4, 1.0, 200001)
    jumps = np.abs(np.diff(VP.sigma(t)))
    assert jumps.max() < 1e-2
    assert np.all(VP.alpha(t) > 0)


def test_grid_validation_and_hash():
    with pytest.raises(GridError):
        TimeGrid(np.array([1.0, 1.0]))
    with pytest.raises(GridError):
        TimeGrid(np.array([1.0]))
    with pytest.raises(GridError):
        TimeGrid(np.array([1.0, -0.1]))
    a = build_grid("uniform", 4, 0.1, 1.0)
    b = build_grid("uniform", 4, 0.1, 1.0)
    c = build_grid("uniform", 4, 0.1, 1.0, param=VP)
    assert a == b and a.hash == b.hash
    assert a.hash != c.hash
    with pytest.raises(ValueError):
        a.times[0] = 3.0


def test_noise_param_round_trip():
    for p in (NoiseParam(), VP, NoiseParam("VP", 0.2, 10.0)):
        assert NoiseParam.from_dict(p.to_dict()) == p
    with pytest.raises(GridError):
        NoiseParam("XX")
