import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iia_diffusion import _backend
from iia_diffusion.schedule import NoiseParam
from iia_diffusion.score import (
    CallableModel,
    ConditionError,
    DegenerateModelError,
    GaussianMixture,
    convert_predictions,
    gaussian_flow,
    gm_denoiser,
    gm_log_density,
    gm_score,
    guided_prediction,
    isotropic_gaussian,
    load_model,
    save_model,
)

from conftest import random_mixture
from oracles import gaussian_exact, gm_logpdf, gm_posterior_mean

VE = NoiseParam()
VP = NoiseParam("VP")


def test_weights_are_normalized():
    m = GaussianMixture([2.0, 6.0], [[0.0], [1.0]], [1.0, 1.0])
    assert math.isclose(m.weights.sum(), 1.0, abs_tol=1e-12)
    np.testing.assert_allclose(m.weights, [0.25, 0.75])


@pytest.mark.parametrize(
    "kw",
    [dict(weights=[], means=np.zeros((0, 1)), scales=[]), dict(weights=[1.0, -1.0], means=[[0.0], [1.0]], scales=[1, 1]),
     dict(weights=[1.0], means=[[0.0]], scales=[-1.0]), dict(weights=[1.0], means=[[0.0], [1.0]], scales=[1.0])],
)
def test_invalid_mixtures(kw):
    with pytest.raises(ValueError):
        GaussianMixture(**kw)


def test_mode_log_density():
    m = GaussianMixture([1.0], [[1.0, -2.0, 0.5]], [0.7])
    a, s = 0.8, 0.3
    v = a * a * 0.49 + s * s
    lp = gm_log_density(m, a * m.means[0], a, s)
    assert math.isclose(lp, -1.5 * math.log(2 * math.pi * v), rel_tol=1e-13)


def test_duplicate_components_merge():
    one = GaussianMixture([1.0], [[0.3, 0.1]], [0.9])
    two = GaussianMixture([0.5, 0.5], [[0.3, 0.1], [0.3, 0.1]], [0.9, 0.9])
    z = np.array([[1.0, -2.0], [0.2, 0.2]])
    for f in (gm_log_density, gm_score):
        np.testing.assert_allclose(f(two, z, 0.9, 0.4), f(one, z, 0.9, 0.4), rtol=1e-13)


def test_log_density_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = random_mixture(rng, min_scale=0.1)
        z = rng.normal(size=m.dim) * 2
        a, s = rng.uniform(0.3, 1.0), rng.uniform(0.2, 2.0)
        assert math.isclose(gm_log_density(m, z, a, s), gm_logpdf(m.weights, m.means, m.scales, z, a, s), rel_tol=1e-11)


def test_log_density_monte_carlo():
    rng = np.random.default_rng(2)
    m = random_mixture(rng, dim=2, K=3, min_scale=0.3)
    a, s = 0.9, 0.5
    z = a * m.means[0] + 0.3
    # E_x[N(z | a x, s^2 I)] over x ~ p_data
    n = 200_000
    comp = rng.choice(m.n_components, size=n, p=m.weights)
    x = m.means[comp] + m.scales[comp, None] * rng.normal(size=(n, 2))
    dens = np.exp(-np.sum((z - a * x) ** 2, axis=1) / (2 * s * s)) / (2 * math.pi * s * s)
    est, err = dens.mean(), dens.std() / math.sqrt(n)
    assert abs(math.exp(gm_log_density(m, z, a, s)) - est) < 4 * err


def test_single_component_score():
    m = GaussianMixture([1.0], [[1.0, 2.0]], [0.5])
    z = np.array([0.3, -0.4])
    a, s = 0.7, 0.6
    expected = -(z - a * m.means[0]) / (a * a * 0.25 + s * s)
    np.testing.assert_allclose(gm_score(m, z, a, s), expected, rtol=1e-14)


def test_symmetric_mixture_has_zero_score_at_center():
    m = GaussianMixture([1.0, 1.0], [[-2.0, 0.0], [2.0, 0.0]], [1.0, 1.0])
    np.testing.assert_allclose(gm_score(m, np.zeros(2), 1.0, 0.5), 0.0, atol=1e-15)


def test_score_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        m = random_mixture(rng, min_scale=0.2)
        a, s = rng.uniform(0.2, 1.0), rng.uniform(0.3, 3.0)
        z = rng.normal(size=m.dim) * 2
        h = 1e-5
        fd = np.array([
            (gm_log_density(m, z + h * e, a, s) - gm_log_density(m, z - h * e, a, s)) / (2 * h)
            for e in np.eye(m.dim)
        ])
        g = gm_score(m, z, a, s)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-3))
    assert worst <= 1e-5


def test_point_mass_denoiser():
    m = GaussianMixture([1.0], [[1.5, -0.5]], [0.0])
    for z in np.random.default_rng(4).normal(size=(5, 2)) * 10:
        np.testing.assert_allclose(gm_denoiser(m, z, 0.7, VE), m.means[0], rtol=1e-15)
    m2 = GaussianMixture([0.5, 0.5], [[1.0], [-1.0]], [0.0, 0.0])
    z = np.array([0.3])
    _, _, den, resp = m2.posterior(z, 1.0, 0.8)
    np.testing.assert_allclose(den, resp @ m2.means, rtol=1e-14)


def test_small_noise_limit_recovers_observation():
    m = GaussianMixture([0.4, 0.6], [[0.0, 0.0], [3.0, 1.0]], [1.0, 0.5])
    z = np.array([0.4, 0.9])
    a = 0.8
    _, _, den, _ = m.posterior(z, a, 1e-9)
    np.testing.assert_allclose(den, z / a, rtol=1e-9)


def test_denoiser_matches_bayes_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = random_mixture(rng)
        a, s = rng.uniform(0.2, 1.0), rng.uniform(0.2, 3.0)
        z = rng.normal(size=m.dim) * 2
        ref = gm_posterior_mean(m.weights, m.means, m.scales, z, a, s)
        np.testing.assert_allclose(m.posterior(z, a, s)[2], ref, rtol=1e-10, atol=1e-12)


def test_responsibilities_are_a_distribution():
    rng = np.random.default_rng(6)
    m = random_mixture(rng, dim=2, K=4)
    _, _, _, resp = m.posterior(rng.normal(size=(50, 2)) * 20, 0.5, 0.4)
    assert np.all((resp >= 0) & (resp <= 1))
    np.testing.assert_allclose(resp.sum(axis=1), 1.0, rtol=1e-14)


def test_large_states_do_not_overflow():
    m = GaussianMixture([0.5, 0.5], [[0.0], [1.0]], [0.1, 0.1])
    lp, score, den, _ = m.posterior(np.array([[1e6]]), 1.0, 0.01)
    assert np.all(np.isfinite(lp)) and np.all(np.isfinite(score)) and np.all(np.isfinite(den))


def test_degenerate_noise_level():
    m = GaussianMixture([1.0], [[0.0]], [0.0])
    with pytest.raises(DegenerateModelError):
        gm_log_density(m, np.zeros(1), 1.0, 0.0)


def test_conditions_reweight_components(gm):
    z = np.array([[0.0, 0.0]])
    for k, label in enumerate(gm.labels):
        w = gm.condition_weights(label)
        assert w[k] == 1.0
        _, _, den, resp = gm.posterior(z, 1.0, 0.5, label)
        assert resp[0, k] == 1.0
    with pytest.raises(ConditionError):
        gm.denoise(z, 1.0, VE, "nope")
    per_sample = gm.posterior(np.zeros((3, 2)), 1.0, 0.5, ["c0", "c1", "c2"])[2]
    for k, label in enumerate(gm.labels):
        np.testing.assert_array_equal(per_sample[k], gm.posterior(np.zeros((1, 2)), 1.0, 0.5, label)[2][0])


def test_convert_predictions():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(4, 3))
    p = convert_predictions(z, 0.4, VP, noise=np.zeros_like(z))
    np.testing.assert_allclose(p.denoised, z / VP.alpha(0.4), rtol=1e-15)
    eps = rng.normal(size=(4, 3))
    np.testing.assert_allclose(convert_predictions(z, 2.0, VE, noise=eps).denoised, z - 2.0 * eps, rtol=1e-15)
    back = convert_predictions(z, 0.4, VP, denoised=convert_predictions(z, 0.4, VP, noise=eps).denoised)
    np.testing.assert_allclose(back.noise, eps, rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        convert_predictions(z, 0.0, VP, denoised=z)
    with pytest.raises(ValueError):
        convert_predictions(z, 0.4, VP)


def test_prediction_consistency(gm):
    rng = np.random.default_rng(8)
    for t in (0.05, 0.5, 0.95):
        z = rng.normal(size=(6, 2))
        p = gm.predict(z, t, VP)
        np.testing.assert_allclose(p.denoised, (z - VP.sigma(t) * p.noise) / VP.alpha(t), rtol=1e-10, atol=1e-10)


def test_guidance_limits(gm):
    z = np.random.default_rng(9).normal(size=(5, 2))
    null = gm.predict(z, 0.5, VP).noise
    cond = gm.predict(z, 0.5, VP, "c1").noise
    np.testing.assert_array_equal(guided_prediction(gm, z, 0.5, VP, "c1", 0.0).noise, null)
    np.testing.assert_allclose(guided_prediction(gm, z, 0.5, VP, "c1", 1.0).noise, cond, rtol=1e-15, atol=1e-15)


def test_guidance_independent_of_scale_for_trivial_condition():
    m = GaussianMixture([0.3, 0.7], [[0.0], [2.0]], [1.0, 1.0], conditions={"all": [1.0, 1.0]})
    z = np.array([[0.4], [1.7]])
    a = guided_prediction(m, z, 0.3, VP, "all", 0.0).noise
    b = guided_prediction(m, z, 0.3, VP, "all", 7.5).noise
    np.testing.assert_allclose(a, b, rtol=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.05, 0.95))
def test_guidance_is_affine(w1, w2, t):
    m = GaussianMixture([0.5, 0.3, 0.2], [[-2.0, 0.0], [2.0, 0.0], [0.0, 3.0]], [1.0, 0.5, 0.8],
                        conditions={"a": [1.0, 0.0, 0.0]})
    z = np.array([[0.3, -0.2], [1.0, 2.0]])
    f = lambda w: guided_prediction(m, z, t, VP, "a", w).noise  # noqa: E731
    np.testing.assert_allclose(f(w1) + f(w2), f(w1 + w2) + f(0.0), rtol=0, atol=1e-12 * (1 + abs(w1) + abs(w2)) * 10)


def test_guidance_errors(gm):
    z = np.zeros((1, 2))
    with pytest.raises(ConditionError):
        guided_prediction(gm, z, 0.5, VP, None, 2.0)
    with pytest.raises(ValueError):
        guided_prediction(gm, z, 0.5, VP, "c0", float("nan"))
    with pytest.raises(ValueError):
        guided_prediction(gm, z, 0.0, VP, "c0", 2.0)


def test_gaussian_flow_matches_closed_form():
    m = isotropic_gaussian(2)
    z = np.array([[10.0, -3.0]])
    np.testing.assert_allclose(gaussian_flow(m, z, 80.0, 0.002, VE), z * math.sqrt((1 + 0.002**2) / (1 + 80.0**2)))
    m2 = isotropic_gaussian(1, 0.5, [1.0])
    ref = gaussian_exact(z[:, :1], 0.9, 0.1, s=0.5, mu=1.0, alpha=VP.alpha, sigma=VP.sigma)
    np.testing.assert_allclose(gaussian_flow(m2, z[:, :1], 0.9, 0.1, VP), ref, rtol=1e-13)


def test_model_file_round_trip(tmp_path, gm):
    path = tmp_path / "m.json"
    save_model(gm, path)
    back = load_model(path)
    assert back.model_id == gm.model_id
    assert back.labels == gm.labels


def test_callable_model():
    m = CallableModel(lambda z, t: np.zeros_like(z), dim=2)
    p = m.predict(np.ones((1, 2)), 2.0, VE)
    np.testing.assert_allclose(p.noise, 0.5)


def test_backends_agree():
    if "cython" not in _backend.KERNELS:
        pytest.skip("compiled kernel not built")
    rng = np.random.default_rng(10)
    for _ in range(50):
        m = random_mixture(rng)
        z = rng.normal(size=(int(rng.integers(1, 40)), m.dim)) * 5
        lw = m.log_weights(None, z.shape[0])
        args = (np.ascontiguousarray(z), np.ascontiguousarray(m.means), lw, np.ascontiguousarray(m.scales**2),
                float(rng.uniform(0.1, 1)), float(rng.uniform(0.01, 3)))
        for a, b in zip(_backend.KERNELS["python"](*args), _backend.KERNELS["cython"](*args)):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_backend_env_override():
    import subprocess
    import sys

    out = subprocess.run(
        [sys.executable, "-c", "import iia_diffusion; print(iia_diffusion.BACKEND)"],
        env={**__import__("os").environ, "IIA_DIFFUSION_BACKEND": "python"},
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"
