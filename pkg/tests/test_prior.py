import numpy as np
import pytest
from conftest import random_gm
from hypothesis import given
from hypothesis import strategies as st

from lavps.operators import mask
from lavps.prior import (
    GaussianMixture,
    exact_denoiser,
    exact_denoiser_vjp,
    exact_posterior,
    noised_marginal,
    random_mixture,
    sample_prior,
)
from lavps.schedule import make_schedule


def quad_denoiser_1d(gm, a, s, xt):
    grid = np.linspace(-15, 15, 60001)
    dens = np.exp(gm.log_prob(grid[:, None])) * np.exp(-0.5 * (xt - a * grid) ** 2 / s**2)
    return np.trapezoid(grid * dens, grid) / np.trapezoid(dens, grid)


def quad_denoiser_2d(gm, a, s, xt):
    g = np.linspace(-7, 7, 701)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], 1)
    logw = gm.log_prob(pts) - 0.5 * ((xt - a * pts) ** 2).sum(1) / s**2
    w = np.exp(logw - logw.max())
    return (pts * w[:, None]).sum(0) / w.sum()


def test_validation_errors():
    with pytest.raises(ValueError, match="sum to 1"):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(ValueError, match="positive definite"):
        GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 2.0], [2.0, 1.0]]])
    with pytest.raises(ValueError, match="symmetric"):
        GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 0.5], [0.0, 1.0]]])
    with pytest.raises(ValueError, match="shapes"):
        GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0]]])
    with pytest.raises(ValueError, match="cap"):
        GaussianMixture([1.0], np.zeros((1, 65)), np.eye(65)[None])
    with pytest.raises(ValueError, match="condition"):
        GaussianMixture([1.0], [[0.0, 0.0]], [np.diag([1.0, 1e-13])])


def test_moments_and_sampling():
    gm = GaussianMixture([0.5, 0.5], [[-3.0, 0.0], [3.0, 0.0]], [np.eye(2), np.eye(2)])
    x = sample_prior(gm, 100_000, 0)
    assert np.allclose(x.mean(0), 0.0, atol=4 * np.sqrt(10 / 1e5))
    assert (x[:, 0] ** 2).mean() == pytest.approx(10.0, rel=0.02)
    assert np.allclose(gm.covariance(), np.diag([10.0, 1.0]))


def test_component_frequencies():
    gm = GaussianMixture([0.3, 0.7], [[-50.0], [50.0]], [[[1.0]], [[1.0]]])
    n = 20_000
    frac = (sample_prior(gm, n, 3)[:, 0] < 0).mean()
    assert abs(frac - 0.3) < 4 * np.sqrt(0.3 * 0.7 / n)


def test_sampling_deterministic(gm2):
    assert np.array_equal(sample_prior(gm2, 10, 5), sample_prior(gm2, 10, 5))
    with pytest.raises(ValueError):
        sample_prior(gm2, 0)


def test_dict_round_trip(gm2):
    gm = GaussianMixture.from_dict(gm2.to_dict())
    assert np.array_equal(gm.means, gm2.means) and np.array_equal(gm.covs, gm2.covs)


def test_noised_marginal_examples(sched10):
    gm = GaussianMixture([1.0], [[2.0]], [[[4.0]]])
    m = noised_marginal(gm, sched10, 8)
    assert m.means[0, 0] == pytest.approx(0.4) and m.covs[0, 0, 0] == pytest.approx(0.8)
    x = 0.2 * sample_prior(gm, 100_000, 1) + 0.8 * np.random.default_rng(2).normal(size=(100_000, 1))
    assert x.mean() == pytest.approx(0.4, abs=4 * np.sqrt(0.8 / 1e5))
    assert x.var() == pytest.approx(0.8, rel=0.02)
    top = noised_marginal(random_gm(np.random.default_rng(0), 3, 2), sched10, 10)
    assert np.allclose(top.means, 0) and np.allclose(top.covs, np.eye(3))
    base = noised_marginal(gm, sched10, 0)
    assert np.array_equal(base.means, gm.means) and np.array_equal(base.covs, gm.covs)


def test_denoiser_single_gaussian_symmetric_point(sched):
    gm = GaussianMixture([1.0], [[0.3, -0.2]], [[[0.5, 0.1], [0.1, 0.4]]])
    t = 400
    out = exact_denoiser(gm, sched, t, sched.alpha[t] * gm.means[0])
    assert np.allclose(out, gm.means[0], atol=1e-12)


def test_denoiser_small_noise_limit():
    sched = make_schedule(100_000)
    gm = GaussianMixture([1.0], [[0.0]], [[[1.0]]])
    x1 = np.array([0.7])
    assert exact_denoiser(gm, sched, 1, x1)[0] == pytest.approx(0.7 / sched.alpha[1], abs=1e-6)


def test_denoiser_symmetric_mixture(sched10):
    gm = GaussianMixture([0.5, 0.5], [[-3.0], [3.0]], [[[1.0]], [[1.0]]])
    assert exact_denoiser(gm, sched10, 4, np.array([0.0]))[0] == pytest.approx(0.0, abs=1e-14)
    val = exact_denoiser(gm, sched10, 4, np.array([1.0]))[0]
    assert val == pytest.approx(quad_denoiser_1d(gm, 0.6, 0.4, 1.0), abs=1e-6)


def test_denoiser_quadrature_random_instances(sched):
    rng = np.random.default_rng(7)
    for i in range(30):
        dim = 1 if i % 2 == 0 else 2
        gm = random_gm(rng, dim, int(rng.integers(1, 4)))
        t = int(rng.integers(50, 1000))
        a, s = sched.alpha[t], sched.sigma[t]
        xt = a * sample_prior(gm, 1, rng)[0] + s * rng.normal(size=dim)
        ref = quad_denoiser_1d(gm, a, s, xt[0]) if dim == 1 else quad_denoiser_2d(gm, a, s, xt)
        assert np.allclose(exact_denoiser(gm, sched, t, xt), ref, atol=1e-5)


def test_denoiser_batched_time(gm2, sched):
    x = np.random.default_rng(0).normal(size=(5, 2))
    t = np.array([10, 500, 500, 999, 1000])
    out = exact_denoiser(gm2, sched, t, x)
    for i in range(5):
        assert np.allclose(out[i], exact_denoiser(gm2, sched, int(t[i]), x[i]))


def test_denoiser_input_errors(gm2, sched):
    with pytest.raises(ValueError):
        exact_denoiser(gm2, sched, 0, np.zeros(2))
    with pytest.raises(ValueError):
        exact_denoiser(gm2, sched, 5, np.zeros(3))
    with pytest.raises(ValueError):
        exact_denoiser(gm2, sched, 5, np.array([np.nan, 0.0]))


@given(st.integers(1, 1000), st.integers(0, 10_000))
def test_vjp_matches_finite_differences(t, seed):
    rng = np.random.default_rng(seed)
    gm = random_gm(rng, 3, 3)
    sched = make_schedule(1000)
    x = rng.normal(size=(2, 3)) * 1.5
    v = rng.normal(size=(2, 3))
    den, jtv = exact_denoiser_vjp(gm, sched, t, x, v)
    assert np.allclose(den, exact_denoiser(gm, sched, t, x))
    h = 1e-5
    fd = np.zeros_like(x)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd[:, j] = ((exact_denoiser(gm, sched, t, x + e) - exact_denoiser(gm, sched, t, x - e)) * v).sum(1) / (2 * h)
    assert np.allclose(jtv, fd, rtol=1e-4, atol=1e-6 * (1 + np.abs(fd).max()))


def test_posterior_conjugate_identity():
    gm = GaussianMixture([1.0], [[0.5, -1.0]], [[[0.6, 0.2], [0.2, 0.3]]])
    op = mask(2, [0, 1], sigma_y=0.3)
    y = np.array([0.1, 0.4])
    post = exact_posterior(gm, op, y).mixture
    C = gm.covs[0]
    P = np.linalg.inv(C) + np.eye(2) / 0.09
    mean = np.linalg.solve(P, np.linalg.solve(C, gm.means[0]) + y / 0.09)
    assert np.allclose(post.means[0], mean) and np.allclose(post.covs[0], np.linalg.inv(P))


def test_posterior_uninformative(gm2):
    post = exact_posterior(gm2, mask(2, [0, 1], sigma_y=1e3), np.zeros(2)).mixture
    assert np.allclose(post.weights, gm2.weights, atol=1e-5)
    assert np.allclose(post.means, gm2.means, atol=1e-5)
    assert np.allclose(post.covs, gm2.covs, atol=1e-5)


def test_posterior_importance_sampling(gm2):
    op = mask(2, [0], sigma_y=0.3)
    y = np.array([0.4])
    post = exact_posterior(gm2, op, y)
    x = sample_prior(gm2, 1_000_000, 11)
    logw = -0.5 * (x[:, 0] - y[0]) ** 2 / 0.09
    w = np.exp(logw - logw.max())
    w /= w.sum()
    is_mean = w @ x
    ess = 1 / (w**2).sum()
    ref = post.mixture
    se = np.sqrt(np.diag(ref.covariance()) / ess)
    assert np.all(np.abs(is_mean - ref.mean()) < 3 * se + 1e-12)
    s = post.sample(200_000, 3)
    assert np.allclose(s.mean(0), ref.mean(), atol=4 * np.sqrt(np.diag(ref.covariance()).max() / 2e5))


def test_posterior_requires_linear(gm2):
    class Fake:
        is_linear = False
        sigma_y = 0.1

    with pytest.raises(TypeError):
        exact_posterior(gm2, Fake(), np.zeros(1))


def test_random_mixture_valid():
    gm = random_mixture(8, 4, 1)
    assert gm.dim == 8 and gm.n_components == 4
    assert np.array_equal(gm.means, random_mixture(8, 4, 1).means)
