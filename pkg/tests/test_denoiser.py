import numpy as np
import pytest
from conftest import random_gm
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lavps.checkpoint import CheckpointError
from lavps.denoiser import (
    AnalyticDenoiser,
    DenoiserTrainConfig,
    MLPDenoiser,
    ddim_grid,
    ddim_refine,
    denoise,
    train_denoiser,
)
from lavps.prior import GaussianMixture, exact_denoiser, noised_marginal, sample_prior
from lavps.schedule import make_schedule


@pytest.fixture(scope="module")
def sched100():
    return make_schedule(100)


@pytest.fixture(scope="module")
def trained_2d(sched100):
    gm = GaussianMixture([1.0], [[0.5, -0.3]], [[[0.5, 0.3], [0.3, 0.4]]])
    model = MLPDenoiser(sched100, hidden=(64, 64), steps=6000, batch_size=512, lr=3e-3, random_state=0)
    return gm, model.fit_prior(gm)


def test_analytic_delegates(gm2, sched):
    x = np.random.default_rng(0).normal(size=(4, 2))
    model = AnalyticDenoiser(gm2)
    assert np.array_equal(model.denoise(sched, 17, x), exact_denoiser(gm2, sched, 17, x))
    assert np.array_equal(denoise(model, sched, 17, x), exact_denoiser(gm2, sched, 17, x))
    assert model.n_calls == 2


def test_denoise_rejects_bad_time(gm2, sched):
    with pytest.raises(ValueError):
        denoise(AnalyticDenoiser(gm2), sched, 0, np.zeros(2))


def test_untrained_learned_shapes(sched100):
    model = MLPDenoiser(sched100, hidden=(16,), random_state=0).initialize(3)
    out = model.denoise(sched100, 40, np.ones(3))
    assert out.shape == (3,) and np.all(np.isfinite(out))
    assert model.denoise(sched100, np.array([1, 50]), np.ones((2, 3))).shape == (2, 3)
    with pytest.raises(NotFittedError):
        MLPDenoiser(sched100).denoise(sched100, 1, np.ones(3))


def test_standard_normal_closed_form(sched100):
    gm = GaussianMixture([1.0], [[0.0]], [[[1.0]]])
    model = MLPDenoiser(sched100, hidden=(64, 64), steps=3000, batch_size=256, lr=3e-3, random_state=1)
    model.fit_prior(gm)
    xs = np.linspace(-3, 3, 61)[:, None]
    for t in range(1, 101):
        a, s = sched100.alpha[t], sched100.sigma[t]
        assert np.abs(model.denoise(sched100, t, xs)[:, 0] - a * xs[:, 0] / (a * a + s * s)).max() <= 0.02


def test_learned_matches_affine_oracle(trained_2d, sched100):
    # test grid: a polar grid covering the central (Mahalanobis <= 2) region of each noised marginal
    gm, model = trained_2d
    ang = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    unit = np.stack([np.cos(ang), np.sin(ang)], 1)
    for t in range(1, 101, 3):
        mg = noised_marginal(gm, sched100, t)
        L = np.linalg.cholesky(mg.covs[0])
        pts = np.concatenate([mg.means[0] + r * unit @ L.T for r in (0.0, 0.5, 1.0, 1.5, 2.0)])
        err = np.abs(model.denoise(sched100, t, pts) - exact_denoiser(gm, sched100, t, pts)).max()
        assert err <= 0.05, (t, err)


def test_loss_trend_decreasing(sched100):
    # well-separated modes keep the preconditioned initialisation far from optimal
    gm = GaussianMixture([0.5, 0.5], [[-2.0, 1.0], [2.0, -1.0]], [np.eye(2) * 0.1, np.eye(2) * 0.2])
    for seed in range(5):
        model = MLPDenoiser(sched100, hidden=(32, 32), steps=400, batch_size=128, lr=3e-3, random_state=seed)
        curve = np.array(model.fit_prior(gm).loss_curve_)
        w = len(curve) // 10
        assert curve[-w:].mean() < curve[:w].mean()


def test_zero_steps_leaves_model_unchanged(sched100, gm2):
    fitted = MLPDenoiser(sched100, hidden=(16,), steps=0, random_state=3).fit_prior(gm2)
    fresh = MLPDenoiser(sched100, hidden=(16,), random_state=3)
    fresh._init_net(2, np.random.default_rng(3), fitted.sigma_data_)
    assert fitted.net_.checksum() == fresh.net_.checksum()


def test_training_gradient_finite_differences(sched100):
    rng = np.random.default_rng(2)
    for i in range(50):
        dim = 1 + i % 3
        model = MLPDenoiser(sched100, hidden=(8, 6), random_state=i).initialize(dim)
        model.sigma_data_ = float(rng.uniform(0.5, 2.0))
        for k in model.net_.params:  # move away from the zero-initialised output layer
            model.net_.params[k] = model.net_.params[k] + 0.3 * rng.normal(size=model.net_.params[k].shape)
        x0 = rng.normal(size=(5, dim))
        t = rng.integers(1, 101, size=5)
        noise = rng.normal(size=(5, dim))
        weights = rng.uniform(0.5, 2.0, size=100)
        _, grads = model.loss_and_grads(x0, t, noise, weights)
        for key in ("W0", "b1", "W2"):
            P = model.net_.params[key]
            idx = tuple(rng.integers(0, n) for n in P.shape)
            old = P[idx]
            h = 1e-6
            P[idx] = old + h
            lp, _ = model.loss_and_grads(x0, t, noise, weights)
            P[idx] = old - h
            lm, _ = model.loss_and_grads(x0, t, noise, weights)
            P[idx] = old
            fd = (lp - lm) / (2 * h)
            assert abs(grads[key][idx] - fd) <= 1e-4 * max(abs(fd), 1e-3)


def test_input_vjp_finite_differences(sched100):
    rng = np.random.default_rng(4)
    model = MLPDenoiser(sched100, hidden=(8,), random_state=0).initialize(3)
    for k in model.net_.params:
        model.net_.params[k] = model.net_.params[k] + 0.3 * rng.normal(size=model.net_.params[k].shape)
    x, v = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    _, g = model.denoise_vjp(sched100, 30, x, v)
    h = 1e-6
    fd = np.stack([((model.denoise(sched100, 30, x + e) - model.denoise(sched100, 30, x - e)) * v).sum(1) / (2 * h)
                   for e in np.eye(3) * h], 1)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_weighted_time_sampling_validation(sched100, gm2):
    with pytest.raises(ValueError):
        MLPDenoiser(sched100, time_weights=np.ones(5), steps=1).fit_prior(gm2)
    with pytest.raises(ValueError):
        DenoiserTrainConfig(weights=-np.ones(100)).time_weights(100)
    w = np.zeros(100)
    w[10] = 1.0
    model = MLPDenoiser(sched100, hidden=(8,), steps=2, batch_size=8, time_weights=w, random_state=0).fit_prior(gm2)
    assert len(model.loss_curve_) == 2


def test_fit_on_array_and_clone(sched100, gm2):
    X = sample_prior(gm2, 500, 0)
    model = MLPDenoiser(sched100, hidden=(16,), steps=50, batch_size=32, random_state=0).fit(X)
    assert model.sigma_data_ == pytest.approx(np.sqrt(X.var(0).mean()))
    twin = clone(model)
    assert twin.get_params()["steps"] == 50 and not hasattr(twin, "net_")


def test_save_load_round_trip(tmp_path, sched100, gm2):
    model = train_denoiser(gm2, sched100, DenoiserTrainConfig(steps=20, batch=16), rng=0, hidden=(8,))
    path = tmp_path / "d.ckpt"
    model.save(path)
    back = MLPDenoiser.load(path, sched100)
    x = np.random.default_rng(0).normal(size=(3, 2))
    assert np.array_equal(back.denoise(sched100, 7, x), model.denoise(sched100, 7, x))
    with pytest.raises(ValueError, match="T="):
        MLPDenoiser.load(path, make_schedule(50))
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        MLPDenoiser.load(tmp_path / "bad.ckpt", sched100)


def test_ddim_grid():
    assert ddim_grid(10, 1).tolist() == [10, 0]
    assert ddim_grid(10, 5).tolist() == [10, 8, 6, 4, 2, 0]
    with pytest.raises(ValueError):
        ddim_grid(3, 4)
    with pytest.raises(ValueError):
        ddim_grid(3, 0)


def test_ddim_one_step_is_denoiser(gm2, sched):
    model = AnalyticDenoiser(gm2)
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.array_equal(ddim_refine(model, sched, x, 300, 1), exact_denoiser(gm2, sched, 300, x))


def test_ddim_matches_affine_composition(sched):
    gm = GaussianMixture([1.0], [[0.3, -0.7]], [[[0.4, 0.1], [0.1, 0.2]]])
    model = AnalyticDenoiser(gm)
    x = np.random.default_rng(1).normal(size=(6, 2))
    for M in (1, 5):
        # every DDIM step is affine for a Gaussian prior: compose the maps symbolically
        A, b = np.eye(2), np.zeros(2)
        grid = ddim_grid(400, M)
        for u, v in zip(grid[:-1], grid[1:]):
            au, su, av, sv = sched.alpha[u], sched.sigma[u], sched.alpha[v], sched.sigma[v]
            G = au * gm.covs[0] @ np.linalg.inv(au**2 * gm.covs[0] + su**2 * np.eye(2))
            Dm, Dc = G, gm.means[0] - G @ (au * gm.means[0])
            if v == 0:
                step_m, step_c = Dm, Dc
            else:
                step_m = av * Dm + sv * (np.eye(2) - au * Dm) / su
                step_c = av * Dc - sv * au * Dc / su
            A, b = step_m @ A, step_m @ b + step_c
        assert np.allclose(ddim_refine(model, sched, x, 400, M), x @ A.T + b, atol=1e-10)


def test_ddim_step_invariance_for_point_like_prior(sched):
    gm = GaussianMixture([1.0], [[0.3, -0.7]], [np.eye(2) * 1e-8])
    x = np.random.default_rng(1).normal(size=(6, 2))
    model = AnalyticDenoiser(gm)
    assert np.allclose(ddim_refine(model, sched, x, 400, 1), ddim_refine(model, sched, x, 400, 5), atol=1e-6)


def test_ddim_from_noise_reaches_modes(sched):
    gm = GaussianMixture([0.5, 0.5], [[-3.0, 0.0], [3.0, 0.0]], [np.eye(2) * 0.25, np.eye(2) * 0.25])
    x = np.random.default_rng(2).normal(size=(500, 2))
    out = ddim_refine(AnalyticDenoiser(gm), sched, x, sched.T, 50)
    dist = np.min(np.linalg.norm(out[:, None] - gm.means[None], axis=-1), axis=1)
    assert np.mean(dist <= 3 * 0.5) >= 0.95
