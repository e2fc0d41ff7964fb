import numpy as np
import pytest

from scatterflow import flow as fl
from scatterflow import inversion as inv
from scatterflow import physics as ph
from scatterflow import posterior as po
from scatterflow import training as tr

CFG = ph.SensingConfig(n=16, snr_db=30.0)


def test_kl_gaussian_closed_form():
    assert po.kl_gaussian(np.ones(5), np.zeros(5)) == 0.0
    assert po.kl_gaussian(np.ones(3), [2.0, 0.0, 0.0]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        po.kl_gaussian([1.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        po.kl_gaussian([-1.0], [0.0])


def test_kl_gaussian_is_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert po.kl_gaussian(rng.uniform(0.1, 3, 6), rng.normal(size=6)) >= 0.0


def test_kl_gaussian_matches_monte_carlo():
    rng = np.random.default_rng(1)
    sigma, mu = rng.uniform(0.5, 1.5, 4), rng.normal(size=4)
    z = mu + sigma * rng.standard_normal((1_000_000, 4))
    log_q = -0.5 * np.sum(((z - mu) / sigma) ** 2, axis=1) - np.sum(np.log(sigma))
    log_p = -0.5 * np.sum(z**2, axis=1)
    v = log_q - log_p
    se = v.std(ddof=1) / np.sqrt(len(v))
    assert abs(po.kl_gaussian(sigma, mu) - v.mean()) <= 3 * se


def test_toy_map_logdet_matches_numerical_jacobian():
    fmap = po.ToyInjectiveMap(seed=3)
    rng = np.random.default_rng(4)
    for z in rng.normal(size=(5, 2)):
        h = 1e-6
        jac = np.stack([(fmap.forward(z + h * e) - fmap.forward(z - h * e))[0] / (2 * h) for e in np.eye(2)], axis=1)
        expected = 0.5 * np.linalg.slogdet(jac.T @ jac)[1]
        assert fmap.half_logdet_jtj(z)[0] == pytest.approx(expected, abs=1e-7)
        np.testing.assert_allclose(fmap.inverse(fmap.forward(z))[0], z, atol=1e-12)


def test_kl_invariance_equal_distributions():
    q = (np.array([0.3, -0.2]), np.array([1.2, 0.7]))
    est = po.kl_invariance_check(po.ToyInjectiveMap(0), q, q, n_draws=20_000)
    assert abs(est.kl_latent) <= 3 * est.se_latent + 1e-12
    assert abs(est.kl_pushforward) <= 3 * est.se_pushforward + 1e-12


def test_kl_invariance_shifted_mean():
    est = po.kl_invariance_check(po.ToyInjectiveMap(0), ([1.0, 1.0], [1.0, 1.0]), ([0.0, 0.0], [1.0, 1.0]),
                                 n_draws=100_000, seed=1)
    assert abs(est.kl_latent - 1.0) <= 3 * est.se_latent
    assert abs(est.kl_pushforward - 1.0) <= 3 * est.se_pushforward


@pytest.mark.parametrize("seed", range(5))
def test_kl_invariance_random_pairs(seed):
    rng = np.random.default_rng(100 + seed)
    q = (rng.normal(size=2), rng.uniform(0.5, 1.5, 2))
    p = (rng.normal(size=2), rng.uniform(0.5, 1.5, 2))
    est = po.kl_invariance_check(po.ToyInjectiveMap(seed), q, p, n_draws=100_000, seed=seed)
    combined = np.hypot(est.se_latent, est.se_pushforward)
    assert abs(est.kl_latent - est.kl_pushforward) <= 3 * combined


# -- fitting and sampling on a small model ---------------------------------------------------

@pytest.fixture(scope="module")
def setup():
    model = fl.FlowModel.build(fl.FlowConfig.preset("tiny", n=16, latent_shape=(4, 4, 4), chi_max=1.0, seed=0))
    data = tr.gen_ellipses(tr.DatasetSpec(count=32, n=16, seed=1))
    tr.train(model, data, tr.TrainConfig(2, 2, 16))
    x = np.clip(fl.flow_forward(model, 0.5 * np.random.default_rng(0).normal(size=64)), 0, None)
    y = ph.add_noise(ph.forward(x, CFG), CFG.snr_db, seed=0)
    res = inv.lso(y, model, CFG, inv.InversionConfig(iters=150))
    return model, y, res


@pytest.fixture(scope="module")
def fits(setup):
    model, y, res = setup
    return {beta: po.fit_sigma(y, model, CFG, res.z_map, beta=beta, k_samples=5, iters=200, seed=2)
            for beta in (0.01, 0.05)}


def test_larger_beta_gives_wider_posterior(fits):
    assert np.mean(fits[0.05].sigma_q) > np.mean(fits[0.01].sigma_q)
    assert np.mean(np.log(fits[0.05].sigma_q)) >= np.mean(np.log(fits[0.01].sigma_q))


def test_fit_records_trace(fits):
    p = fits[0.05]
    assert len(p.loss_trace) == 200 and np.all(np.isfinite(p.loss_trace))
    assert p.sigma_q.shape == (64,) and np.all(p.sigma_q > 0)


def test_penalty_alone_is_minimized_at_one(setup):
    model, _, res = setup
    # with zero data weight the objective is the penalty; large beta isolates it
    y0 = ph.forward(fl.flow_forward(model, res.z_map).clip(0), CFG)
    p = po.fit_sigma(y0, model, CFG, res.z_map, beta=1e6, k_samples=1, lr=0.05, iters=150, seed=0)
    np.testing.assert_allclose(p.sigma_q, 1.0, atol=0.05)
    s = np.linspace(0.5, 2.0, 301)
    assert s[np.argmin(s**2 - 2 * np.log(s))] == pytest.approx(1.0)


def test_zero_sigma_reproduces_map(setup):
    model, _, res = setup
    params = po.PosteriorParams(mu_q=res.z_map, sigma_q=np.zeros(64))
    out = po.sample_posterior(model, params, count=4, seed=0)
    for s in out.samples:
        assert s.tobytes() == res.x_map.tobytes()
    # the spread of identical samples is zero up to rounding in the mean
    assert np.max(out.uq) <= 4 * np.finfo(float).eps * np.max(np.abs(res.x_map))


def test_uq_is_sample_standard_deviation(setup, fits):
    model, _, _ = setup
    out = po.sample_posterior(model, fits[0.05], count=25, seed=3)
    assert out.samples.shape == (25, 16, 16)
    assert out.uq.tobytes() == np.std(out.samples, axis=0).tobytes()
    assert out.mmse.tobytes() == np.mean(out.samples, axis=0).tobytes()


def test_sampling_is_seeded(setup, fits):
    model, _, _ = setup
    a = po.sample_posterior(model, fits[0.01], count=3, seed=9)
    b = po.sample_posterior(model, fits[0.01], count=3, seed=9)
    assert a.samples.tobytes() == b.samples.tobytes()


def test_samples_stay_in_plausibility_band(setup):
    model, y, res = setup
    # the band describes a converged fit; lr 0.01 over 200 steps is still shrinking sigma here
    params = po.fit_sigma(y, model, CFG, res.z_map, beta=0.05, k_samples=25, lr=0.05, iters=200, seed=2)
    out = po.sample_posterior(model, params, count=10, seed=4)
    assert np.all(po.sample_misfits(y, out, CFG) <= 10 * res.misfit)


def test_invalid_posterior_parameters():
    with pytest.raises(ValueError):
        po.PosteriorParams(mu_q=np.zeros(3), sigma_q=-np.ones(3))
    with pytest.raises(ValueError):
        po.PosteriorParams(mu_q=np.zeros(3), sigma_q=np.ones(2))


def test_nan_data_aborts_with_trace(setup):
    model, y, res = setup
    bad = y.copy()
    bad[0, 0] = np.nan
    with pytest.raises(po.PosteriorError) as info:
        po.fit_sigma(bad, model, CFG, res.z_map, iters=3, k_samples=2)
    assert len(info.value.trace) == 1
