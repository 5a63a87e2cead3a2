import numpy as np
import pytest
from scipy import integrate, stats

from stmgeo import lgpr
from stmgeo.lgpr import (
    FactorizationError,
    GPDataset,
    GPParams,
    GPPriors,
    MCMCSettings,
    compare,
    cov_matrix,
    decompose,
    fit_lr_baseline,
    log_likelihood,
    predict,
    sample_posterior,
    simulate_dataset,
)

SHORT = MCMCSettings(chains=2, iters=600, burn_in=300, thin=5, seed=3)


def dense_loglik(y, X, dist, beta, amp, rho, sigma):
    S = amp**2 * np.exp(-dist**2 / (2 * rho**2)) + sigma**2 * np.eye(len(y))
    r = y - X @ beta
    _, logdet = np.linalg.slogdet(S)
    return -0.5 * r @ np.linalg.inv(S) @ r - 0.5 * logdet - 0.5 * len(y) * np.log(2 * np.pi)


def fixture(n, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 100, size=(n, 2))
    dist = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n)])
    return GPDataset(rng.normal(size=n), X, distances=dist)


def test_cov_matrix_values():
    d = np.array([[0.0, 40.0], [40.0, 0.0]])
    C = cov_matrix(d, 1.5, 40.0)
    assert C[0, 0] == pytest.approx(2.25)
    assert C[0, 1] == pytest.approx(2.25 * np.exp(-0.5), rel=1e-14)
    assert cov_matrix(np.array([[1e6]]), 1.0, 50.0)[0, 0] == 0.0


def test_cov_matrix_psd_on_random_distances():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pts = np.column_stack([rng.uniform(50, 58, 30), rng.uniform(-6, 2, 30)])
        data = GPDataset(None, np.ones((30, 1)), pts)
        amp = rng.uniform(0.1, 3)
        C = cov_matrix(data.dist, amp, rng.uniform(5, 300))
        assert np.allclose(C, C.T)
        assert np.linalg.eigvalsh(C).min() >= -1e-8 * amp**2


def test_single_observation_density():
    data = GPDataset([0.7], [[1.0]], distances=np.zeros((1, 1)))
    p = GPParams([0.7], 1.3, 20.0, 0.4)
    assert log_likelihood(data, p) == pytest.approx(-0.5 * np.log(2 * np.pi * (1.3**2 + 0.4**2)), abs=1e-12)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_likelihood_matches_dense_inverse(n):
    data = fixture(n, seed=n)
    p = GPParams([0.2, -0.5], 0.9, 35.0, 0.3)
    expect = dense_loglik(data.y, data.X, data.dist, p.beta, 0.9, 35.0, 0.3)
    assert log_likelihood(data, p) == pytest.approx(expect, abs=1e-8)


def test_zero_amplitude_is_independent_noise():
    data = fixture(6)
    p = GPParams([0.1, 0.2], 0.0, 30.0, 0.7)
    expect = stats.norm.logpdf(data.y, data.X @ p.beta, 0.7).sum()
    assert log_likelihood(data, p) == pytest.approx(expect, abs=1e-12)


def test_likelihood_drops_for_worse_fit():
    data = fixture(5)
    p = GPParams([0.0, 0.0], 1.0, 30.0, 0.5)
    shifted = GPDataset(data.y + 25.0, data.X, distances=data.dist)
    assert log_likelihood(shifted, p) < log_likelihood(data, p)


def test_single_jitter_rescues_duplicate_locations():
    data = GPDataset(np.zeros(3), np.ones((3, 1)), distances=np.zeros((3, 3)))
    assert np.isfinite(log_likelihood(data, GPParams([0.0], 1.0, 10.0, 1e-12)))


def test_indefinite_covariance_fails_loudly():
    # not a metric, so the kernel matrix is indefinite
    dist = np.array([[0.0, 0.01, 100.0], [0.01, 0.0, 0.01], [100.0, 0.01, 0.0]])
    data = GPDataset(np.zeros(3), np.ones((3, 1)), distances=dist)
    with pytest.raises(FactorizationError):
        log_likelihood(data, GPParams([0.0], 1.0, 10.0, 1e-12))


def test_dataset_validation():
    with pytest.raises(ValueError):
        GPDataset([1.0, 2.0], np.ones((3, 1)), distances=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        GPDataset(None, np.ones((2, 1)), distances=np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ValueError):
        GPDataset(None, np.ones((2, 1)))


def _draws_at(data, params, priors=GPPriors()):
    return lgpr.PosteriorDraws(
        beta=np.array([params.beta]), amplitude=np.array([params.amplitude]),
        length_scale=np.array([params.length_scale]), sigma=np.array([params.sigma]),
        log_post=np.zeros(1), chain=np.zeros(1, int), data=data, priors=priors)


def test_predict_three_point_closed_form():
    pts = np.array([[51.5, -0.1], [51.6, -0.3], [51.4, 0.1]])
    train = GPDataset([0.3, -0.2, 0.5], np.ones((3, 1)), pts)
    new = GPDataset(None, np.ones((1, 1)), np.array([[51.55, -0.15]]))
    p = GPParams([0.1], 0.8, 15.0, 0.2)
    pred = predict(train, _draws_at(train, p), new)
    # hand assembly of the conditional normal
    K11 = cov_matrix(train.dist, 0.8, 15.0) + 0.04 * np.eye(3)
    k21 = cov_matrix(train.cross_dist(new), 0.8, 15.0)
    inv = np.linalg.inv(K11)
    mean = 0.1 + k21 @ inv @ (train.y - 0.1)
    var = 0.64 + 0.04 - k21 @ inv @ k21.T
    assert pred.means[0, 0] == pytest.approx(mean[0], abs=1e-10)
    assert pred.variances[0, 0] == pytest.approx(var[0, 0], abs=1e-10)


def test_predict_interpolates_and_decorrelates():
    data = fixture(4)
    p = GPParams([0.0, 0.0], 1.0, 30.0, 1e-6)
    new = GPDataset(None, data.X[:1], distances=np.zeros((1, 1)))
    cross = data.dist[:1]
    pred = predict(data, _draws_at(data, p), new, cross=cross)
    assert pred.mean[0] == pytest.approx(data.y[0], abs=1e-3)
    assert pred.variance[0] < 1e-6
    far = predict(data, _draws_at(data, p), new, cross=np.full((1, 4), 1e5))
    assert far.mean[0] == pytest.approx(0.0, abs=1e-12)
    assert far.variance[0] == pytest.approx(1.0 + 1e-12)


def test_zero_amplitude_prediction_is_linear():
    data, _ = simulate_dataset(30, np.r_[0.5, np.zeros(11)], 1.0, 60.0, 0.5, seed=2)
    new, _ = simulate_dataset(10, np.zeros(12), 0.0, 60.0, 0.5, seed=3)
    lr = fit_lr_baseline(data, mcmc=SHORT)
    pred = predict(data, lr, new)
    assert np.array_equal(pred.means, lr.beta @ new.X.T)
    assert np.all(lr.amplitude == 0)


def test_lr_baseline_matches_conjugate_posterior():
    rng = np.random.default_rng(11)
    n = 30
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.integers(0, 2, n)])
    y = X @ np.array([0.5, -1.0, 0.8]) + 0.6 * rng.normal(size=n)
    data = GPDataset(y, X, distances=np.zeros((n, n)) + 100 * (1 - np.eye(n)))
    draws = fit_lr_baseline(data, mcmc=MCMCSettings(chains=2, iters=4000, burn_in=1000, thin=5, seed=0))

    # oracle: integrate the closed-form conditional mean of beta over p(sigma | y)
    def post_sigma(s):
        marg = stats.multivariate_normal(np.zeros(n), s**2 * np.eye(n) + 100 * X @ X.T).logpdf(y)
        return marg + stats.halfnorm.logpdf(s)

    def cond_mean(s):
        return np.linalg.solve(X.T @ X / s**2 + np.eye(3) / 100, X.T @ y / s**2)

    grid = np.linspace(0.2, 1.6, 801)
    logw = np.array([post_sigma(s) for s in grid])
    w = np.exp(logw - logw.max())
    w /= integrate.trapezoid(w, grid)
    expect = integrate.trapezoid(w[:, None] * np.array([cond_mean(s) for s in grid]), grid, axis=0)
    mcse = np.array([lgpr._mcse(draws.beta[:, k]) for k in range(3)])
    assert np.all(np.abs(draws.beta.mean(axis=0) - expect) < 2 * np.maximum(mcse, 1e-3))


def test_sampler_deterministic_and_diagnosed():
    data, _ = simulate_dataset(25, np.r_[0.0, np.zeros(11)], 1.0, 60.0, 0.5, seed=5)
    a = sample_posterior(data, mcmc=SHORT)
    b = sample_posterior(data, mcmc=SHORT)
    assert np.array_equal(a.beta, b.beta) and np.array_equal(a.length_scale, b.length_scale)
    assert len(a) == 2 * (600 - 300) // 5
    assert set(a.rhat()) >= {"log_post", "sigma", "amplitude", "length_scale", "beta[Intercept]"}
    assert all(0.1 < acc < 0.6 for acc in a.acceptance)


def test_compare_identical_models():
    data, _ = simulate_dataset(40, np.zeros(12), 1.0, 60.0, 0.5, seed=6)
    tr, te = data.subset(np.arange(30)), data.subset(np.arange(30, 40))
    d = sample_posterior(tr, mcmc=SHORT)
    c = compare(d, d, te)
    assert c.p_mse == 1.0 and c.p_lppd == 1.0
    assert c.mse[0] == c.mse[1] and c.lppd[0] == c.lppd[1]
    assert np.isfinite(c.lppd[0])


def test_decomposition_identity_and_recovery():
    beta = np.zeros(12)
    beta[0] = -1.0
    data, eta = simulate_dataset(80, beta, 1.0, 60.0, 0.5, seed=9)
    d = sample_posterior(data, mcmc=MCMCSettings(chains=2, iters=1000, burn_in=500, thin=5, seed=1))
    dec = decompose(data, d)
    assert np.allclose(dec.fixed + dec.spatial + dec.noise, data.y, atol=1e-12, rtol=0)
    assert np.corrcoef(dec.spatial, eta)[0, 1] > 0.7
    lr = decompose(data, fit_lr_baseline(data, mcmc=SHORT))
    assert np.all(lr.spatial == 0)


def test_draws_roundtrip_and_exports(tmp_path):
    data, _ = simulate_dataset(20, np.zeros(12), 1.0, 60.0, 0.5, seed=4)
    d = sample_posterior(data, mcmc=SHORT)
    d.save(tmp_path / "draws.json")
    back = lgpr.PosteriorDraws.load(tmp_path / "draws.json", data)
    assert np.array_equal(back.beta, d.beta)
    assert np.array_equal(back.beta_cond_sd, d.beta_cond_sd)
    lgpr.write_coefficient_csv(d, tmp_path / "coef.csv")
    lgpr.write_decomposition_csv(decompose(data, d), data, tmp_path / "resid.csv")
    rows = (tmp_path / "resid.csv").read_text().splitlines()
    assert rows[0] == "store_id,lat,lon,observed,fixed,spatial,noise" and len(rows) == 21
    coef = (tmp_path / "coef.csv").read_text().splitlines()
    assert len(coef) == 1 + 12 + 3


def test_mixture_intervals_match_single_normal():
    lo = lgpr.mixture_quantile(np.array([[1.0]]), np.array([[2.0]]), 0.025)
    assert lo[0] == pytest.approx(1.0 + 2.0 * stats.norm.ppf(0.025), abs=1e-9)
