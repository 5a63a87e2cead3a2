"""Linear regression with a squared-exponential Gaussian-process residual.

    y = X beta + eta + eps,  eta ~ GP(0, amplitude^2 exp(-dist^2 / (2 length_scale^2))),
    eps ~ N(0, sigma^2 I)

Posterior sampling is Metropolis-within-Gibbs: the log covariance
parameters move by adaptive random-walk Metropolis on their posterior with
``beta`` integrated out, then ``beta`` is drawn exactly from its Gaussian
conditional. Setting the amplitude to zero gives the plain linear
regression baseline with the same machinery.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from .evaluation import rhat
from .geo import DESIGN_COLUMNS, distance_matrix, haversine_km, inv_logit

log = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
TARGET_ACCEPT = 0.3


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass
class GPDataset:
    """Responses, covariates and locations for one topic.

    ``y`` may be ``None`` for prediction targets. Locations are ``coords``
    (lat, lon in degrees); a precomputed ``distances`` matrix in km may be
    given instead for fixtures without geography.
    """

    y: np.ndarray | None
    X: np.ndarray
    coords: np.ndarray | None = None
    store_ids: tuple = ()
    distances: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        n = len(self.X)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float).reshape(-1)
            if len(self.y) != n:
                raise ValueError("y and X have different numbers of rows")
        if self.coords is None and self.distances is None:
            raise ValueError("either coordinates or a distance matrix is required")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
            if len(self.coords) != n:
                raise ValueError("coordinates and X have different numbers of rows")
        if self.distances is not None:
            d = np.asarray(self.distances, dtype=float)
            if d.shape != (n, n) or not np.allclose(d, d.T) or np.any(np.diag(d) != 0):
                raise ValueError("distance matrix must be n x n, symmetric, with zero diagonal")
            self.distances = d
        if not self.store_ids:
            self.store_ids = tuple(str(i) for i in range(n))
        elif len(self.store_ids) != n:
            raise ValueError("one store id per row is required")
        self.store_ids = tuple(self.store_ids)

    @property
    def n(self) -> int:
        return len(self.X)

    @cached_property
    def dist(self) -> np.ndarray:
        if self.distances is not None:
            return self.distances
        c = self.coords
        d = haversine_km(c[:, None, 0], c[:, None, 1], c[None, :, 0], c[None, :, 1])
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
        return d

    def cross_dist(self, other: GPDataset) -> np.ndarray:
        """Distances from ``other``'s locations (rows) to this dataset's (columns)."""
        if other.coords is None or self.coords is None:
            raise ValueError("cross distances need coordinates on both sides")
        a, b = other.coords, self.coords
        return haversine_km(a[:, None, 0], a[:, None, 1], b[None, :, 0], b[None, :, 1])

    def subset(self, idx) -> GPDataset:
        idx = np.asarray(idx)
        return GPDataset(None if self.y is None else self.y[idx], self.X[idx],
                         None if self.coords is None else self.coords[idx],
                         tuple(self.store_ids[i] for i in idx),
                         None if self.distances is None else self.distances[np.ix_(idx, idx)])

    @classmethod
    def from_stores(cls, stores, y=None) -> GPDataset:
        from .geo import coords, design_matrix

        return cls(y, design_matrix(stores), coords(stores), tuple(s.store_id for s in stores))


@dataclass
class GPParams:
    beta: np.ndarray
    amplitude: float
    length_scale: float
    sigma: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if self.amplitude < 0 or self.sigma <= 0 or not (self.length_scale > 0 or np.isnan(self.length_scale)):
            raise ValueError("amplitude must be >= 0, length_scale and sigma > 0")


@dataclass(frozen=True)
class GPPriors:
    """Half-normal scales for sigma and amplitude, normal sd for beta, inverse-gamma for length-scale."""

    sigma_scale: float = 1.0
    beta_sd: float = 10.0
    amplitude_scale: float = 2.0
    length_shape: float = 2.0
    length_scale: float = 50.0
    amplitude_zero: bool = False

    def log_prior_hyper(self, amplitude, length_scale, sigma) -> float:
        lp = -0.5 * (sigma / self.sigma_scale) ** 2
        if not self.amplitude_zero:
            lp += -0.5 * (amplitude / self.amplitude_scale) ** 2
            lp += -(self.length_shape + 1) * np.log(length_scale) - self.length_scale / length_scale
        return float(lp)

    def log_prior_beta(self, beta) -> float:
        beta = np.asarray(beta)
        return float(-0.5 * np.sum((beta / self.beta_sd) ** 2) - beta.size * (np.log(self.beta_sd) + 0.5 * LOG_2PI))


@dataclass
class MCMCSettings:
    chains: int = 2
    iters: int = 2000
    burn_in: int = 1000
    thin: int = 5
    seed: int = 0


@dataclass
class PosteriorDraws:
    beta: np.ndarray  # (S, p)
    amplitude: np.ndarray  # (S,)
    length_scale: np.ndarray
    sigma: np.ndarray
    log_post: np.ndarray
    chain: np.ndarray
    data: GPDataset = field(repr=False)
    priors: GPPriors = field(default_factory=GPPriors)
    acceptance: list[float] = field(default_factory=list)
    # exact conditional N(mean, sd^2) of each beta component per draw
    beta_cond_mean: np.ndarray | None = field(default=None, repr=False)
    beta_cond_sd: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.sigma)

    def params(self, s: int) -> GPParams:
        return GPParams(self.beta[s], float(self.amplitude[s]), float(self.length_scale[s]), float(self.sigma[s]))

    def by_chain(self, values) -> np.ndarray:
        values = np.asarray(values)
        return np.array([values[self.chain == c] for c in np.unique(self.chain)])

    def rhat(self) -> dict:
        """Split R-hat for the log posterior and every scalar parameter."""
        out = {"log_post": rhat(self.by_chain(self.log_post))}
        for k, name in enumerate(DESIGN_COLUMNS[: self.beta.shape[1]]):
            out[f"beta[{name}]"] = rhat(self.by_chain(self.beta[:, k]))
        out["sigma"] = rhat(self.by_chain(self.sigma))
        if not self.priors.amplitude_zero:
            out["amplitude"] = rhat(self.by_chain(self.amplitude))
            out["length_scale"] = rhat(self.by_chain(self.length_scale))
        return out

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "amplitude": self.amplitude.tolist(),
            "length_scale": [None if np.isnan(v) else v for v in self.length_scale.tolist()],
            "sigma": self.sigma.tolist(),
            "log_post": self.log_post.tolist(),
            "chain": self.chain.tolist(),
            "acceptance": self.acceptance,
            "beta_cond_mean": None if self.beta_cond_mean is None else self.beta_cond_mean.tolist(),
            "beta_cond_sd": None if self.beta_cond_sd is None else self.beta_cond_sd.tolist(),
            "priors": self.priors.__dict__,
            "rhat": self.rhat(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path, data: GPDataset) -> PosteriorDraws:
        with open(path) as fh:
            d = json.load(fh)
        return cls(np.asarray(d["beta"]), np.asarray(d["amplitude"]),
                   np.array([np.nan if v is None else v for v in d["length_scale"]]),
                   np.asarray(d["sigma"]), np.asarray(d["log_post"]), np.asarray(d["chain"]),
                   data, GPPriors(**d["priors"]), d["acceptance"],
                   None if d.get("beta_cond_mean") is None else np.asarray(d["beta_cond_mean"]),
                   None if d.get("beta_cond_sd") is None else np.asarray(d["beta_cond_sd"]))


def cov_matrix(dist, amplitude: float, length_scale: float) -> np.ndarray:
    """Squared-exponential covariance ``amplitude^2 exp(-dist^2 / (2 length_scale^2))``."""
    dist = np.asarray(dist, dtype=float)
    if amplitude == 0.0:
        return np.zeros_like(dist)
    if amplitude < 0 or length_scale <= 0:
        raise ValueError("amplitude and length_scale must be positive")
    return amplitude**2 * np.exp(-0.5 * (dist / length_scale) ** 2)


def _cholesky(S: np.ndarray, jitter: float) -> np.ndarray:
    try:
        return linalg.cholesky(S, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cholesky(S + jitter * np.eye(len(S)), lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise FactorizationError("covariance not positive definite after jitter") from exc


def total_cov(dist, amplitude, length_scale, sigma) -> np.ndarray:
    S = cov_matrix(dist, amplitude, length_scale)
    S[np.diag_indices_from(S)] += sigma**2
    return S


def _chol_total(dist, amplitude, length_scale, sigma):
    S = total_cov(dist, amplitude, length_scale, sigma)
    return _cholesky(S, 1e-8 * max(amplitude**2, sigma**2))


def log_likelihood(data: GPDataset, params: GPParams) -> float:
    """Multivariate normal log density of ``y`` given all parameters."""
    L = _chol_total(data.dist, params.amplitude, params.length_scale, params.sigma)
    r = data.y - data.X @ params.beta
    a = linalg.solve_triangular(L, r, lower=True, check_finite=False)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * data.n * LOG_2PI)


def log_posterior(data: GPDataset, params: GPParams, priors: GPPriors) -> float:
    """Unnormalised log posterior on the natural parameter scale."""
    return (log_likelihood(data, params) + priors.log_prior_beta(params.beta)
            + priors.log_prior_hyper(params.amplitude, params.length_scale, params.sigma))


@dataclass
class _Conditional:
    """Quantities of the beta-marginalised model at one hyperparameter value."""

    log_marginal: float
    beta_mean: np.ndarray
    beta_chol: np.ndarray  # lower Cholesky of the conditional precision


def _conditional(data: GPDataset, amplitude, length_scale, sigma, priors: GPPriors) -> _Conditional:
    L = _chol_total(data.dist, amplitude, length_scale, sigma)
    Xw = linalg.solve_triangular(L, data.X, lower=True, check_finite=False)
    yw = linalg.solve_triangular(L, data.y, lower=True, check_finite=False)
    p = data.X.shape[1]
    # Cholesky factor of the precision Xw'Xw + I/sd^2 via QR of the stacked
    # matrix; forming the precision explicitly loses the prior term when
    # sigma is tiny
    R = linalg.qr(np.vstack([Xw, np.eye(p) / priors.beta_sd]), mode="r", check_finite=False)[0][:p]
    R = (R * np.where(np.diag(R) < 0, -1.0, 1.0)[:, None]).T
    bvec = Xw.T @ yw
    c = linalg.solve_triangular(R, bvec, lower=True, check_finite=False)
    mean = linalg.solve_triangular(R.T, c, lower=False, check_finite=False)
    log_marginal = (
        -0.5 * (yw @ yw - c @ c)
        - np.sum(np.log(np.diag(L)))
        - np.sum(np.log(np.diag(R)))
        - p * np.log(priors.beta_sd)
        - 0.5 * data.n * LOG_2PI
    )
    return _Conditional(float(log_marginal), mean, R)


def _unpack(theta, priors: GPPriors):
    if priors.amplitude_zero:
        return 0.0, np.nan, float(np.exp(theta[0]))
    return float(np.exp(theta[0])), float(np.exp(theta[1])), float(np.exp(theta[2]))


def _log_target(theta, data, priors):
    amplitude, length_scale, sigma = _unpack(theta, priors)
    try:
        cond = _conditional(data, amplitude, length_scale, sigma, priors)
    except np.linalg.LinAlgError:
        return -np.inf, None
    # log-scale Jacobian adds sum(theta)
    lp = cond.log_marginal + priors.log_prior_hyper(amplitude, length_scale, sigma) + float(np.sum(theta))
    return lp, cond


def _initial_theta(data: GPDataset, priors: GPPriors, rng) -> np.ndarray:
    beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    resid_sd = max(float(np.std(data.y - data.X @ beta)), 1e-3)
    jitter = rng.normal(scale=0.5, size=3)
    if priors.amplitude_zero:
        return np.array([np.log(resid_sd) + jitter[0]])
    d = data.dist[np.triu_indices(data.n, 1)]
    rho0 = float(np.median(d)) / 4 if d.size else 50.0
    return np.array([np.log(resid_sd / np.sqrt(2)), np.log(max(rho0, 1.0)), np.log(resid_sd / np.sqrt(2))]) + jitter


def _run_chain(data, priors, mcmc: MCMCSettings, chain: int):
    rng = np.random.default_rng([mcmc.seed, chain])
    theta = _initial_theta(data, priors, rng)
    lp, cond = _log_target(theta, data, priors)
    if not np.isfinite(lp):
        raise FloatingPointError("non-finite posterior at the initial point")
    dim = len(theta)
    log_scale = np.log(2.38**2 / dim)
    prop_cov = np.eye(dim) * 0.1**2
    mean_hist = theta.copy()
    cov_hist = np.zeros((dim, dim))
    accepted = 0
    out = []
    for it in range(1, mcmc.iters + 1):
        step = np.linalg.cholesky(np.exp(log_scale) * prop_cov)
        proposal = theta + step @ rng.standard_normal(dim)
        lp_new, cond_new = _log_target(proposal, data, priors)
        log_u = np.log(rng.random())
        accept_prob = float(np.exp(min(0.0, lp_new - lp))) if np.isfinite(lp_new) else 0.0
        if log_u < lp_new - lp:
            theta, lp, cond = proposal, lp_new, cond_new
            if it > mcmc.burn_in:
                accepted += 1
        if it <= mcmc.burn_in:
            gamma = 1.0 / it**0.6
            log_scale += gamma * (accept_prob - TARGET_ACCEPT)
            delta = theta - mean_hist
            mean_hist = mean_hist + delta / (it + 1)
            cov_hist = cov_hist + (np.outer(delta, theta - mean_hist) - cov_hist) / (it + 1)
            if it >= 100:
                prop_cov = cov_hist + 1e-6 * np.eye(dim)
        z = rng.standard_normal(len(cond.beta_mean))
        beta = cond.beta_mean + linalg.solve_triangular(cond.beta_chol.T, z, lower=False, check_finite=False)
        if it > mcmc.burn_in and (it - mcmc.burn_in) % mcmc.thin == 0:
            amplitude, length_scale, sigma = _unpack(theta, priors)
            params = GPParams(beta, amplitude, length_scale, sigma)
            Rinv = linalg.solve_triangular(cond.beta_chol, np.eye(len(beta)), lower=True, check_finite=False)
            cond_sd = np.sqrt(np.sum(Rinv * Rinv, axis=0))
            out.append((params, log_posterior(data, params, priors), cond.beta_mean, cond_sd))
    n_post = mcmc.iters - mcmc.burn_in
    return out, (accepted / n_post if n_post else float("nan"))


def sample_posterior(data: GPDataset, priors: GPPriors = GPPriors(), mcmc: MCMCSettings = MCMCSettings()
                     ) -> PosteriorDraws:
    """Thinned posterior draws from ``mcmc.chains`` independent chains."""
    if data.n < 2:
        raise ValueError("need at least two observations")
    if data.y is None:
        raise ValueError("training data needs responses")
    draws, chains, acceptance = [], [], []
    for c in range(mcmc.chains):
        out, acc = _run_chain(data, priors, mcmc, c)
        draws += out
        chains += [c] * len(out)
        acceptance.append(acc)
    return PosteriorDraws(
        beta=np.array([d[0].beta for d in draws]),
        amplitude=np.array([d[0].amplitude for d in draws]),
        length_scale=np.array([d[0].length_scale for d in draws]),
        sigma=np.array([d[0].sigma for d in draws]),
        log_post=np.array([d[1] for d in draws]),
        chain=np.array(chains),
        data=data,
        priors=priors,
        acceptance=acceptance,
        beta_cond_mean=np.array([d[2] for d in draws]),
        beta_cond_sd=np.array([d[3] for d in draws]),
    )


def fit_lr_baseline(data: GPDataset, priors: GPPriors = GPPriors(), mcmc: MCMCSettings = MCMCSettings()
                    ) -> PosteriorDraws:
    """Same sampler with the spatial term removed (amplitude fixed at zero)."""
    return sample_posterior(data, replace(priors, amplitude_zero=True), mcmc)


def mixture_quantile(means, sds, q: float) -> np.ndarray:
    """Column-wise quantile of the equally weighted mixture of N(means[s], sds[s]^2) by bisection."""
    means = np.asarray(means, dtype=float)
    sds = np.maximum(np.asarray(sds, dtype=float), 1e-150)
    lo = (means - 10 * sds).min(axis=0)
    hi = (means + 10 * sds).max(axis=0)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        below = stats.norm.cdf((mid[None, :] - means) / sds).mean(axis=0) < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def beta_intervals(draws: PosteriorDraws, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Credible intervals for beta from the mixture of its exact conditionals over draws.

    Falls back to empirical percentiles when conditionals were not stored.
    """
    lo_q, hi_q = (1 - level) / 2, (1 + level) / 2
    if draws.beta_cond_mean is None:
        lo, hi = np.percentile(draws.beta, [100 * lo_q, 100 * hi_q], axis=0)
        return lo, hi
    return (mixture_quantile(draws.beta_cond_mean, draws.beta_cond_sd, lo_q),
            mixture_quantile(draws.beta_cond_mean, draws.beta_cond_sd, hi_q))


@dataclass
class Prediction:
    means: np.ndarray  # (S, m) per-draw predictive means
    variances: np.ndarray  # (S, m) per-draw predictive variances (nugget included)
    store_ids: tuple = ()

    @property
    def mean(self) -> np.ndarray:
        return self.means.mean(axis=0)

    @property
    def variance(self) -> np.ndarray:
        # law of total variance over draws
        return self.variances.mean(axis=0) + self.means.var(axis=0)

    def interval(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        """Quantiles of the equally weighted normal mixture over draws."""
        lo_q, hi_q = (1 - level) / 2, (1 + level) / 2
        return self._mixture_quantile(lo_q), self._mixture_quantile(hi_q)

    def _mixture_quantile(self, q: float) -> np.ndarray:
        return mixture_quantile(self.means, np.sqrt(self.variances), q)

    def probability_scale(self, n_samples: int = 200, seed: int = 0) -> np.ndarray:
        """Monte Carlo draws of ``inv_logit(Y*)`` pooled over posterior draws, shape (S * n_samples, m)."""
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n_samples,) + self.means.shape)
        samples = self.means[None] + np.sqrt(self.variances)[None] * z
        return inv_logit(samples.reshape(-1, self.means.shape[1]))

    def log_density(self, y) -> np.ndarray:
        """Pointwise ``log mean_s N(y_i | mean_si, var_si)``."""
        y = np.asarray(y, dtype=float)
        lp = stats.norm.logpdf(y[None, :], self.means, np.sqrt(self.variances))
        return logsumexp(lp, axis=0) - np.log(len(self.means))


def predict(data: GPDataset, draws: PosteriorDraws, new: GPDataset, cross=None) -> Prediction:
    """Conditional normal predictions at ``new`` for every posterior draw.

    ``cross`` (m x n km) overrides the distances computed from coordinates.
    """
    cross = data.cross_dist(new) if cross is None else np.asarray(cross, dtype=float)
    new_dist = new.dist
    means = np.empty((len(draws), new.n))
    variances = np.empty((len(draws), new.n))
    for s in range(len(draws)):
        p = draws.params(s)
        fixed_new = new.X @ p.beta
        if p.amplitude == 0.0:
            means[s] = fixed_new
            variances[s] = p.sigma**2
            continue
        L = _chol_total(data.dist, p.amplitude, p.length_scale, p.sigma)
        K21 = cov_matrix(cross, p.amplitude, p.length_scale)
        resid = data.y - data.X @ p.beta
        alpha = linalg.cho_solve((L, True), resid, check_finite=False)
        V = linalg.solve_triangular(L, K21.T, lower=True, check_finite=False)
        means[s] = fixed_new + K21 @ alpha
        prior_var = np.diag(total_cov(new_dist, p.amplitude, p.length_scale, p.sigma))
        variances[s] = np.maximum(prior_var - np.sum(V * V, axis=0), 0.0)
    return Prediction(means, variances, new.store_ids)


@dataclass
class Comparison:
    mse: tuple[float, float]
    mse_se: tuple[float, float]
    lppd: tuple[float, float]
    lppd_se: tuple[float, float]
    p_mse: float
    p_lppd: float
    pointwise_sq_err: tuple[np.ndarray, np.ndarray] = field(repr=False)
    pointwise_lppd: tuple[np.ndarray, np.ndarray] = field(repr=False)


def _paired_p(a, b) -> float:
    diff = np.asarray(a) - np.asarray(b)
    if np.all(diff == diff[0]):
        return 1.0 if diff[0] == 0 else 0.0
    return float(stats.ttest_rel(a, b).pvalue)


def compare(draws_a: PosteriorDraws, draws_b: PosteriorDraws, heldout: GPDataset) -> Comparison:
    """Held-out MSE and lppd of two fits with paired two-sided t-test p-values."""
    if heldout.y is None:
        raise ValueError("held-out data needs responses")
    preds = [predict(d.data, d, heldout) for d in (draws_a, draws_b)]
    sq = tuple((p.mean - heldout.y) ** 2 for p in preds)
    lp = tuple(p.log_density(heldout.y) for p in preds)
    n = heldout.n
    return Comparison(
        mse=tuple(float(s.mean()) for s in sq),
        mse_se=tuple(float(s.std(ddof=1) / np.sqrt(n)) for s in sq),
        lppd=tuple(float(v.sum()) for v in lp),
        lppd_se=tuple(float(np.sqrt(n) * v.std(ddof=1)) for v in lp),
        p_mse=_paired_p(*sq),
        p_lppd=_paired_p(*lp),
        pointwise_sq_err=sq,
        pointwise_lppd=lp,
    )


@dataclass
class Decomposition:
    store_ids: tuple
    observed: np.ndarray
    fixed: np.ndarray
    spatial: np.ndarray
    noise: np.ndarray


def decompose(data: GPDataset, draws: PosteriorDraws) -> Decomposition:
    """Split each observation into fixed effect, spatial residual and noise."""
    beta_hat = draws.beta.mean(axis=0)
    fixed = data.X @ beta_hat
    eta = np.zeros(data.n)
    for s in range(len(draws)):
        p = draws.params(s)
        if p.amplitude == 0.0:
            continue
        C = cov_matrix(data.dist, p.amplitude, p.length_scale)
        L = _chol_total(data.dist, p.amplitude, p.length_scale, p.sigma)
        eta += C @ linalg.cho_solve((L, True), data.y - data.X @ p.beta, check_finite=False)
    eta /= len(draws)
    return Decomposition(data.store_ids, data.y.copy(), fixed, eta, data.y - fixed - eta)


def _mcse(x: np.ndarray) -> float:
    """Batch-means Monte Carlo standard error."""
    n = len(x)
    n_batches = max(int(np.sqrt(n)), 2)
    size = n // n_batches
    if size < 1:
        return float(np.std(x, ddof=1) / np.sqrt(n))
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(n_batches))


def coefficient_summary(draws: PosteriorDraws) -> list[dict]:
    """Posterior mean, sd, Monte Carlo SE and 95% interval per parameter."""
    cols = {f"{name}": draws.beta[:, k] for k, name in enumerate(DESIGN_COLUMNS[: draws.beta.shape[1]])}
    if not draws.priors.amplitude_zero:
        cols["length_scale"] = draws.length_scale
        cols["amplitude"] = draws.amplitude
    cols["sigma"] = draws.sigma
    beta_lo, beta_hi = beta_intervals(draws)
    rows = []
    for k, (name, x) in enumerate(cols.items()):
        if k < draws.beta.shape[1]:
            lo, hi = beta_lo[k], beta_hi[k]
        else:
            lo, hi = np.percentile(x, [2.5, 97.5])
        rows.append({"parameter": name, "mean": float(x.mean()), "sd": float(x.std(ddof=1)),
                     "mcse": _mcse(x), "ci_low": float(lo), "ci_high": float(hi),
                     "nonzero": bool(lo > 0 or hi < 0)})
    return rows


def _write_rows(rows, path, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items() if k in fields})


def write_coefficient_csv(draws: PosteriorDraws, path) -> None:
    _write_rows(coefficient_summary(draws), path, ["parameter", "mean", "sd", "mcse", "ci_low", "ci_high", "nonzero"])


def write_decomposition_csv(dec: Decomposition, data: GPDataset, path) -> None:
    rows = [
        {"store_id": sid, "lat": float(data.coords[i, 0]), "lon": float(data.coords[i, 1]),
         "observed": float(dec.observed[i]), "fixed": float(dec.fixed[i]),
         "spatial": float(dec.spatial[i]), "noise": float(dec.noise[i])}
        for i, sid in enumerate(dec.store_ids)
    ]
    _write_rows(rows, path, ["store_id", "lat", "lon", "observed", "fixed", "spatial", "noise"])


def write_prediction_csv(pred: Prediction, new: GPDataset, path) -> None:
    lo, hi = pred.interval()
    rows = [
        {"store_id": sid, "lat": float(new.coords[i, 0]), "lon": float(new.coords[i, 1]),
         "mean": float(pred.mean[i]), "sd": float(np.sqrt(pred.variance[i])),
         "ci_low": float(lo[i]), "ci_high": float(hi[i]),
         "probability": float(inv_logit(pred.mean[i]))}
        for i, sid in enumerate(pred.store_ids)
    ]
    _write_rows(rows, path, ["store_id", "lat", "lon", "mean", "sd", "ci_low", "ci_high", "probability"])


COMPARISON_FIELDS = ["topic", "lr_mse", "lr_mse_se", "lgpr_mse", "lgpr_mse_se", "p_mse",
                     "lr_lppd", "lr_lppd_se", "lgpr_lppd", "lgpr_lppd_se", "p_lppd"]


def comparison_row(topic, cmp: Comparison) -> dict:
    """Row of the LR-vs-LGPR table; ``cmp`` compares LGPR (first) with LR (second)."""
    return {
        "topic": topic,
        "lr_mse": cmp.mse[1], "lr_mse_se": cmp.mse_se[1],
        "lgpr_mse": cmp.mse[0], "lgpr_mse_se": cmp.mse_se[0], "p_mse": cmp.p_mse,
        "lr_lppd": cmp.lppd[1], "lr_lppd_se": cmp.lppd_se[1],
        "lgpr_lppd": cmp.lppd[0], "lgpr_lppd_se": cmp.lppd_se[0], "p_lppd": cmp.p_lppd,
    }


def write_comparison_csv(rows, path) -> None:
    _write_rows(rows, path, COMPARISON_FIELDS)


def simulate_dataset(n: int, beta, amplitude: float, length_scale: float, sigma: float, seed,
                     lat_range=(50.5, 55.5), lon_range=(-4.5, 1.5), regions=None) -> tuple[GPDataset, np.ndarray]:
    """Random store locations in a box with regions drawn uniformly; returns data and the true spatial field."""
    from .geo import ALL_REGIONS, design_matrix

    rng = np.random.default_rng(seed)
    lat = rng.uniform(*lat_range, size=n)
    lon = rng.uniform(*lon_range, size=n)
    if regions is None:
        regions = [ALL_REGIONS[i] for i in rng.integers(len(ALL_REGIONS), size=n)]
    X = design_matrix(regions)
    coords = np.column_stack([lat, lon])
    data = GPDataset(np.zeros(n), X, coords)
    if amplitude > 0:
        C = cov_matrix(data.dist, amplitude, length_scale) + 1e-8 * amplitude**2 * np.eye(n)
        eta = np.linalg.cholesky(C) @ rng.standard_normal(n)
    else:
        eta = np.zeros(n)
    data.y = X @ np.asarray(beta, dtype=float) + eta + sigma * rng.standard_normal(n)
    return data, eta


__all__ = [
    "GPDataset", "GPParams", "GPPriors", "MCMCSettings", "PosteriorDraws", "Prediction", "Comparison",
    "beta_intervals", "mixture_quantile", "cov_matrix", "log_likelihood", "log_posterior", "sample_posterior", "fit_lr_baseline", "predict",
    "compare", "decompose", "coefficient_summary", "simulate_dataset", "distance_matrix",
]
