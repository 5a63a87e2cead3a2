"""Segmented topic model: simulator, block Gibbs sampler and posterior estimates.

Stores play the role of documents and baskets the role of segments. Each
basket's topic mixture is a Poisson-Dirichlet draw centred on its store's
mixture; the sampler works on the collapsed representation with per-token
topic assignments ``z`` and table indicators ``u``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _kernels
from .corpus import Corpus, Vocabulary
from .pdp_math import StirlingCache, log_beta_rows, log_pochhammer_table

log = logging.getLogger(__name__)

TRACE_EVERY = 10


@dataclass
class StmConfig:
    """Model hyperparameters and MCMC cadence.

    ``alpha`` and ``beta`` accept a scalar (symmetric prior) or a full vector.
    ``alpha=None`` means the symmetric default ``1000 / K``.
    """

    K: int = 100
    alpha: float | np.ndarray | None = None
    beta: float | np.ndarray = 0.01
    a: float = 0.5
    b: float = 3.0
    iters: int = 2000
    burn_in: int = 1000
    thin: int = 200
    chains: int = 4
    seed: int = 0
    shuffle: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0.0 <= self.a < 1.0:
            raise ValueError("discount a must lie in [0, 1)")
        if self.b + self.a <= 0:
            raise ValueError("strength b must exceed -a")
        if np.any(self.alpha_vec() <= 0) or np.any(np.asarray(self.beta) <= 0):
            raise ValueError("Dirichlet hyperparameters must be positive")
        if self.thin < 1 or self.burn_in < 0 or self.iters < 0:
            raise ValueError("invalid MCMC cadence")

    def alpha_vec(self) -> np.ndarray:
        alpha = 1000.0 / self.K if self.alpha is None else self.alpha
        return np.broadcast_to(np.asarray(alpha, dtype=float), (self.K,)).copy()

    def beta_vec(self, V: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.beta, dtype=float), (V,)).copy()

    def sample_sweeps(self) -> list[int]:
        """Sweep numbers (1-based) at which posterior samples are recorded."""
        return list(range(self.burn_in + self.thin, self.iters + 1, self.thin))

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("alpha", "beta"):
            v = out[key]
            if isinstance(v, np.ndarray):
                out[key] = v.tolist()
        return out


@dataclass
class SamplerState:
    """Token assignments plus every count table derived from them."""

    words: np.ndarray
    seg: np.ndarray
    store: np.ndarray
    seg_start: np.ndarray
    z: np.ndarray
    u: np.ndarray
    n_pk: np.ndarray  # topic counts per basket
    t_pk: np.ndarray  # table counts per basket
    t_dk: np.ndarray  # table counts per store
    t_d: np.ndarray
    T_p: np.ndarray
    N_p: np.ndarray
    M_kv: np.ndarray  # term counts per topic
    M_k: np.ndarray
    stuck: int = 0

    @property
    def K(self) -> int:
        return self.n_pk.shape[1]

    def copy(self) -> SamplerState:
        kw = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return SamplerState(**kw)

    def check_invariants(self, fixed_topics: bool = False) -> None:
        """Raise ``AssertionError`` if the counts disagree with ``z`` and ``u``."""
        P, K = self.n_pk.shape
        D = self.t_dk.shape[0]
        n = np.zeros((P, K), dtype=np.int64)
        t = np.zeros((P, K), dtype=np.int64)
        np.add.at(n, (self.seg, self.z), 1)
        np.add.at(t, (self.seg, self.z), self.u)
        assert np.array_equal(n, self.n_pk), "basket topic counts inconsistent"
        assert np.array_equal(t, self.t_pk), "table counts inconsistent with indicators"
        occupied = n >= 1
        assert np.all(t[occupied] >= 1) and np.all(t <= n), "table count outside [1, n]"
        assert np.all(t[~occupied] == 0), "table on an empty topic"
        assert np.array_equal(n.sum(1), self.N_p), "basket sizes inconsistent"
        assert np.array_equal(t.sum(1), self.T_p), "basket table totals inconsistent"
        seg_store = self.store[self.seg_start[:-1]] if P else np.zeros(0, dtype=np.int64)
        tdk = np.zeros((D, K), dtype=np.int64)
        np.add.at(tdk, seg_store, t)
        assert np.array_equal(tdk, self.t_dk), "store table counts inconsistent"
        assert np.array_equal(tdk.sum(1), self.t_d), "store table totals inconsistent"
        if not fixed_topics:
            m = np.zeros_like(self.M_kv)
            np.add.at(m, (self.z, self.words), 1)
            assert np.array_equal(m, self.M_kv), "term counts inconsistent"
            assert np.array_equal(m.sum(1), self.M_k), "topic totals inconsistent"


@dataclass
class PosteriorSample:
    phi: np.ndarray
    theta: np.ndarray
    chain: int
    sweep: int

    def to_dict(self) -> dict:
        return {
            "chain": self.chain,
            "sweep": self.sweep,
            "phi": self.phi.tolist(),
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> PosteriorSample:
        return cls(np.asarray(data["phi"]), np.asarray(data["theta"]), data["chain"], data["sweep"])


@dataclass
class ChainResult:
    samples: list[PosteriorSample]
    trace_sweeps: list[int]
    trace: list[float]
    final_state: SamplerState = field(repr=False, default=None)


@dataclass
class Simulation:
    corpus: Corpus
    phi: np.ndarray
    theta: np.ndarray
    topics: np.ndarray  # flat token topics, corpus order

    def __iter__(self):
        return iter((self.corpus, self.phi, self.theta))


_caches: dict[float, StirlingCache] = {}


def stirling_cache(a: float, n: int) -> StirlingCache:
    """Process-wide cache per discount, shared by all chains."""
    cache = _caches.get(a)
    if cache is None:
        cache = _caches.setdefault(a, StirlingCache(a))
    cache.ensure(n)
    return cache


def simulate(config: StmConfig, D: int, transactions_per_store: int, basket_size: int,
             seed, V: int | None = None) -> Simulation:
    """Draw a synthetic corpus from the generative model.

    Basket mixtures are realised by sequential Chinese-restaurant seating with
    the store mixture as base measure. Duplicate products within a basket are
    kept. ``V`` defaults to the length of ``config.beta``.
    """
    rng = np.random.default_rng(seed)
    if V is None:
        V = np.size(config.beta)
        if V == 1:
            raise ValueError("V must be given when beta is a scalar")
    K, a, b = config.K, config.a, config.b
    phi = rng.dirichlet(config.beta_vec(V), size=K)
    theta = rng.dirichlet(config.alpha_vec(), size=D) if K > 1 else np.ones((D, 1))

    baskets, stores, topics = [], [], []
    for d in range(D):
        for _ in range(transactions_per_store):
            table_sizes: list[int] = []
            table_dish: list[int] = []
            zs = np.empty(basket_size, dtype=np.int64)
            for n in range(basket_size):
                T = len(table_sizes)
                probs = np.empty(T + 1)
                probs[:T] = np.asarray(table_sizes, dtype=float) - a
                probs[T] = b + a * T
                j = rng.choice(T + 1, p=probs / probs.sum()) if T else 0
                if j == T:
                    table_sizes.append(1)
                    table_dish.append(int(rng.choice(K, p=theta[d])) if K > 1 else 0)
                else:
                    table_sizes[j] += 1
                zs[n] = table_dish[j]
            ws = np.array([rng.choice(V, p=phi[k]) for k in zs], dtype=np.int64)
            baskets.append(ws)
            stores.append(d)
            topics.append(zs)
    vocab = Vocabulary(tuple(f"w{v:04d}" for v in range(V)))
    store_ids = tuple(f"s{d:04d}" for d in range(D))
    corpus = Corpus(vocab, store_ids, baskets, stores)
    return Simulation(corpus, phi, theta, np.concatenate(topics) if topics else np.zeros(0, int))


def _empty_state(corpus: Corpus, K: int) -> SamplerState:
    words, seg, store = corpus.flatten()
    P, D, V = corpus.n_baskets, corpus.D, corpus.V
    sizes = corpus.basket_sizes()
    seg_start = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
    i64 = np.int64
    return SamplerState(
        words=words, seg=seg, store=store, seg_start=seg_start,
        z=np.zeros(len(words), dtype=i64), u=np.zeros(len(words), dtype=i64),
        n_pk=np.zeros((P, K), i64), t_pk=np.zeros((P, K), i64),
        t_dk=np.zeros((D, K), i64), t_d=np.zeros(D, i64),
        T_p=np.zeros(P, i64), N_p=np.zeros(P, i64),
        M_kv=np.zeros((K, V), i64), M_k=np.zeros(K, i64),
    )


def _pass(state: SamplerState, config: StmConfig, rng: np.random.Generator, *,
          phi_fixed=None, initialise=False, order=None) -> int:
    n_tok = len(state.words) if order is None else len(order)
    max_basket = int(np.diff(state.seg_start).max()) if len(state.seg_start) > 1 else 0
    cache = stirling_cache(config.a, max_basket + 1)
    V = state.M_kv.shape[1]
    beta = config.beta_vec(V)
    alpha = config.alpha_vec()
    if order is None:
        order = rng.permutation(n_tok) if (config.shuffle and not initialise) else np.arange(n_tok)
    unif = rng.random(2 * n_tok)
    use_fixed = phi_fixed is not None
    phi = np.asarray(phi_fixed, dtype=float) if use_fixed else np.zeros((1, 1))
    s = state
    stuck = _kernels.gibbs_pass(
        s.words, s.seg, s.store, s.seg_start, order.astype(np.int64),
        s.z, s.u, s.n_pk, s.t_pk, s.t_dk, s.t_d, s.T_p, s.N_p, s.M_kv, s.M_k,
        alpha, float(alpha.sum()), beta, float(beta.sum()),
        float(config.a), float(config.b), np.ascontiguousarray(cache.table),
        phi, use_fixed, unif, initialise,
    )
    s.stuck += stuck
    return stuck


def init_state(corpus: Corpus, config: StmConfig, seed, *, phi_fixed=None) -> SamplerState:
    """Seat tokens one by one, each drawn from its conditional given those already placed."""
    if corpus.n_tokens == 0:
        raise ValueError("cannot initialise a sampler on an empty corpus")
    if phi_fixed is not None and np.shape(phi_fixed) != (config.K, corpus.V):
        raise ValueError("fixed topics must have shape (K, V)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = _empty_state(corpus, config.K)
    _pass(state, config, rng, phi_fixed=phi_fixed, initialise=True)
    return state


def gibbs_sweep(state: SamplerState, corpus: Corpus, config: StmConfig, rng, *,
                phi_fixed=None) -> SamplerState:
    """One in-place block Gibbs pass over every token."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    _pass(state, config, rng, phi_fixed=phi_fixed)
    return state


def gibbs_update(state: SamplerState, config: StmConfig, rng, tokens, *,
                 phi_fixed=None) -> SamplerState:
    """Resample only the given token positions, in the given order."""
    _pass(state, config, rng, phi_fixed=phi_fixed, order=np.asarray(tokens, dtype=np.int64))
    return state


def joint_log_prob(state: SamplerState, corpus: Corpus, config: StmConfig, *,
                   phi_fixed=None, with_arrangements: bool = True) -> float:
    """Collapsed log joint of words, topics and table indicators.

    With ``with_arrangements=False`` the value is the log joint of topics and
    table *counts*, i.e. the indicator-level value plus ``log C(n, t)`` summed
    over basket-topic pairs.
    """
    from scipy.special import gammaln

    s = state
    alpha = config.alpha_vec()
    n_max = int(s.N_p.max()) if s.N_p.size else 0
    cache = stirling_cache(config.a, n_max + 1)
    lp = float(np.sum(log_beta_rows(alpha[None, :] + s.t_dk)) - s.t_dk.shape[0] * log_beta_rows(alpha[None, :])[0])
    poch_ba = log_pochhammer_table(config.b, config.a, int(s.T_p.max()) if s.T_p.size else 0)
    poch_b = log_pochhammer_table(config.b, 1.0, n_max)
    lp += float(np.sum(poch_ba[s.T_p]) - np.sum(poch_b[s.N_p]))
    lp += float(np.sum(cache.table[s.n_pk, s.t_pk]))
    if with_arrangements:
        n, t = s.n_pk, s.t_pk
        lp += float(np.sum(gammaln(t + 1) + gammaln(n - t + 1) - gammaln(n + 1)))
    if phi_fixed is None:
        beta = config.beta_vec(corpus.V)
        lp += float(np.sum(log_beta_rows(beta[None, :] + s.M_kv)) - s.M_kv.shape[0] * log_beta_rows(beta[None, :])[0])
    else:
        with np.errstate(divide="ignore"):
            lp += float(np.sum(np.log(np.asarray(phi_fixed)[s.z, s.words])))
    return lp


def estimate_theta(state: SamplerState, config: StmConfig) -> np.ndarray:
    alpha = config.alpha_vec()
    num = alpha[None, :] + state.t_dk
    return num / num.sum(axis=1, keepdims=True)


def estimate_phi(state: SamplerState, config: StmConfig) -> np.ndarray:
    beta = config.beta_vec(state.M_kv.shape[1])
    num = beta[None, :] + state.M_kv
    return num / num.sum(axis=1, keepdims=True)


def estimate_nu(state: SamplerState, config: StmConfig, theta: np.ndarray | None = None) -> np.ndarray:
    """Per-basket mixture means, shape ``(P, K)``; computed on demand only."""
    if theta is None:
        theta = estimate_theta(state, config)
    a, b = config.a, config.b
    seg_store = state.store[state.seg_start[:-1]]
    denom = (b + state.N_p)[:, None]
    return (state.n_pk - a * state.t_pk) / denom + theta[seg_store] * ((a * state.T_p + b)[:, None] / denom)


def estimate(state: SamplerState, config: StmConfig, chain: int = 0, sweep: int = 0) -> PosteriorSample:
    return PosteriorSample(estimate_phi(state, config), estimate_theta(state, config), chain, sweep)


def run_chain(corpus: Corpus, config: StmConfig, chain: int, *, phi_fixed=None,
              sample_sweeps=None, trace_every: int = TRACE_EVERY) -> ChainResult:
    rng = np.random.default_rng(config.seed + chain)
    state = init_state(corpus, config, rng, phi_fixed=phi_fixed)
    record = set(config.sample_sweeps() if sample_sweeps is None else sample_sweeps)
    n_iters = max(record) if (sample_sweeps is not None and record) else config.iters
    samples, trace_sweeps, trace = [], [], []
    for sweep in range(1, n_iters + 1):
        _pass(state, config, rng, phi_fixed=phi_fixed)
        if sweep % trace_every == 0:
            trace_sweeps.append(sweep)
            trace.append(joint_log_prob(state, corpus, config, phi_fixed=phi_fixed))
        if sweep in record:
            if phi_fixed is None:
                samples.append(estimate(state, config, chain, sweep))
            else:
                samples.append(PosteriorSample(np.asarray(phi_fixed, float), estimate_theta(state, config), chain, sweep))
    log.debug("chain %d finished: %d samples, %d stuck token visits", chain, len(samples), state.stuck)
    return ChainResult(samples, trace_sweeps, trace, state)


def run_chains(corpus: Corpus, config: StmConfig, workers: int = 1) -> list[ChainResult]:
    """Independent chains seeded ``seed + chain``; samples after burn-in every ``thin`` sweeps.

    With ``workers > 1`` chains run in separate processes; results do not
    depend on the number of workers.
    """
    if workers <= 1 or config.chains == 1:
        return [run_chain(corpus, config, c) for c in range(config.chains)]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(workers, config.chains)) as pool:
        futures = [pool.submit(run_chain, corpus, config, c) for c in range(config.chains)]
        return [f.result() for f in futures]


def refit_fixed_topics(corpus: Corpus, phi_fixed, config: StmConfig, *, burn_in: int = 1000,
                       thin: int = 500, n_samples: int = 30, chain: int = 0) -> ChainResult:
    """Resample store and basket mixtures with the topics held at ``phi_fixed``.

    Only table counts and assignments move; term counts are never touched.
    Returns the chain result whose samples carry thinned store mixtures.
    """
    phi_fixed = np.asarray(phi_fixed, dtype=float)
    if not np.allclose(phi_fixed.sum(axis=1), 1.0):
        raise ValueError("fixed topic rows must sum to one")
    cfg = StmConfig(**{**config.to_dict(), "K": phi_fixed.shape[0],
                       "alpha": _refit_alpha(config, phi_fixed.shape[0])})
    sweeps = [burn_in + thin * (j + 1) for j in range(n_samples)]
    return run_chain(corpus, cfg, chain, phi_fixed=phi_fixed, sample_sweeps=sweeps)


def _refit_alpha(config: StmConfig, K: int):
    if config.alpha is None:
        return None
    alpha = np.asarray(config.alpha, dtype=float)
    if alpha.ndim == 0:
        return float(alpha)
    if alpha.shape != (K,):
        raise ValueError("vector alpha does not match the number of fixed topics")
    return alpha


def mean_theta(result: ChainResult) -> np.ndarray:
    return np.mean([s.theta for s in result.samples], axis=0)
