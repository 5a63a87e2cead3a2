import math
from collections import Counter

import numpy as np
import pytest

from oracles import exact_posterior, joint_weight, total_variation
from stmgeo.corpus import Corpus, Vocabulary
from stmgeo.stm import (
    StmConfig,
    estimate,
    estimate_nu,
    estimate_theta,
    gibbs_sweep,
    gibbs_update,
    init_state,
    joint_log_prob,
    refit_fixed_topics,
    run_chains,
    simulate,
)

TINY_BASKETS = [[0, 1], [0, 0]]


def tiny_corpus(baskets=TINY_BASKETS, V=2):
    return Corpus(Vocabulary(tuple(f"w{v}" for v in range(V))), ("s",), baskets, [0] * len(baskets))


def test_config_defaults_follow_full_scale_settings():
    cfg = StmConfig(K=100)
    assert np.allclose(cfg.alpha_vec(), 10.0)
    assert np.allclose(cfg.beta_vec(3), 0.01)
    assert (cfg.a, cfg.b) == (0.5, 3.0)
    with pytest.raises(ValueError):
        StmConfig(K=0)
    with pytest.raises(ValueError):
        StmConfig(a=1.0)
    with pytest.raises(ValueError):
        StmConfig(a=0.5, b=-0.6)


def test_simulate_single_topic():
    sim = simulate(StmConfig(K=1, beta=0.1), D=3, transactions_per_store=5, basket_size=4, seed=0, V=10)
    assert np.all(sim.topics == 0)
    np.testing.assert_array_equal(sim.theta, np.ones((3, 1)))


def test_simulate_large_strength_recovers_store_mixture():
    cfg = StmConfig(K=4, alpha=1.0, beta=0.1, a=0.0, b=1e6)
    sim = simulate(cfg, D=1, transactions_per_store=10_000, basket_size=10, seed=5, V=5)
    freq = np.bincount(sim.topics, minlength=4) / sim.topics.size
    assert sim.topics.size == 100_000
    assert np.abs(freq - sim.theta[0]).sum() < 0.02


def test_simulate_term_frequencies_match_topics():
    cfg = StmConfig(K=5, alpha=1.0, beta=0.05)
    sim = simulate(cfg, D=20, transactions_per_store=625, basket_size=8, seed=11, V=50)
    words, _, _ = sim.corpus.flatten()
    assert words.size == 100_000
    for k in range(5):
        emp = np.bincount(words[sim.topics == k], minlength=50)
        emp = emp / emp.sum()
        assert np.abs(emp - sim.phi[k]).sum() < 0.05


def test_init_single_token_opens_a_table():
    corpus = tiny_corpus([[1]])
    cfg = StmConfig(K=2, alpha=1.0, beta=1.0)
    topics = []
    for seed in range(400):
        state = init_state(corpus, cfg, seed)
        assert state.u[0] == 1
        topics.append(state.z[0])
    # uniform over the two topics
    assert abs(np.mean(topics) - 0.5) < 0.1


def test_init_is_valid_and_deterministic():
    cfg = StmConfig(K=4, alpha=0.5, beta=0.1)
    sim = simulate(cfg, D=4, transactions_per_store=20, basket_size=6, seed=2, V=15)
    s1 = init_state(sim.corpus, cfg, 9)
    s2 = init_state(sim.corpus, cfg, 9)
    s1.check_invariants()
    for name in ("z", "u", "n_pk", "t_pk", "M_kv"):
        np.testing.assert_array_equal(getattr(s1, name), getattr(s2, name))


def test_single_topic_sweep_keeps_topics():
    cfg = StmConfig(K=1, beta=0.1)
    sim = simulate(cfg, D=2, transactions_per_store=10, basket_size=5, seed=0, V=8)
    state = init_state(sim.corpus, cfg, 0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        gibbs_sweep(state, sim.corpus, cfg, rng)
        assert np.all(state.z == 0)
        assert np.all((state.t_pk[:, 0] >= 1) & (state.t_pk[:, 0] <= state.N_p))
        state.check_invariants()


def test_counts_conserved_every_sweep():
    cfg = StmConfig(K=3, alpha=1.0, beta=0.1, shuffle=True)
    sim = simulate(cfg, D=3, transactions_per_store=15, basket_size=5, seed=4, V=12)
    state = init_state(sim.corpus, cfg, 1)
    rng = np.random.default_rng(1)
    sizes = sim.corpus.basket_sizes()
    for _ in range(30):
        gibbs_sweep(state, sim.corpus, cfg, rng)
        np.testing.assert_array_equal(state.n_pk.sum(1), sizes)
        state.check_invariants()


def test_per_token_updates_preserve_constraints():
    cfg = StmConfig(K=3, alpha=0.3, beta=0.2, a=0.7, b=0.5)
    sim = simulate(cfg, D=2, transactions_per_store=6, basket_size=6, seed=8, V=6)
    state = init_state(sim.corpus, cfg, 0)
    rng = np.random.default_rng(0)
    for tok in rng.integers(0, len(state.words), size=2_000):
        gibbs_update(state, cfg, rng, [tok])
        state.check_invariants()


def test_sampler_matches_enumerated_posterior_short_run():
    cfg = StmConfig(K=2, alpha=1.0, beta=1.0, a=0.5, b=3.0)
    exact, _ = exact_posterior(TINY_BASKETS, 2, 2, 1.0, 1.0, 0.5, 3.0)
    corpus = tiny_corpus()
    state = init_state(corpus, cfg, 3)
    rng = np.random.default_rng(3)
    counts = Counter()
    for _ in range(500):
        gibbs_sweep(state, corpus, cfg, rng)
    for _ in range(100_000):
        gibbs_sweep(state, corpus, cfg, rng)
        counts[(tuple(state.z), tuple(state.t_pk.ravel()))] += 1
    assert total_variation(exact, counts) < 0.02


def _state_from(corpus, K, z, u):
    """Build a sampler state with the given assignments via the invariant-checked counts."""
    cfg = StmConfig(K=K, alpha=1.0, beta=1.0)
    state = init_state(corpus, cfg, 0)
    state.z[:] = z
    state.u[:] = u
    state.n_pk[:] = 0
    state.t_pk[:] = 0
    np.add.at(state.n_pk, (state.seg, state.z), 1)
    np.add.at(state.t_pk, (state.seg, state.z), state.u)
    state.t_dk[:] = 0
    np.add.at(state.t_dk, corpus.stores, state.t_pk)
    state.t_d[:] = state.t_dk.sum(1)
    state.T_p[:] = state.t_pk.sum(1)
    state.N_p[:] = state.n_pk.sum(1)
    state.M_kv[:] = 0
    np.add.at(state.M_kv, (state.z, state.words), 1)
    state.M_k[:] = state.M_kv.sum(1)
    state.check_invariants()
    return state


def test_joint_two_token_hand_value():
    corpus = tiny_corpus([[0, 1]])
    cfg = StmConfig(K=2, alpha=1.0, beta=1.0, a=0.5, b=3.0)
    state = _state_from(corpus, 2, [0, 0], [1, 0])
    # Beta(2,1)/Beta(1,1) * b/(b(b+1)) * S^2_1 * 1!1!/2! * Beta(2,2)/Beta(1,1)
    assert math.exp(joint_log_prob(state, corpus, cfg)) == pytest.approx(1 / 2 * 1 / 4 * 0.5 * 0.5 * 1 / 6)


def test_joint_agrees_with_oracle_and_normalises():
    corpus = tiny_corpus()
    cfg = StmConfig(K=2, alpha=1.0, beta=1.0, a=0.5, b=3.0)
    _, total = exact_posterior(TINY_BASKETS, 2, 2, 1.0, 1.0, 0.5, 3.0)
    import itertools

    acc = 0.0
    for z in itertools.product(range(2), repeat=4):
        for u in itertools.product((0, 1), repeat=4):
            w, _, _ = joint_weight(TINY_BASKETS, z, u, 2, 2, 1.0, 1.0, 0.5, 3.0)
            if w == 0:
                continue
            state = _state_from(corpus, 2, z, u)
            lp = joint_log_prob(state, corpus, cfg)
            assert np.isfinite(lp)
            assert math.exp(lp) == pytest.approx(w, rel=1e-10)
            acc += math.exp(lp)
    assert acc / total == pytest.approx(1.0, abs=1e-10)


def test_joint_invariant_to_token_order_within_basket():
    cfg = StmConfig(K=2, alpha=1.0, beta=1.0)
    c1 = tiny_corpus([[0, 1, 1]])
    c2 = tiny_corpus([[1, 0, 1]])
    s1 = _state_from(c1, 2, [0, 1, 1], [1, 1, 0])
    s2 = _state_from(c2, 2, [1, 0, 1], [1, 1, 0])
    assert joint_log_prob(s1, c1, cfg) == pytest.approx(joint_log_prob(s2, c2, cfg))


def test_theta_prior_mean_for_store_without_tables():
    cfg = StmConfig(K=3, alpha=np.array([1.0, 2.0, 3.0]), beta=1.0)
    corpus = Corpus(Vocabulary(("a", "b")), ("s0", "s1"), [[0, 1]], [0])
    state = init_state(corpus, cfg, 0)
    theta = estimate_theta(state, cfg)
    np.testing.assert_allclose(theta[1], [1 / 6, 2 / 6, 3 / 6])


def test_nu_reduces_with_zero_discount():
    cfg = StmConfig(K=2, alpha=1.0, beta=1.0, a=0.0, b=3.0)
    corpus = tiny_corpus([[0, 1, 1]])
    state = _state_from(corpus, 2, [0, 1, 1], [1, 1, 1])
    theta = estimate_theta(state, cfg)
    nu = estimate_nu(state, cfg, theta)
    expected = (state.n_pk[0] + 3.0 * theta[0]) / (3.0 + 3)
    np.testing.assert_allclose(nu[0], expected)
    assert nu[0].sum() == pytest.approx(1.0)


def test_estimates_normalised_on_random_states():
    cfg = StmConfig(K=4, alpha=0.5, beta=0.05)
    sim = simulate(cfg, D=5, transactions_per_store=10, basket_size=5, seed=1, V=20)
    state = init_state(sim.corpus, cfg, 2)
    sample = estimate(state, cfg)
    np.testing.assert_allclose(sample.theta.sum(1), 1.0, atol=1e-9)
    np.testing.assert_allclose(sample.phi.sum(1), 1.0, atol=1e-9)
    assert np.all(sample.phi > 0) and np.all(sample.theta > 0)
    np.testing.assert_allclose(estimate_nu(state, cfg).sum(1), 1.0, atol=1e-9)


def test_cadence_sample_counts():
    assert len(StmConfig(iters=100_000, burn_in=80_000, thin=5_000).sample_sweeps()) == 4
    desk = StmConfig(iters=2_000, burn_in=1_000, thin=200, chains=4)
    assert len(desk.sample_sweeps()) * desk.chains == 20


def test_run_chains_deterministic_and_traced():
    cfg = StmConfig(K=3, alpha=1.0, beta=0.1, iters=60, burn_in=20, thin=20, chains=2, seed=5)
    sim = simulate(cfg, D=3, transactions_per_store=10, basket_size=5, seed=0, V=10)
    r1 = run_chains(sim.corpus, cfg)
    r2 = run_chains(sim.corpus, cfg)
    assert [len(r.samples) for r in r1] == [2, 2]
    assert r1[0].trace_sweeps == [10, 20, 30, 40, 50, 60]
    for a, b in zip(r1, r2):
        assert a.trace == b.trace
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.phi, sb.phi)
    assert not np.array_equal(r1[0].samples[0].phi, r1[1].samples[0].phi)


def test_refit_single_topic():
    cfg = StmConfig(K=1, beta=0.1)
    sim = simulate(cfg, D=2, transactions_per_store=5, basket_size=4, seed=0, V=6)
    res = refit_fixed_topics(sim.corpus, sim.phi, cfg, burn_in=5, thin=5, n_samples=3)
    assert len(res.samples) == 3
    for s in res.samples:
        np.testing.assert_allclose(s.theta, 1.0)


def test_refit_leaves_term_counts_untouched_and_recovers_theta():
    cfg = StmConfig(K=5, alpha=1.0, beta=0.05)
    sim = simulate(cfg, D=20, transactions_per_store=200, basket_size=8, seed=21, V=50)
    res = refit_fixed_topics(sim.corpus, sim.phi, cfg, burn_in=100, thin=20, n_samples=10)
    assert res.final_state.M_kv.sum() == 0
    res.final_state.check_invariants(fixed_topics=True)
    theta_hat = np.mean([s.theta for s in res.samples], axis=0)
    assert np.abs(theta_hat - sim.theta).sum(1).mean() <= 0.15
