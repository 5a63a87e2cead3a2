import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmgeo.corpus import Corpus, Vocabulary
from stmgeo.evaluation import Cooccurrence, cosine_similarity_matrix
from stmgeo.stm import PosteriorSample, StmConfig, simulate
from stmgeo.topic_summary import TopicBag, cluster, grid_evaluate, select, subset_metrics


def reference_cluster(topics, sample_index, threshold):
    """Direct transcription of the list-based procedure: full rescan every step."""
    clusters = {i: ([i], {int(s)}) for i, s in enumerate(sample_index)}
    dist = {}

    def d(ci, cj):
        mi = np.mean(topics[clusters[ci][0]], axis=0)
        mj = np.mean(topics[clusters[cj][0]], axis=0)
        return 1.0 - float(cosine_similarity_matrix(mi, mj)[0, 0])

    ids = sorted(clusters)
    for a in ids:
        for b in ids:
            if a < b:
                dist[(a, b)] = d(a, b)
    while dist:
        (a, b), best = min(dist.items(), key=lambda kv: (kv[1], kv[0]))
        if best > threshold:
            break
        if clusters[a][1].isdisjoint(clusters[b][1]):
            clusters[a] = (sorted(clusters[a][0] + clusters[b][0]), clusters[a][1] | clusters[b][1])
            del clusters[b]
            dist = {k: v for k, v in dist.items() if b not in k and a not in k}
            for c in clusters:
                if c != a:
                    dist[(min(a, c), max(a, c))] = d(min(a, c), max(a, c))
        else:
            dist[(a, b)] = 1.0
    return sorted(tuple(m) for m, _ in clusters.values())


def separated_topics(n_topics, V, rng):
    base = np.full((n_topics, V), 0.2 / V)
    block = V // n_topics
    for k in range(n_topics):
        base[k, k * block:(k + 1) * block] += 0.8 / block
    return base / base.sum(1, keepdims=True)


def noisy_bag(n_topics, n_samples, V, concentration, seed):
    rng = np.random.default_rng(seed)
    base = separated_topics(n_topics, V, rng)
    topics = np.concatenate([[rng.dirichlet(concentration * t) for t in base] for _ in range(n_samples)])
    return TopicBag(topics, np.repeat(np.arange(n_samples), n_topics))


def test_identical_topics_from_two_samples_merge():
    t = np.array([[0.5, 0.3, 0.2]] * 2)
    out = cluster(TopicBag(t, [1, 2]), 0.35)
    assert len(out) == 1 and out[0].size == 2


def test_identical_topics_from_same_sample_never_merge():
    t = np.array([[0.5, 0.3, 0.2]] * 2)
    out = cluster(TopicBag(t, [1, 1]), 0.35)
    assert sorted(c.size for c in out) == [1, 1]


def test_replicated_separated_topics():
    bag = noisy_bag(3, 8, 30, 2000, seed=0)
    out = cluster(bag, 0.35)
    assert sorted(c.size for c in out) == [8, 8, 8]
    for c in out:
        assert len(c.samples) == c.size
        assert c.mean.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(6))
def test_matches_reference_transcription(seed):
    rng = np.random.default_rng(seed)
    n_samples, per = 5, 4
    topics = rng.dirichlet(np.full(6, 0.7), size=n_samples * per)
    idx = np.repeat(np.arange(n_samples), per)
    got = sorted(tuple(c.members) for c in cluster(TopicBag(topics, idx), 0.3))
    assert got == reference_cluster(topics, idx, 0.3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.9))
def test_no_cluster_repeats_a_sample(seed, threshold):
    rng = np.random.default_rng(seed)
    topics = rng.dirichlet(np.full(5, 0.5), size=24)
    idx = rng.integers(0, 6, size=24)
    out = cluster(TopicBag(topics, idx), threshold)
    assert sum(c.size for c in out) == 24
    for c in out:
        assert len({int(idx[m]) for m in c.members}) == c.size


def test_permutation_invariance_without_ties():
    bag = noisy_bag(4, 6, 20, 300, seed=3)
    base = {frozenset(c.members) for c in cluster(bag, 0.35)}
    perm = np.random.default_rng(0).permutation(len(bag))
    out = cluster(TopicBag(bag.topics[perm], bag.sample_index[perm]), 0.35)
    assert {frozenset(int(perm[m]) for m in c.members) for c in out} == base


def test_select():
    bag = noisy_bag(3, 5, 30, 2000, seed=1)
    clusters = cluster(bag, 0.35)
    assert [c.members for c in select(clusters, 1)] == [c.members for c in clusters]
    with pytest.warns(RuntimeWarning):
        assert select(clusters, 6) == []


def test_noise_topics_do_not_disturb_recurrent_clusters():
    bag = noisy_bag(3, 6, 30, 2000, seed=2)
    base = {frozenset(c.members) for c in cluster(bag, 0.3) if c.size >= 2}
    rng = np.random.default_rng(9)
    noise = rng.dirichlet(np.full(30, 0.05), size=5)
    noisy = TopicBag(np.vstack([bag.topics, noise]), np.concatenate([bag.sample_index, np.arange(100, 105)]))
    got = {frozenset(c.members) for c in cluster(noisy, 0.3) if c.size >= 2}
    assert got == base


def test_bag_from_samples_and_validation():
    s = [PosteriorSample(np.full((2, 3), 1 / 3), np.ones((1, 2)) / 2, c, 10) for c in range(3)]
    bag = TopicBag.from_samples(s)
    assert list(bag.sample_index) == [0, 0, 1, 1, 2, 2]
    assert bag.provenance == [(0, 10), (1, 10), (2, 10)]
    with pytest.raises(ValueError):
        TopicBag(np.ones((2, 3)), [0, 1])


def test_grid_rows():
    cfg = StmConfig(K=3, alpha=1.0, beta=0.05)
    sim = simulate(cfg, D=4, transactions_per_store=30, basket_size=6, seed=0, V=30)
    corpus = sim.corpus
    # a bag with one sample only: every cluster has size 1
    bag = TopicBag(sim.phi, [0, 0, 0])
    rows = grid_evaluate(bag, [0.35], [1, 2], corpus, corpus, cfg, refit_burn_in=5, refit_thin=5, refit_samples=2)
    assert [r["n_clusters"] for r in rows] == [3, 0]
    assert np.isfinite(rows[0]["perplexity"]) and np.isnan(rows[1]["perplexity"])


def test_subset_metrics_empty():
    corpus = Corpus(Vocabulary(("a", "b")), ("s",), [[0, 1]], [0])
    bag = TopicBag(np.array([[0.5, 0.5]]), [0])
    m = subset_metrics(np.zeros((0, 2)), bag, Cooccurrence(corpus))
    assert all(np.isnan(v) for v in m.values())
