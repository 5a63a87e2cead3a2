"""Summaries of multi-chain topic posteriors by constrained agglomerative clustering.

Topics from every posterior sample are pooled in a bag. Clusters merge
bottom-up by cosine distance between their mean topics, but two clusters
may only merge if no posterior sample contributes to both. Each surviving
cluster yields a *clustered topic* (the member mean) and a *size* (how many
samples it recurs in).
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .evaluation import Cooccurrence, credibility, distinctiveness, npmi, perplexity
from .stm import PosteriorSample, StmConfig, mean_theta, refit_fixed_topics

log = logging.getLogger(__name__)


@dataclass
class TopicBag:
    topics: np.ndarray  # (N, V), rows sum to one
    sample_index: np.ndarray  # (N,) posterior-sample id per topic
    provenance: list[tuple[int, int]] = field(default_factory=list)  # (chain, sweep) per sample id

    def __post_init__(self):
        self.topics = np.atleast_2d(np.asarray(self.topics, dtype=float))
        self.sample_index = np.asarray(self.sample_index, dtype=np.int64)
        if len(self.sample_index) != len(self.topics):
            raise ValueError("one sample index per topic is required")
        if not np.allclose(self.topics.sum(axis=1), 1.0, atol=1e-8):
            raise ValueError("topic rows must sum to one")

    def __len__(self):
        return len(self.topics)

    @classmethod
    def from_samples(cls, samples: list[PosteriorSample]) -> TopicBag:
        topics = np.concatenate([s.phi for s in samples])
        index = np.repeat(np.arange(len(samples)), [len(s.phi) for s in samples])
        return cls(topics, index, [(s.chain, s.sweep) for s in samples])

    def sample_sets(self) -> list[np.ndarray]:
        """Topics grouped by posterior sample, in sample-id order."""
        return [self.topics[self.sample_index == s] for s in np.unique(self.sample_index)]


@dataclass
class ClusteredTopic:
    mean: np.ndarray
    members: list[int]
    samples: frozenset

    @property
    def size(self) -> int:
        return len(self.members)

    def to_dict(self, bag: TopicBag | None = None) -> dict:
        out = {"size": self.size, "members": self.members, "samples": sorted(int(s) for s in self.samples),
               "mean": self.mean.tolist()}
        if bag is not None and bag.provenance:
            out["provenance"] = [list(bag.provenance[s]) for s in out["samples"]]
        return out


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def cluster(bag: TopicBag, threshold: float) -> list[ClusteredTopic]:
    """Agglomerate the bag until the closest mergeable pair is farther than ``threshold``.

    At each step the globally closest pair of clusters is examined (ties go
    to the lowest cluster ids, a cluster's id being its lowest member). The
    pair merges if their posterior samples are disjoint; otherwise their
    distance is set to 1 so the pair is not examined again. A merged
    cluster's distances to all others are recomputed from its new mean.
    """
    if len(bag) == 0:
        raise ValueError("empty topic bag")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    N = len(bag)
    means = bag.topics.copy()
    units = _unit(means)
    sizes = np.ones(N, dtype=np.int64)
    members = [[i] for i in range(N)]
    samples = [{int(s)} for s in bag.sample_index]
    active = np.ones(N, dtype=bool)

    dist = 1.0 - units @ units.T
    dist[np.tril_indices(N)] = np.inf
    row_min = np.full(N, np.inf)
    row_arg = np.full(N, -1)

    def refresh(r):
        if r < N - 1:
            j = int(np.argmin(dist[r]))
            row_min[r], row_arg[r] = dist[r, j], j
        else:
            row_min[r], row_arg[r] = np.inf, -1

    for r in range(N):
        refresh(r)

    merges = 0
    while True:
        i = int(np.argmin(row_min))
        d = row_min[i]
        if not np.isfinite(d) or d > threshold:
            break
        j = int(row_arg[i])
        if samples[i].isdisjoint(samples[j]):
            merges += 1
            total = sizes[i] + sizes[j]
            means[i] = (sizes[i] * means[i] + sizes[j] * means[j]) / total
            sizes[i] = total
            members[i] = sorted(members[i] + members[j])
            samples[i] |= samples[j]
            active[j] = False
            dist[j, :] = np.inf
            dist[:, j] = np.inf
            units[i] = _unit(means[i])
            others = np.flatnonzero(active)
            others = others[others != i]
            fresh = 1.0 - units[others] @ units[i]
            lower, upper = others < i, others > i
            dist[others[lower], i] = fresh[lower]
            dist[i, others[upper]] = fresh[upper]
            refresh(i)
            refresh(j)
            for r in others:
                if row_arg[r] in (i, j) or (r < i and (
                    dist[r, i] < row_min[r] or (dist[r, i] == row_min[r] and i < row_arg[r])
                )):
                    refresh(r)
        else:
            dist[i, j] = 1.0
            refresh(i)

    assert merges < N
    out = []
    for r in np.flatnonzero(active):
        mean = means[r] / means[r].sum()
        out.append(ClusteredTopic(mean, members[r], frozenset(samples[r])))
    return out


def select(clusters: list[ClusteredTopic], min_size: int) -> list[ClusteredTopic]:
    """Clusters recurring in at least ``min_size`` posterior samples."""
    if min_size < 1:
        raise ValueError("min_size must be at least 1")
    kept = [
        ClusteredTopic(c.mean / c.mean.sum(), c.members, c.samples)
        for c in clusters
        if c.size >= min_size
    ]
    if not kept:
        warnings.warn(f"no cluster reaches size {min_size}", RuntimeWarning, stacklevel=2)
    return kept


def topic_matrix(clusters: list[ClusteredTopic]) -> np.ndarray:
    return np.array([c.mean for c in clusters])


GRID_COLUMNS = ("threshold", "min_size", "n_clusters", "perplexity", "npmi", "distinctiveness", "credibility")


def subset_metrics(topics: np.ndarray, bag: TopicBag, cooc: Cooccurrence, top_n: int = 15) -> dict:
    """Mean coherence, distinctiveness and credibility of a set of topics."""
    if len(topics) == 0:
        return {"npmi": float("nan"), "distinctiveness": float("nan"), "credibility": float("nan")}
    sample_sets = bag.sample_sets()
    coh = [npmi(t, cooc, top_n) for t in topics]
    dis = [distinctiveness(t, np.delete(topics, k, axis=0)) for k, t in enumerate(topics)]
    cred = [credibility(t, sample_sets) for t in topics]
    return {
        "npmi": float(np.mean(coh)),
        "distinctiveness": float(np.nanmean(dis)) if len(topics) > 1 else float("nan"),
        "credibility": float(np.mean(cred)),
    }


def sample_baseline(bag: TopicBag, cooc: Cooccurrence, top_n: int = 15) -> dict:
    """Per-sample averages of the same metrics, for reference lines.

    Distinctiveness compares each topic with the other topics of its own
    sample, credibility with the topics of every other sample.
    """
    sets = bag.sample_sets()
    coh, dis, cred = [], [], []
    for s, topics in enumerate(sets):
        others = sets[:s] + sets[s + 1:]
        coh.append(np.mean([npmi(t, cooc, top_n) for t in topics]))
        if len(topics) > 1:
            dis.append(np.mean([distinctiveness(t, np.delete(topics, k, axis=0)) for k, t in enumerate(topics)]))
        if others:
            cred.append(np.mean([credibility(t, others) for t in topics]))
    mean = lambda v: float(np.mean(v)) if v else float("nan")  # noqa: E731
    return {"npmi": mean(coh), "distinctiveness": mean(dis), "credibility": mean(cred)}


def grid_evaluate(bag: TopicBag, thresholds, min_sizes, train: Corpus, heldout: Corpus,
                  config: StmConfig, *, refit_burn_in: int = 1000, refit_thin: int = 500,
                  refit_samples: int = 30, top_n: int = 15) -> list[dict]:
    """Metrics for every (threshold, minimum size) subset of clustered topics.

    Perplexity uses store mixtures refitted on ``train`` with the subset held
    fixed; coherence uses basket co-occurrence in ``train``.
    """
    cooc = Cooccurrence(train)
    rows = []
    for threshold in thresholds:
        clusters = cluster(bag, threshold)
        for min_size in min_sizes:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                subset = select(clusters, min_size)
            row = {"threshold": float(threshold), "min_size": int(min_size), "n_clusters": len(subset)}
            if subset:
                topics = topic_matrix(subset)
                refit = refit_fixed_topics(train, topics, config, burn_in=refit_burn_in,
                                           thin=refit_thin, n_samples=refit_samples)
                row["perplexity"] = perplexity(heldout, topics, mean_theta(refit), config.a, config.b)
            else:
                topics = np.zeros((0, bag.topics.shape[1]))
                row["perplexity"] = float("nan")
            row.update(subset_metrics(topics, bag, cooc, top_n))
            rows.append(row)
            log.info("grid cell %s", row)
    return rows


def write_grid_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in GRID_COLUMNS})
