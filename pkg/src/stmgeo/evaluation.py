"""Topic and model quality metrics, topic alignment and convergence diagnostics."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus

log = logging.getLogger(__name__)

NPMI_EPS = 1e-12


def cosine_similarity_matrix(A, B) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    An = A / np.linalg.norm(A, axis=1, keepdims=True)
    Bn = B / np.linalg.norm(B, axis=1, keepdims=True)
    return np.clip(An @ Bn.T, -1.0, 1.0)


def cosine_distance(x, y) -> float:
    return float(1.0 - cosine_similarity_matrix(x, y)[0, 0])


def perplexity(heldout: Corpus, phi, theta, a: float = 0.5, b: float = 3.0,
               smoothing: float = 0.01) -> float:
    """Average negative log-likelihood per held-out token.

    Each basket's mixture is replaced by its prior mean, the store mixture,
    so a token's probability is ``sum_k theta[d, k] * phi[k, w]``. ``a`` and
    ``b`` only enter through that mean and are accepted for completeness.
    If some token has zero probability, every topic row is smoothed as
    ``(phi + smoothing) / (1 + V * smoothing)`` first.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    words, _, stores = heldout.flatten()
    if words.size == 0:
        raise ValueError("held-out corpus has no tokens")
    probs = np.einsum("ik,ki->i", theta[stores], phi[:, words])
    if np.any(probs <= 0):
        V = phi.shape[1]
        phi = (phi + smoothing) / (1.0 + V * smoothing)
        probs = np.einsum("ik,ki->i", theta[stores], phi[:, words])
    return float(-np.mean(np.log(probs)))


class Cooccurrence:
    """Basket-level document frequencies of products and product pairs."""

    def __init__(self, corpus: Corpus):
        n = corpus.n_baskets
        if n == 0:
            raise ValueError("corpus has no baskets")
        rows = np.repeat(np.arange(n), corpus.basket_sizes())
        cols = np.concatenate(corpus.baskets) if n else np.zeros(0, int)
        inc = np.zeros((n, corpus.V), dtype=np.float64)
        inc[rows, cols] = 1.0
        self.n = n
        self.incidence = inc
        self.p_single = inc.mean(axis=0)

    def p_pair(self, i, j) -> float:
        return float(np.mean(self.incidence[:, i] * self.incidence[:, j]))


def npmi(topic, corpus: Corpus | Cooccurrence, top_n: int = 15) -> float:
    """Mean normalised PMI over unordered pairs of the ``top_n`` most probable products.

    Probabilities are basket frequencies. A pair that never co-occurs, or
    involves a product never observed, scores -1.
    """
    if top_n < 2:
        raise ValueError("top_n must be at least 2")
    co = corpus if isinstance(corpus, Cooccurrence) else Cooccurrence(corpus)
    topic = np.asarray(topic, dtype=float)
    top = np.argsort(-topic, kind="stable")[:top_n]
    scores = []
    for a_i in range(len(top)):
        for b_i in range(a_i + 1, len(top)):
            i, j = top[a_i], top[b_i]
            pi, pj, pij = co.p_single[i], co.p_single[j], co.p_pair(i, j)
            if pij == 0.0 or pi == 0.0 or pj == 0.0:
                scores.append(-1.0)
                continue
            if pij == 1.0:
                # every basket holds both: independent and perfectly associated at once
                scores.append(1.0)
                continue
            pmi = np.log((pij + NPMI_EPS) / (pi * pj + NPMI_EPS))
            scores.append(float(pmi / -np.log(pij + NPMI_EPS)))
    return float(np.mean(scores))


def distinctiveness(topic, peers) -> float:
    """Smallest cosine distance from ``topic`` to any peer; ``nan`` without peers."""
    peers = np.atleast_2d(np.asarray(peers, dtype=float))
    if peers.size == 0:
        return float("nan")
    return float(1.0 - cosine_similarity_matrix(topic, peers).max())


def credibility(topic, other_samples) -> float:
    """Mean over other posterior samples of the best cosine match to ``topic``."""
    if len(other_samples) == 0:
        raise ValueError("credibility needs at least one other sample")
    best = [cosine_similarity_matrix(topic, s).max() for s in other_samples]
    return float(np.mean(best))


@dataclass
class AlignmentResult:
    pairs: list[tuple[int, int, float]]
    unmatched: list[int]
    unmatched_side: str  # "A" or "B"

    def similarities(self) -> np.ndarray:
        return np.array([s for _, _, s in self.pairs])

    def permutation(self) -> np.ndarray:
        """Indices into B ordered to match A (requires |B| >= |A|)."""
        perm = np.full(len(self.pairs), -1)
        for i, j, _ in self.pairs:
            perm[i] = j
        return perm


def align_greedy(A, B) -> AlignmentResult:
    """Repeatedly pair the most similar rows of A and B not yet paired.

    Ties resolve to the lowest A index, then the lowest B index.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if len(A) == 0 or len(B) == 0:
        raise ValueError("both topic sets must be non-empty")
    sim = cosine_similarity_matrix(A, B)
    work = sim.copy()
    pairs = []
    for _ in range(min(len(A), len(B))):
        i, j = np.unravel_index(np.argmax(work), work.shape)
        pairs.append((int(i), int(j), float(sim[i, j])))
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    used_a = {i for i, _, _ in pairs}
    used_b = {j for _, j, _ in pairs}
    if len(A) >= len(B):
        return AlignmentResult(pairs, [i for i in range(len(A)) if i not in used_a], "A")
    return AlignmentResult(pairs, [j for j in range(len(B)) if j not in used_b], "B")


def rhat(traces, split: bool = True) -> float:
    """Potential scale reduction factor for equal-length chains.

    With ``split`` each chain is halved first. The within-chain variance
    carries the same ``(n-1)/n`` factor as the pooled estimate, so the result
    is ``sqrt(1 + B / (n W))`` which is 1 exactly when all segment means agree.
    """
    x = np.asarray(traces, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two chains of equal length")
    if x.shape[1] < 10:
        raise ValueError("chains must have at least 10 draws")
    if split:
        half = x.shape[1] // 2
        x = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = x.shape[1]
    within = x.var(axis=1, ddof=1).mean()
    between = n * x.mean(axis=1).var(ddof=1)
    if within == 0.0:
        return 1.0 if between == 0.0 else float("inf")
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / ((n - 1) / n * within)))
