"""Store-segmented transaction corpora.

A corpus groups baskets (transactions) by store over a fixed product
vocabulary. Baskets hold unique vocabulary indices; the ``is_test`` mask
marks held-out baskets.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MIN_BASKET = 3


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.terms) == 0:
            raise CorpusError("vocabulary must contain at least one product")
        index = {t: i for i, t in enumerate(self.terms)}
        if len(index) != len(self.terms):
            raise CorpusError("duplicate product ids in vocabulary")
        object.__setattr__(self, "index", index)

    def __len__(self):
        return len(self.terms)

    def encode(self, products) -> list[int]:
        return [self.index[p] for p in products if p in self.index]


@dataclass
class Corpus:
    """Baskets of vocabulary indices, each tagged with a dense store index."""

    vocabulary: Vocabulary
    store_ids: tuple[str, ...]
    baskets: list[np.ndarray]
    stores: np.ndarray
    is_test: np.ndarray = None

    def __post_init__(self):
        self.stores = np.asarray(self.stores, dtype=np.int64)
        self.baskets = [np.asarray(b, dtype=np.int64) for b in self.baskets]
        if self.is_test is None:
            self.is_test = np.zeros(len(self.baskets), dtype=bool)
        self.is_test = np.asarray(self.is_test, dtype=bool)
        if not (len(self.baskets) == len(self.stores) == len(self.is_test)):
            raise CorpusError("baskets, stores and split tags differ in length")
        V, D = len(self.vocabulary), len(self.store_ids)
        for b in self.baskets:
            if b.size and (b.min() < 0 or b.max() >= V):
                raise CorpusError("basket item outside the vocabulary")
        if self.stores.size and (self.stores.min() < 0 or self.stores.max() >= D):
            raise CorpusError("store index out of range")

    @property
    def V(self) -> int:
        return len(self.vocabulary)

    @property
    def D(self) -> int:
        return len(self.store_ids)

    @property
    def n_baskets(self) -> int:
        return len(self.baskets)

    @property
    def n_tokens(self) -> int:
        return int(sum(len(b) for b in self.baskets))

    def basket_sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self.baskets], dtype=np.int64)

    def baskets_per_store(self) -> np.ndarray:
        return np.bincount(self.stores, minlength=self.D)

    def select(self, mask) -> Corpus:
        """Sub-corpus of the baskets where ``mask`` is true; store indexing is kept."""
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        return Corpus(
            self.vocabulary,
            self.store_ids,
            [self.baskets[i] for i in idx],
            self.stores[idx],
            self.is_test[idx],
        )

    def train(self) -> Corpus:
        return self.select(~self.is_test)

    def test(self) -> Corpus:
        return self.select(self.is_test)

    def flatten(self):
        """Token arrays ``(words, basket_of_token, store_of_token)``."""
        sizes = self.basket_sizes()
        words = (
            np.concatenate(self.baskets).astype(np.int64)
            if self.baskets
            else np.zeros(0, dtype=np.int64)
        )
        seg = np.repeat(np.arange(len(self.baskets)), sizes)
        return words, seg, self.stores[seg]

    def to_dict(self) -> dict:
        return {
            "vocabulary": list(self.vocabulary.terms),
            "store_ids": list(self.store_ids),
            "baskets": [
                {"store": int(s), "items": [int(i) for i in b], "test": bool(t)}
                for b, s, t in zip(self.baskets, self.stores, self.is_test)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> Corpus:
        rows = data["baskets"]
        return cls(
            Vocabulary(tuple(data["vocabulary"])),
            tuple(data["store_ids"]),
            [r["items"] for r in rows],
            [r["store"] for r in rows],
            [r.get("test", False) for r in rows],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> Corpus:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_records(self) -> list[dict]:
        """Line-delimited input records (original ids) that re-ingest to this corpus."""
        terms = self.vocabulary.terms
        return [
            {"store_id": self.store_ids[s], "products": [terms[i] for i in b]}
            for b, s in zip(self.baskets, self.stores)
        ]


def read_records(path) -> list[tuple[str, list[str]]]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                store = rec["store_id"]
                products = rec["products"]
                if not isinstance(products, list):
                    raise TypeError("products must be a list")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"malformed record on line {lineno}: {exc}") from exc
            records.append((str(store), [str(p) for p in products]))
    return records


def build_corpus(records, top_v: int, min_basket: int = MIN_BASKET) -> Corpus:
    """Restrict ``(store_id, products)`` records to the ``top_v`` most frequent products.

    Frequency counts each product once per basket. Ties are broken by product
    id, and the vocabulary is stored in product-id order so that re-ingesting
    the output reproduces the same indices.
    """
    if top_v < 1:
        raise CorpusError("top_v must be at least 1")
    deduped = [(store, list(dict.fromkeys(products))) for store, products in records]
    counts = Counter(p for _, products in deduped for p in products)
    if not counts:
        raise CorpusError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_v]
    vocab = Vocabulary(tuple(sorted(p for p, _ in ranked)))

    kept = []
    for store, products in deduped:
        items = sorted(vocab.encode(products))
        if len(items) >= min_basket:
            kept.append((store, items))
    if not kept:
        raise CorpusError("empty corpus after filtering")

    store_ids = tuple(sorted({s for s, _ in kept}))
    store_index = {s: i for i, s in enumerate(store_ids)}
    log.info("ingested %d baskets over %d stores, V=%d", len(kept), len(store_ids), len(vocab))
    return Corpus(
        vocab,
        store_ids,
        [items for _, items in kept],
        [store_index[s] for s, _ in kept],
    )


def ingest(path, top_v: int, min_basket: int = MIN_BASKET) -> Corpus:
    return build_corpus(read_records(path), top_v, min_basket)


def write_records(corpus: Corpus, path) -> None:
    with open(path, "w") as fh:
        for rec in corpus.to_records():
            fh.write(json.dumps(rec) + "\n")


def split(corpus: Corpus, test_fraction: float, seed: int) -> Corpus:
    """Tag a stratified random ``test_fraction`` of each store's baskets as held out.

    The overall test count is ``round(test_fraction * n_baskets)``, allocated
    to stores by largest remainder. Every store keeps at least one training
    basket, so single-basket stores never contribute test baskets.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    per_store = corpus.baskets_per_store()
    capacity = np.maximum(per_store - 1, 0)
    exact = test_fraction * per_store
    quota = np.minimum(np.floor(exact).astype(np.int64), capacity)
    target = min(int(round(test_fraction * corpus.n_baskets)), int(capacity.sum()))
    remainder = exact - quota
    order = sorted(range(corpus.D), key=lambda d: (-remainder[d], d))
    while quota.sum() < target:
        progressed = False
        for d in order:
            if quota.sum() >= target:
                break
            if quota[d] < capacity[d]:
                quota[d] += 1
                progressed = True
        if not progressed:
            break

    is_test = np.zeros(corpus.n_baskets, dtype=bool)
    for d in range(corpus.D):
        members = np.flatnonzero(corpus.stores == d)
        if quota[d]:
            is_test[rng.choice(members, size=quota[d], replace=False)] = True
    return Corpus(corpus.vocabulary, corpus.store_ids, corpus.baskets, corpus.stores, is_test)
