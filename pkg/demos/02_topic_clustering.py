"""Pool topics from many posterior samples and collapse them into stable clusters."""
import numpy as np

from stmgeo.topic_summary import TopicBag, cluster, select

rng = np.random.default_rng(0)
V, K, n_samples = 60, 6, 20

# six well-separated base topics, each concentrated on its own block of products
base = np.full((K, V), 0.2 / V)
for k in range(K):
    base[k, k * 10:(k + 1) * 10] += 0.08
base /= base.sum(axis=1, keepdims=True)

# every "posterior sample" is a noisy copy of all six, plus one junk topic that never repeats
topics, index = [], []
for s in range(n_samples):
    for t in base:
        topics.append(rng.dirichlet(500 * t))
        index.append(s)
    topics.append(rng.dirichlet(np.full(V, 0.3)))
    index.append(s)
bag = TopicBag(np.array(topics), np.array(index))

clusters = cluster(bag, threshold=0.35)
print(len(bag), "topics ->", len(clusters), "clusters, sizes", sorted((c.size for c in clusters), reverse=True))

kept = select(clusters, min_size=10)
print("kept at min size 10:", len(kept))
for c in kept:
    print("  cluster of", c.size, "top products", np.argsort(c.mean)[::-1][:5])
