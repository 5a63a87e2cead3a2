"""Simulate baskets from known topics, fit the sampler, and check what comes back.

Run from the repository root:  python demos/01_simulate_and_fit.py
"""
import numpy as np

from stmgeo.evaluation import align_greedy, perplexity
from stmgeo.stm import StmConfig, mean_theta, refit_fixed_topics, run_chain, simulate

# A small world: 5 topics over 50 products, 20 stores with 200 baskets each.
cfg = StmConfig(K=5, alpha=1.0, beta=0.05, a=0.5, b=3.0, iters=1500, burn_in=500, thin=100, chains=1, seed=4)
sim = simulate(cfg, D=20, transactions_per_store=200, basket_size=8, seed=4, V=50)
print("stores", sim.corpus.D, "baskets", sim.corpus.n_baskets, "tokens", sim.corpus.n_tokens)

res = run_chain(sim.corpus, cfg, chain=0)
print("log joint, first and last trace points:", round(res.trace[0], 1), round(res.trace[-1], 1))

# Topics come back in arbitrary order, so match them to the truth first.
phi_hat = res.samples[-1].phi
match = align_greedy(sim.phi, phi_hat)
print("cosine per true topic:", np.round(match.similarities(), 3))

# With the topics frozen, re-estimate the store mixtures.
refit = refit_fixed_topics(sim.corpus, phi_hat[match.permutation()], cfg, burn_in=300, thin=30, n_samples=10)
theta = mean_theta(refit)
print("mean L1 error of store mixtures:", np.abs(theta - sim.theta).sum(axis=1).mean().round(3))

# Perplexity under the truth versus the fit (lower is better; log V is the uniform baseline).
print("perplexity  truth %.3f  fit %.3f  uniform %.3f" % (
    perplexity(sim.corpus, sim.phi, sim.theta), perplexity(sim.corpus, phi_hat[match.permutation()], theta),
    np.log(sim.corpus.V)))
