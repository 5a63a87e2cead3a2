"""Segmented topic models for store-level basket data and spatial regression of topic prevalence."""
from .corpus import Corpus, Vocabulary, build_corpus, ingest, split
from .stm import StmConfig, run_chains, simulate
from .topic_summary import TopicBag, cluster, select

__version__ = "0.1.0"

__all__ = [
    "Corpus", "Vocabulary", "build_corpus", "ingest", "split",
    "StmConfig", "run_chains", "simulate",
    "TopicBag", "cluster", "select",
]
