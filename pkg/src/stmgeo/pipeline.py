"""Configuration, persistence layout and the end-to-end run.

Every stage writes its outputs under one directory and records a marker in
``stages/`` holding a key derived from its parameters and input hashes. A
rerun skips any stage whose key and outputs are unchanged, so an
interrupted run resumes from the last completed stage.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import lgpr
from .corpus import Corpus, ingest, split
from .evaluation import Cooccurrence, credibility, distinctiveness, npmi, perplexity, rhat
from .geo import StoreGeo, inv_logit, logit, read_stores_csv
from .stm import ChainResult, PosteriorSample, StmConfig, mean_theta, refit_fixed_topics, run_chains
from .topic_summary import ClusteredTopic, TopicBag, cluster, select

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# ---------------------------------------------------------------- config


@dataclass
class IngestSettings:
    top_v: int = 10000
    min_basket: int = 3
    test_fraction: float = 0.1
    seed: int = 0


@dataclass
class SummarySettings:
    threshold: float = 0.35
    min_size: int = 10
    thresholds: tuple = (0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5)
    min_sizes: tuple = (2, 4, 6, 8, 10, 12, 14, 16, 18, 20)
    top_n: int = 15
    grid: bool = False


@dataclass
class RefitSettings:
    burn_in: int = 1000
    thin: int = 500
    samples: int = 30


@dataclass
class GPSettings:
    chains: int = 2
    iters: int = 2000
    burn_in: int = 1000
    thin: int = 5
    seed: int = 0
    test_fraction: float = 0.2
    topics: str = "all"

    def mcmc(self, topic: int) -> lgpr.MCMCSettings:
        return lgpr.MCMCSettings(self.chains, self.iters, self.burn_in, self.thin, self.seed + topic)


def full_scale_stm_config() -> StmConfig:
    return StmConfig(K=100, beta=0.01, a=0.5, b=3.0, iters=100_000, burn_in=80_000, thin=5_000, chains=4)


@dataclass
class PipelineConfig:
    transactions: str = ""
    stores: str = ""
    out: str = "out"
    ingest: IngestSettings = field(default_factory=IngestSettings)
    stm: StmConfig = field(default_factory=full_scale_stm_config)
    summary: SummarySettings = field(default_factory=SummarySettings)
    refit: RefitSettings = field(default_factory=RefitSettings)
    gp: GPSettings = field(default_factory=GPSettings)
    priors: lgpr.GPPriors = field(default_factory=lgpr.GPPriors)
    threads: int = 1

    def to_dict(self) -> dict:
        return {
            "paths": {"transactions": self.transactions, "stores": self.stores, "out": self.out},
            "ingest": asdict(self.ingest),
            "stm": self.stm.to_dict(),
            "summary": {**asdict(self.summary), "thresholds": list(self.summary.thresholds),
                        "min_sizes": list(self.summary.min_sizes)},
            "refit": asdict(self.refit),
            "gp": asdict(self.gp),
            "priors": asdict(self.priors),
        }

    def with_seed(self, seed: int) -> PipelineConfig:
        """Same configuration with every stage seed set to ``seed``."""
        from dataclasses import replace

        return replace(self, ingest=replace(self.ingest, seed=seed), stm=replace(self.stm, seed=seed),
                       gp=replace(self.gp, seed=seed))

    @classmethod
    def from_ini(cls, path) -> PipelineConfig:
        """Read an INI file; absent keys keep the defaults above."""
        ini = configparser.ConfigParser()
        if not ini.read(path):
            raise FileNotFoundError(path)
        base = Path(path).resolve().parent
        cfg = cls()

        def resolve(p):
            return str((base / p).resolve()) if p else ""

        if ini.has_section("paths"):
            sec = ini["paths"]
            cfg.transactions = resolve(sec.get("transactions", ""))
            cfg.stores = resolve(sec.get("stores", ""))
            cfg.out = resolve(sec.get("out", "out"))
        cfg.ingest = _fill(IngestSettings(), ini, "ingest")
        cfg.summary = _fill(SummarySettings(), ini, "summary")
        cfg.refit = _fill(RefitSettings(), ini, "refit")
        cfg.gp = _fill(GPSettings(), ini, "gp")
        cfg.priors = _fill(lgpr.GPPriors(), ini, "priors")
        if ini.has_section("stm"):
            stm = cfg.stm.to_dict()
            names = {k.lower(): k for k in stm}  # configparser lowercases keys
            for key, raw in ini["stm"].items():
                if key not in names:
                    raise ValueError(f"unknown [stm] key {key!r}")
                stm[names[key]] = _parse_like(stm[names[key]], raw, key)
            cfg.stm = StmConfig(**stm)
        if ini.has_section("run"):
            cfg.threads = ini["run"].getint("threads", 1)
        return cfg


def _parse_like(current, raw: str, key: str):
    raw = raw.strip()
    if key == "alpha":
        return None if raw.lower() in ("", "none", "default") else float(raw)
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        kind = type(current[0]) if current else float
        return tuple(kind(v) for v in raw.replace(",", " ").split())
    return raw


def _fill(obj, ini, section):
    if not ini.has_section(section):
        return obj
    values = asdict(obj)
    for key, raw in ini[section].items():
        if key not in values:
            raise ValueError(f"unknown [{section}] key {key!r}")
        values[key] = _parse_like(getattr(obj, key), raw, key)
    return type(obj)(**values)


# ---------------------------------------------------------------- persistence


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    return path


def save_chain(result: ChainResult, config: StmConfig, chain: int, path) -> Path:
    return _dump({
        "config": config.to_dict(),
        "chain": chain,
        "samples": [s.to_dict() for s in result.samples],
        "trace_sweeps": result.trace_sweeps,
        "trace": result.trace,
    }, path)


def load_chains(directory) -> list[dict]:
    files = sorted(Path(directory).glob("chain_*.json"), key=lambda f: int(f.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no chain_*.json files in {directory}")
    return [json.loads(f.read_text()) for f in files]


def load_samples(directory) -> list[PosteriorSample]:
    return [PosteriorSample.from_dict(s) for ch in load_chains(directory) for s in ch["samples"]]


def save_clusters(clusters: list[ClusteredTopic], bag: TopicBag, threshold, min_size, vocabulary, path) -> Path:
    return _dump({
        "threshold": threshold,
        "min_size": min_size,
        "n_samples": len(bag.provenance) or int(bag.sample_index.max()) + 1,
        "vocabulary": list(vocabulary) if vocabulary is not None else None,
        "clusters": [c.to_dict(bag) for c in clusters],
    }, path)


def load_topics(path) -> tuple[np.ndarray, list[int]]:
    data = json.loads(Path(path).read_text())
    clusters = data["clusters"]
    return np.array([c["mean"] for c in clusters]), [c["size"] for c in clusters]


def write_theta_csv(theta: np.ndarray, store_ids, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["store_id"] + [f"theta_{k}" for k in range(theta.shape[1])])
        for sid, row in zip(store_ids, theta):
            w.writerow([sid] + [repr(float(v)) for v in row])
    return path


def read_value_csv(path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Store ids and numeric columns of a CSV keyed by ``store_id``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        cols = [c for c in reader.fieldnames if c != "store_id"]
    ids = [r["store_id"] for r in rows]
    out = {}
    for c in cols:
        try:
            out[c] = np.array([float(r[c]) for r in rows])
        except ValueError:
            continue
    return ids, out


def join_stores(ids, stores: list[StoreGeo]) -> tuple[list[int], list[StoreGeo], list[str]]:
    """Row positions and metadata for ids with a store record, plus the unmatched ids."""
    by_id = {s.store_id: s for s in stores}
    rows, matched, skipped = [], [], []
    for i, sid in enumerate(ids):
        if sid in by_id:
            rows.append(i)
            matched.append(by_id[sid])
        else:
            skipped.append(sid)
    return rows, matched, skipped


def topic_dataset(theta_csv, stores_csv, topic: int) -> tuple[lgpr.GPDataset, list[str]]:
    """Logit topic probabilities joined with store metadata."""
    ids, cols = read_value_csv(theta_csv)
    key = f"theta_{topic}"
    if key not in cols:
        raise KeyError(f"{theta_csv} has no column {key}")
    rows, stores, skipped = join_stores(ids, read_stores_csv(stores_csv))
    return lgpr.GPDataset.from_stores(stores, logit(cols[key][rows])), skipped


def split_stores(n: int, test_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


GEOJSON_SCALES = ("probability", "logit")


def export_map(values_csv, stores_csv, column: str, *, input_scale: str = "probability",
               scale: str = "probability") -> tuple[dict, list[str]]:
    """GeoJSON points with ``{store_id, value}`` and the ids lacking store metadata."""
    if input_scale not in GEOJSON_SCALES or scale not in GEOJSON_SCALES:
        raise ValueError(f"scales must be one of {GEOJSON_SCALES}")
    ids, cols = read_value_csv(values_csv)
    if column not in cols:
        raise KeyError(f"{values_csv} has no numeric column {column!r}")
    values = cols[column]
    if input_scale != scale:
        values = logit(values) if scale == "logit" else inv_logit(values)
    rows, stores, skipped = join_stores(ids, read_stores_csv(stores_csv))
    features = []
    for i, s in zip(rows, stores):
        v = float(values[i])
        if not math.isfinite(v):
            skipped.append(ids[i])
            continue
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [s.lon, s.lat]},
            "properties": {"store_id": s.store_id, "value": v},
        })
    return {"type": "FeatureCollection", "features": features}, skipped


def topic_metrics(topics, sizes, bag: TopicBag, train: Corpus, heldout: Corpus, theta,
                  config: StmConfig, top_n: int = 15) -> list[dict]:
    """Per-topic coherence, distinctiveness and credibility plus an overall perplexity row."""
    cooc = Cooccurrence(train)
    sets = bag.sample_sets()
    rows = []
    for k, t in enumerate(topics):
        rows.append({
            "topic": str(k),
            "size": sizes[k],
            "npmi": npmi(t, cooc, top_n),
            "distinctiveness": distinctiveness(t, np.delete(topics, k, axis=0)),
            "credibility": credibility(t, sets),
            "perplexity": "",
        })
    pp = perplexity(heldout, topics, theta, config.a, config.b) if heldout.n_baskets else float("nan")
    mean = lambda key: float(np.nanmean([r[key] for r in rows])) if rows else float("nan")  # noqa: E731
    rows.append({"topic": "all", "size": int(sum(sizes)), "npmi": mean("npmi"),
                 "distinctiveness": mean("distinctiveness"), "credibility": mean("credibility"),
                 "perplexity": pp})
    return rows


METRIC_FIELDS = ["topic", "size", "npmi", "distinctiveness", "credibility", "perplexity"]


def write_metric_csv(rows, path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return Path(path)


def stm_rhat(chains: list[dict], burn_in: int) -> float | None:
    """Split R-hat of the post-burn-in joint log-probability traces."""
    traces = [[v for s, v in zip(ch["trace_sweeps"], ch["trace"]) if s > burn_in] for ch in chains]
    n = min((len(t) for t in traces), default=0)
    if len(traces) < 2 or n < 10:
        return None
    return rhat([t[:n] for t in traces])


# ---------------------------------------------------------------- run


class _Stages:
    def __init__(self, out: Path):
        self.out = out
        self.order: list[str] = []
        self.outputs: dict[str, list[str]] = {}

    def run(self, name: str, params: dict, inputs: list[Path], fn) -> list[Path]:
        key_src = json.dumps({"params": params, "inputs": {str(p.relative_to(self.out)) if p.is_relative_to(self.out)
                                                            else str(p): sha256_file(p) for p in inputs}},
                             sort_keys=True, default=str)
        key = hashlib.sha256(key_src.encode()).hexdigest()
        marker = self.out / "stages" / f"{name}.json"
        if marker.exists():
            done = json.loads(marker.read_text())
            if done["key"] == key and all(
                (self.out / p).exists() and sha256_file(self.out / p) == h for p, h in done["outputs"]
            ):
                log.info("stage %s up to date, skipping", name)
                self._record(name, [p for p, _ in done["outputs"]])
                return [self.out / p for p, _ in done["outputs"]]
        log.info("stage %s running", name)
        try:
            produced = [Path(p) for p in fn()]
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        rel = [str(p.relative_to(self.out)) for p in produced]
        _dump({"key": key, "outputs": [[p, sha256_file(self.out / p)] for p in rel]}, marker)
        self._record(name, rel)
        return produced

    def _record(self, name, rel):
        self.order.append(name)
        self.outputs[name] = rel


def run_pipeline(config: PipelineConfig) -> dict:
    """ingest, fit-stm, summarize-topics, refit-theta, eval, per-topic fit-gp, compare, export.

    Returns the manifest, also written to ``<out>/manifest.json``.
    """
    out = Path(config.out).resolve()
    out.mkdir(parents=True, exist_ok=True)
    st = _Stages(out)
    transactions, stores_csv = Path(config.transactions), Path(config.stores)
    for p in (transactions, stores_csv):
        if not p.exists():
            raise FileNotFoundError(p)
    cdict = config.to_dict()

    corpus_path = out / "corpus.json"

    def do_ingest():
        c = ingest(transactions, config.ingest.top_v, config.ingest.min_basket)
        c = split(c, config.ingest.test_fraction, config.ingest.seed)
        c.save(corpus_path)
        return [corpus_path]

    st.run("ingest", cdict["ingest"], [transactions], do_ingest)
    corpus = Corpus.load(corpus_path)
    train, heldout = corpus.train(), corpus.test()

    stm_dir = out / "stm"

    def do_fit():
        results = run_chains(train, config.stm, workers=config.threads)
        return [save_chain(r, config.stm, c, stm_dir / f"chain_{c}.json") for c, r in enumerate(results)]

    chain_files = st.run("fit-stm", cdict["stm"], [corpus_path], do_fit)
    chains = [json.loads(p.read_text()) for p in chain_files]
    samples = [PosteriorSample.from_dict(s) for ch in chains for s in ch["samples"]]
    if not samples:
        raise PipelineError("fit-stm", ValueError("no posterior samples recorded; check iters/burn_in/thin"))
    bag = TopicBag.from_samples(samples)

    topics_path = out / "topics" / "clustered_topics.json"

    def do_summarize():
        clusters = select(cluster(bag, config.summary.threshold), config.summary.min_size)
        if not clusters:
            raise ValueError("no clustered topic reaches the minimum size")
        return [save_clusters(clusters, bag, config.summary.threshold, config.summary.min_size,
                              corpus.vocabulary.terms, topics_path)]

    st.run("summarize-topics", cdict["summary"], chain_files, do_summarize)
    topics, sizes = load_topics(topics_path)

    if config.summary.grid:
        from .topic_summary import grid_evaluate, write_grid_csv

        grid_path = out / "topics" / "grid.csv"

        def do_grid():
            rows = grid_evaluate(bag, config.summary.thresholds, config.summary.min_sizes, train, heldout,
                                 config.stm, refit_burn_in=config.refit.burn_in, refit_thin=config.refit.thin,
                                 refit_samples=config.refit.samples, top_n=config.summary.top_n)
            write_grid_csv(rows, grid_path)
            return [grid_path]

        st.run("grid", {**cdict["summary"], **cdict["refit"]}, chain_files + [corpus_path], do_grid)

    theta_path = out / "theta.csv"

    def do_refit():
        res = refit_fixed_topics(train, topics, config.stm, burn_in=config.refit.burn_in,
                                 thin=config.refit.thin, n_samples=config.refit.samples)
        trace_path = _dump({"trace_sweeps": res.trace_sweeps, "trace": res.trace}, out / "refit_trace.json")
        return [write_theta_csv(mean_theta(res), corpus.store_ids, theta_path), trace_path]

    st.run("refit-theta", {**cdict["refit"], **cdict["stm"]}, [topics_path, corpus_path], do_refit)
    _, theta_cols = read_value_csv(theta_path)
    theta = np.column_stack([theta_cols[f"theta_{k}"] for k in range(len(topics))])

    metrics_path = out / "topic_metrics.csv"

    def do_eval():
        rows = topic_metrics(topics, sizes, bag, train, heldout, theta, config.stm, config.summary.top_n)
        return [write_metric_csv(rows, metrics_path)]

    st.run("eval-topics", {"top_n": config.summary.top_n}, [topics_path, theta_path, corpus_path], do_eval)

    topic_ids = (list(range(len(topics))) if config.gp.topics.strip().lower() == "all"
                 else [int(t) for t in config.gp.topics.replace(",", " ").split()])
    gp_params = {**cdict["gp"], "priors": cdict["priors"]}
    comparison_rows, gp_rhat, skipped_all = [], {}, set()
    for k in topic_ids:
        gp_dir = out / "gp" / f"topic_{k:03d}"

        def do_gp(k=k, gp_dir=gp_dir):
            data, skipped = topic_dataset(theta_path, stores_csv, k)
            tr_idx, te_idx = split_stores(data.n, config.gp.test_fraction, [config.gp.seed, k])
            tr, te = data.subset(tr_idx), data.subset(te_idx)
            mcmc = config.gp.mcmc(k)
            gp = lgpr.sample_posterior(tr, config.priors, mcmc)
            lr = lgpr.fit_lr_baseline(tr, config.priors, mcmc)
            gp_dir.mkdir(parents=True, exist_ok=True)
            gp.save(gp_dir / "draws.json")
            lr.save(gp_dir / "lr_draws.json")
            lgpr.write_coefficient_csv(gp, gp_dir / "coefficients.csv")
            lgpr.write_coefficient_csv(lr, gp_dir / "lr_coefficients.csv")
            lgpr.write_decomposition_csv(lgpr.decompose(tr, gp), tr, gp_dir / "residuals.csv")
            cmp = lgpr.compare(gp, lr, te) if te.n >= 2 else None
            _dump({
                "topic": k,
                "train": list(tr.store_ids), "test": list(te.store_ids), "skipped": skipped,
                "rhat": gp.rhat(), "acceptance": gp.acceptance,
                "comparison": None if cmp is None else lgpr.comparison_row(k, cmp),
            }, gp_dir / "summary.json")
            return [gp_dir / n for n in ("draws.json", "lr_draws.json", "coefficients.csv",
                                         "lr_coefficients.csv", "residuals.csv", "summary.json")]

        st.run(f"fit-gp-{k:03d}", gp_params, [theta_path, stores_csv], do_gp)
        summary = json.loads((gp_dir / "summary.json").read_text())
        gp_rhat[str(k)] = summary["rhat"]
        skipped_all.update(summary["skipped"])
        if summary["comparison"] is not None:
            comparison_rows.append(summary["comparison"])

    comparison_path = out / "comparison.csv"

    def do_compare():
        lgpr.write_comparison_csv(comparison_rows, comparison_path)
        return [comparison_path]

    st.run("compare-gp-lr", {"topics": topic_ids},
           [out / "gp" / f"topic_{k:03d}" / "summary.json" for k in topic_ids], do_compare)

    def do_export():
        produced = []
        for k in topic_ids:
            gj, _ = export_map(theta_path, stores_csv, f"theta_{k}")
            produced.append(_dump(gj, out / "maps" / f"theta_{k:03d}.geojson"))
            resid = out / "gp" / f"topic_{k:03d}" / "residuals.csv"
            gj, _ = export_map(resid, stores_csv, "spatial", input_scale="logit", scale="logit")
            produced.append(_dump(gj, out / "maps" / f"spatial_{k:03d}.geojson"))
        return produced

    st.run("export-map", {"topics": topic_ids},
           [theta_path] + [out / "gp" / f"topic_{k:03d}" / "residuals.csv" for k in topic_ids], do_export)

    diag_path = out / "diagnostics.json"

    def do_diag():
        return [_dump({"stm_log_prob_rhat": stm_rhat(chains, config.stm.burn_in), "gp_rhat": gp_rhat,
                       "skipped_stores": sorted(skipped_all)}, diag_path)]

    st.run("diagnostics", {}, chain_files + [out / "gp" / f"topic_{k:03d}" / "summary.json" for k in topic_ids],
           do_diag)

    artifacts = []
    for name in st.order:
        for rel in st.outputs[name]:
            artifacts.append({"stage": name, "path": rel, "sha256": sha256_file(out / rel)})
    manifest = {
        "config": {k: v for k, v in cdict.items() if k != "paths"},
        "inputs": {"transactions": sha256_file(transactions), "stores": sha256_file(stores_csv)},
        "stages": st.order,
        "artifacts": artifacts,
    }
    _dump(manifest, out / "manifest.json")
    return manifest
