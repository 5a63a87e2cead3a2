"""Command line entry point: ``stmgeo <subcommand> ...``.

Settings not given on the command line come from ``--config`` (an INI file,
see ``demos/desk.ini``) and otherwise from the built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import lgpr, pipeline
from .corpus import Corpus, ingest, split, write_records
from .geo import ALL_REGIONS, StoreGeo, write_stores_csv
from .stm import StmConfig, mean_theta, refit_fixed_topics, run_chains, simulate
from .topic_summary import TopicBag, cluster, grid_evaluate, select, write_grid_csv

log = logging.getLogger("stmgeo")

# bounding box of Great Britain used for synthetic store locations
UK_BOX = ((50.5, 55.5), (-4.5, 1.5))


def _config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.from_ini(args.config) if args.config else pipeline.PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _pick(value, default):
    return default if value is None else value


def _stm_config(args, cfg: pipeline.PipelineConfig) -> StmConfig:
    base = cfg.stm
    return replace(
        base,
        K=_pick(getattr(args, "k", None), base.K),
        iters=_pick(getattr(args, "iters", None), base.iters),
        burn_in=_pick(getattr(args, "burn_in", None), base.burn_in),
        thin=_pick(getattr(args, "thin", None), base.thin),
        chains=_pick(getattr(args, "chains", None), base.chains),
    )


def _require_out(args):
    if not args.out:
        raise SystemExit(f"{args.command}: --out is required")
    return Path(args.out)


def cmd_ingest(args, cfg):
    c = ingest(args.input, _pick(args.top_v, cfg.ingest.top_v), _pick(args.min_basket, cfg.ingest.min_basket))
    c = split(c, _pick(args.test_fraction, cfg.ingest.test_fraction), cfg.ingest.seed)
    c.save(_require_out(args))
    print(f"{c.D} stores, {c.n_baskets} baskets ({int(c.is_test.sum())} held out), V={c.V}")


def cmd_split(args, cfg):
    c = split(Corpus.load(args.corpus), _pick(args.fraction, cfg.ingest.test_fraction), cfg.ingest.seed)
    c.save(_require_out(args))
    print(f"{int(c.is_test.sum())} of {c.n_baskets} baskets held out")


def cmd_simulate(args, cfg):
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.stm.seed
    stm = StmConfig(K=args.k, beta=args.beta, a=cfg.stm.a, b=cfg.stm.b,
                    alpha=args.alpha if args.alpha is not None else None)
    sim = simulate(stm, args.stores, args.baskets, args.basket_size, seed, V=args.v)
    write_records(sim.corpus, out / "transactions.jsonl")
    rng = np.random.default_rng([seed, 1])
    (lat_lo, lat_hi), (lon_lo, lon_hi) = UK_BOX
    stores = [
        StoreGeo(sid, float(rng.uniform(lat_lo, lat_hi)), float(rng.uniform(lon_lo, lon_hi)),
                 ALL_REGIONS[int(rng.integers(len(ALL_REGIONS)))])
        for sid in sim.corpus.store_ids
    ]
    write_stores_csv(stores, out / "stores.csv")
    pipeline._dump({"phi": sim.phi.tolist(), "theta": sim.theta.tolist(),
                    "vocabulary": list(sim.corpus.vocabulary.terms),
                    "store_ids": list(sim.corpus.store_ids)}, out / "truth.json")
    print(f"wrote {out}/transactions.jsonl, stores.csv, truth.json")


def cmd_fit_stm(args, cfg):
    stm = _stm_config(args, cfg)
    corpus = Corpus.load(args.corpus).train()
    out = _require_out(args)
    results = run_chains(corpus, stm, workers=cfg.threads)
    for c, r in enumerate(results):
        pipeline.save_chain(r, stm, c, out / f"chain_{c}.json")
    chains = pipeline.load_chains(out)
    print(f"{sum(len(r.samples) for r in results)} samples; "
          f"log-prob R-hat {pipeline.stm_rhat(chains, stm.burn_in)}")


def cmd_summarize(args, cfg):
    samples = pipeline.load_samples(args.samples)
    bag = TopicBag.from_samples(samples)
    threshold = _pick(args.threshold, cfg.summary.threshold)
    min_size = _pick(args.min_size, cfg.summary.min_size)
    clusters = select(cluster(bag, threshold), min_size)
    vocab = None
    if args.corpus:
        vocab = Corpus.load(args.corpus).vocabulary.terms
    pipeline.save_clusters(clusters, bag, threshold, min_size, vocab, _require_out(args))
    print(f"{len(clusters)} clustered topics with size >= {min_size}")


def cmd_grid(args, cfg):
    bag = TopicBag.from_samples(pipeline.load_samples(args.samples))
    corpus = Corpus.load(args.corpus)
    rows = grid_evaluate(bag, _pick(args.thresholds, cfg.summary.thresholds),
                         _pick(args.min_sizes, cfg.summary.min_sizes), corpus.train(), corpus.test(),
                         cfg.stm, refit_burn_in=cfg.refit.burn_in, refit_thin=cfg.refit.thin,
                         refit_samples=cfg.refit.samples, top_n=cfg.summary.top_n)
    write_grid_csv(rows, _require_out(args))
    print(f"{len(rows)} grid cells")


def cmd_refit(args, cfg):
    corpus = Corpus.load(args.corpus)
    topics, _ = pipeline.load_topics(args.topics)
    res = refit_fixed_topics(corpus.train(), topics, cfg.stm, burn_in=_pick(args.burn_in, cfg.refit.burn_in),
                             thin=_pick(args.thin, cfg.refit.thin), n_samples=_pick(args.samples, cfg.refit.samples))
    pipeline.write_theta_csv(mean_theta(res), corpus.store_ids, _require_out(args))
    print(f"store mixtures for {corpus.D} stores over {len(topics)} topics")


def cmd_eval(args, cfg):
    corpus = Corpus.load(args.corpus)
    heldout = Corpus.load(args.heldout).test() if args.heldout else corpus.test()
    topics, sizes = pipeline.load_topics(args.topics)
    if args.theta:
        _, cols = pipeline.read_value_csv(args.theta)
        theta = np.column_stack([cols[f"theta_{k}"] for k in range(len(topics))])
    else:
        theta = mean_theta(refit_fixed_topics(corpus.train(), topics, cfg.stm, burn_in=cfg.refit.burn_in,
                                              thin=cfg.refit.thin, n_samples=cfg.refit.samples))
    bag_samples = pipeline.load_samples(args.samples) if args.samples else None
    bag = TopicBag.from_samples(bag_samples) if bag_samples else TopicBag(topics, np.arange(len(topics)))
    rows = pipeline.topic_metrics(topics, sizes, bag, corpus.train(), heldout, theta, cfg.stm, cfg.summary.top_n)
    pipeline.write_metric_csv(rows, _require_out(args))
    print(f"held-out perplexity {rows[-1]['perplexity']:.4f}")


def cmd_fit_gp(args, cfg):
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    data, skipped = pipeline.topic_dataset(args.theta, args.stores, args.topic)
    if skipped:
        print(f"skipped {len(skipped)} stores without metadata: {', '.join(skipped[:10])}", file=sys.stderr)
    gp_cfg = cfg.gp
    if args.test_fraction is not None:
        gp_cfg = replace(gp_cfg, test_fraction=args.test_fraction)
    for name in ("chains", "iters", "burn_in", "thin"):
        if getattr(args, name) is not None:
            gp_cfg = replace(gp_cfg, **{name: getattr(args, name)})
    if gp_cfg.test_fraction > 0:
        tr_idx, te_idx = pipeline.split_stores(data.n, gp_cfg.test_fraction, [gp_cfg.seed, args.topic])
    else:
        tr_idx, te_idx = np.arange(data.n), np.arange(0)
    tr = data.subset(tr_idx)
    mcmc = gp_cfg.mcmc(args.topic)
    gp = lgpr.sample_posterior(tr, cfg.priors, mcmc)
    lr = lgpr.fit_lr_baseline(tr, cfg.priors, mcmc)
    gp.save(out / "draws.json")
    lr.save(out / "lr_draws.json")
    lgpr.write_coefficient_csv(gp, out / "coefficients.csv")
    lgpr.write_coefficient_csv(lr, out / "lr_coefficients.csv")
    lgpr.write_decomposition_csv(lgpr.decompose(tr, gp), tr, out / "residuals.csv")
    pipeline._dump({"topic": args.topic, "theta": str(Path(args.theta).resolve()),
                    "stores": str(Path(args.stores).resolve()),
                    "train": list(tr.store_ids), "test": [data.store_ids[i] for i in te_idx],
                    "skipped": skipped, "rhat": gp.rhat(), "acceptance": gp.acceptance}, out / "fit.json")
    worst = max(gp.rhat().values())
    print(f"{len(gp)} draws; max R-hat {worst:.3f}; acceptance {', '.join(f'{a:.2f}' for a in gp.acceptance)}")


def _load_fit(fit_dir):
    fit_dir = Path(fit_dir)
    meta = json.loads((fit_dir / "fit.json").read_text())
    data, _ = pipeline.topic_dataset(meta["theta"], meta["stores"], meta["topic"])
    pos = {sid: i for i, sid in enumerate(data.store_ids)}
    tr = data.subset([pos[s] for s in meta["train"]])
    te = data.subset([pos[s] for s in meta["test"]])
    gp = lgpr.PosteriorDraws.load(fit_dir / "draws.json", tr)
    lr = lgpr.PosteriorDraws.load(fit_dir / "lr_draws.json", tr)
    return meta, tr, te, gp, lr


def cmd_predict_gp(args, cfg):
    meta, tr, _, gp, lr = _load_fit(args.fit)
    from .geo import read_stores_csv

    new = lgpr.GPDataset.from_stores(read_stores_csv(args.stores))
    draws = lr if args.lr else gp
    pred = lgpr.predict(tr, draws, new)
    lgpr.write_prediction_csv(pred, new, _require_out(args))
    print(f"predictions for {new.n} stores")


def cmd_compare(args, cfg):
    rows = []
    for fit_dir in args.fit:
        meta, _, te, gp, lr = _load_fit(fit_dir)
        if te.n < 2:
            raise SystemExit(f"{fit_dir}: fewer than two held-out stores; refit with --test-fraction > 0")
        rows.append(lgpr.comparison_row(meta["topic"], lgpr.compare(gp, lr, te)))
    lgpr.write_comparison_csv(rows, _require_out(args))
    for r in rows:
        print(f"topic {r['topic']}: lppd LGPR {r['lgpr_lppd']:.2f} vs LR {r['lr_lppd']:.2f} (p={r['p_lppd']:.3g}); "
              f"MSE {r['lgpr_mse']:.4f} vs {r['lr_mse']:.4f} (p={r['p_mse']:.3g})")


def cmd_export_map(args, cfg):
    gj, skipped = pipeline.export_map(args.values, args.stores, args.column,
                                      input_scale=args.input_scale, scale=args.scale)
    out = _require_out(args)
    pipeline._dump(gj, out)
    if skipped:
        report = out.with_suffix(".skipped.txt")
        report.write_text("\n".join(skipped) + "\n")
        print(f"{len(skipped)} rows skipped, listed in {report}", file=sys.stderr)
    print(f"{len(gj['features'])} features")


def cmd_run_pipeline(args, cfg):
    if args.transactions:
        cfg.transactions = str(Path(args.transactions).resolve())
    if args.stores:
        cfg.stores = str(Path(args.stores).resolve())
    if args.out:
        cfg.out = str(Path(args.out).resolve())
    try:
        manifest = pipeline.run_pipeline(cfg)
    except pipeline.PipelineError as exc:
        print(f"pipeline halted in stage {exc.stage}: {exc.__cause__}", file=sys.stderr)
        raise SystemExit(2) from exc
    print(f"{len(manifest['artifacts'])} artifacts; manifest at {Path(cfg.out) / 'manifest.json'}")


def _floats(s):
    return tuple(float(v) for v in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(v) for v in s.replace(",", " ").split())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random stage")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes for chains")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="stmgeo", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("ingest", cmd_ingest, "build a corpus file from line-delimited transaction records")
    p.add_argument("--input", required=True)
    p.add_argument("--top-v", type=int)
    p.add_argument("--min-basket", type=int)
    p.add_argument("--test-fraction", type=float)

    p = add("split", cmd_split, "retag held-out baskets of a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--fraction", type=float)

    p = add("simulate", cmd_simulate, "write synthetic transactions, stores and ground truth")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--v", type=int, default=50)
    p.add_argument("--stores", type=int, default=20)
    p.add_argument("--baskets", type=int, default=200, help="baskets per store")
    p.add_argument("--basket-size", type=int, default=8)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float, default=0.05)

    p = add("fit-stm", cmd_fit_stm, "run sampler chains on the training baskets")
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--chains", type=int)

    p = add("summarize-topics", cmd_summarize, "cluster pooled posterior topics")
    p.add_argument("--samples", required=True, help="directory of chain_*.json")
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-size", type=int)
    p.add_argument("--corpus", help="corpus file, to store the vocabulary alongside")

    p = add("grid", cmd_grid, "evaluate a grid of thresholds and minimum sizes")
    p.add_argument("--samples", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--thresholds", type=_floats)
    p.add_argument("--min-sizes", type=_ints)

    p = add("refit-theta", cmd_refit, "store mixtures with clustered topics held fixed")
    p.add_argument("--corpus", required=True)
    p.add_argument("--topics", required=True)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--samples", type=int)

    p = add("eval-topics", cmd_eval, "per-topic metrics and held-out perplexity")
    p.add_argument("--topics", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--heldout", help="corpus whose held-out baskets are scored (default: --corpus)")
    p.add_argument("--theta", help="store mixture CSV from refit-theta (refitted if absent)")
    p.add_argument("--samples", help="chain directory, for credibility against posterior samples")

    p = add("fit-gp", cmd_fit_gp, "spatial regression of one topic's logit prevalence")
    p.add_argument("--theta", required=True)
    p.add_argument("--stores", required=True)
    p.add_argument("--topic", type=int, required=True)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--chains", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)

    p = add("predict-gp", cmd_predict_gp, "predict topic prevalence at new store locations")
    p.add_argument("--fit", required=True, help="directory written by fit-gp")
    p.add_argument("--stores", required=True)
    p.add_argument("--lr", action="store_true", help="use the linear-regression baseline")

    p = add("compare-gp-lr", cmd_compare, "held-out MSE and lppd of the spatial model against the baseline")
    p.add_argument("--fit", required=True, nargs="+")

    p = add("export-map", cmd_export_map, "GeoJSON points for a store-level value column")
    p.add_argument("--values", required=True)
    p.add_argument("--stores", required=True)
    p.add_argument("--column", required=True)
    p.add_argument("--input-scale", choices=pipeline.GEOJSON_SCALES, default="probability")
    p.add_argument("--scale", choices=pipeline.GEOJSON_SCALES, default="probability")

    p = add("run-pipeline", cmd_run_pipeline, "run every stage and write a manifest")
    p.add_argument("--transactions")
    p.add_argument("--stores")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    if args.command != "run-pipeline":
        _require_out(args)
    cfg = _config(args)
    args.func(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
