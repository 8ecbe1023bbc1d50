"""Per-seed experiment orchestration shared by the CLI, the demos and the acceptance suite.

One seed = one buffered tile partition, one ANP trained on the training
tiles' non-holdout years, both quantile baselines fitted on the same rows, and
predictions for the holdout year in the test tiles.
"""

from __future__ import annotations

import contextlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from . import evalcal as ev
from .anp import ANP, ModelConfig
from .footprints import Footprint, flat_features, stack_footprints
from .training import TrainingConfig, train

logger = logging.getLogger(__name__)

METHODS = ("qrf", "gbq", "anp")


@dataclass
class BaselineConfig:
    qrf_trees: int = 200
    qrf_depth: int = 12
    qrf_min_leaf: int = 5
    gbq_rounds: int = 300
    gbq_depth: int = 4
    gbq_learning_rate: float = 0.1
    gbq_min_leaf: int = 5
    gbq_feature_subsample: str = "sqrt"
    gbq_fit_median: bool = False


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = tuple(range(10))
    holdout_year: int | None = None    # default: the middle year
    buffer_radius: int = 1
    methods: tuple[str, ...] = METHODS
    predict_samples: int = 16
    predict_context_max: int | None = None
    shot_pooled_delta: bool = False
    training: TrainingConfig = field(default_factory=TrainingConfig)
    model: ModelConfig | None = None
    baseline: BaselineConfig = field(default_factory=BaselineConfig)


def middle_year(footprints) -> int:
    years = sorted({f.year for f in footprints})
    return years[len(years) // 2]


def features_of(footprints) -> tuple[np.ndarray, np.ndarray]:
    """The flat feature encoding consumed by both baselines."""
    arr = stack_footprints(footprints)
    return flat_features(arr.coords, arr.patches), arr.y


def anp_predictor(model: ANP, n_samples: int = 16, context_max: int | None = None, seed: int = 0):
    def predict(context: list[Footprint], targets: list[Footprint]):
        ctx = stack_footprints(context)
        if context_max and len(ctx) > context_max:
            keep = np.sort(np.random.default_rng([seed, int(ctx.tile_id[0])]).choice(
                len(ctx), context_max, replace=False))
            ctx = ctx.take(keep)
        tgt = stack_footprints(targets)
        pred = model.predict(ctx, tgt.coords, tgt.patches, n_samples=n_samples, seed=seed)
        return pred.mu.ravel(), pred.sigma.ravel(), np.zeros(len(tgt), dtype=bool)
    return predict


def qrf_predictor(forest: bl.QuantileForest):
    def predict(context, targets):
        X, _ = features_of(targets)
        q = bl.qrf_predict(forest, X, [bl.LOWER_Q, bl.MEDIAN_Q, bl.UPPER_Q])
        g = bl.quantiles_to_gaussian(q[:, 0], q[:, 1], q[:, 2], use_median=True)
        return g.mu, g.sigma, g.crossed
    return predict


def gbq_predictor(model: bl.BoostedInterval):
    def predict(context, targets):
        X, _ = features_of(targets)
        q = model.predict(X)
        g = bl.quantiles_to_gaussian(q[:, 0], q[:, 1], q[:, 2], use_median=model.median is not None)
        return g.mu, g.sigma, g.crossed
    return predict


@dataclass
class SeedRun:
    seed: int
    partition: ev.TilePartition
    predictions: dict[str, ev.SeedPredictions]
    metrics: dict[str, ev.MetricsReport]
    models: dict[str, object] = field(default_factory=dict)
    train_history: list[float] = field(default_factory=list)
    train_seconds: float = 0.0


def fit_methods(train_set: list[Footprint], cfg: ExperimentConfig, seed: int) -> tuple[dict, dict]:
    """Fit every configured method on ``train_set``; returns (models, extras)."""
    models: dict[str, object] = {}
    extras: dict = {}
    b = cfg.baseline
    if "qrf" in cfg.methods or "gbq" in cfg.methods:
        X, y = features_of(train_set)
    if "qrf" in cfg.methods:
        models["qrf"] = bl.qrf_fit(X, y, n_trees=b.qrf_trees, max_depth=b.qrf_depth,
                                   min_leaf=b.qrf_min_leaf, seed=seed)
    if "gbq" in cfg.methods:
        models["gbq"] = bl.gbq_fit_interval(X, y, fit_median=b.gbq_fit_median, rounds=b.gbq_rounds,
                                            learning_rate=b.gbq_learning_rate,
                                            max_depth=b.gbq_depth, min_leaf=b.gbq_min_leaf, seed=seed,
                                            feature_subsample=b.gbq_feature_subsample)
    if "anp" in cfg.methods:
        tcfg = TrainingConfig(**{**cfg.training.__dict__, "seed": seed})
        res = train(train_set, tcfg, cfg.model)
        models["anp"] = res.model
        extras["history"] = res.history
        extras["seconds"] = res.seconds
    return models, extras


def predictor_for(method: str, model, cfg: ExperimentConfig, seed: int):
    if method == "anp":
        return anp_predictor(model, cfg.predict_samples, cfg.predict_context_max, seed)
    if method == "qrf":
        return qrf_predictor(model)
    if method == "gbq":
        return gbq_predictor(model)
    raise ValueError(f"unknown method {method!r}")


def run_seed(footprints: list[Footprint], grid: tuple[int, int], seed: int,
             cfg: ExperimentConfig, fit_guard=None) -> SeedRun:
    """Partition, hold out, fit and evaluate one seed.

    ``fit_guard``, when given, is a zero-argument callable returning a context
    manager entered around fitting only (used to instrument the holdout).
    """
    holdout = cfg.holdout_year if cfg.holdout_year is not None else middle_year(footprints)
    partition = ev.partition_tiles(grid, seed, cfg.buffer_radius)
    train_set, _ = ev.temporal_holdout(footprints, holdout, partition)
    with fit_guard() if fit_guard else contextlib.nullcontext():
        models, extras = fit_methods(train_set, cfg, seed)
    preds, metrics = {}, {}
    for method in cfg.methods:
        p = ev.evaluate_predictor(predictor_for(method, models[method], cfg, seed),
                                  footprints, partition, holdout, seed)
        preds[method] = p
        metrics[method] = ev.metrics_report(p.y, p.mu, p.sigma)
        logger.info("seed %d %s: %s", seed, method,
                    " ".join(f"{k}={getattr(metrics[method], k):.4f}" for k in ev.METRIC_NAMES))
    return SeedRun(seed, partition, preds, metrics, models,
                   extras.get("history", []), extras.get("seconds", 0.0))


def _run_seed_job(args):
    footprints, grid, seed, cfg = args
    run = run_seed(footprints, grid, seed, cfg)
    return run


@dataclass
class ExperimentResult:
    runs: list[SeedRun]
    records: dict[int, ev.DisturbanceRecord]
    summary: dict[str, dict[str, tuple[float, float]]]
    strata: dict[str, list[ev.StratumReport]]
    holdout_year: int


def run_experiment(footprints: list[Footprint], grid: tuple[int, int], cfg: ExperimentConfig,
                   jobs: int = 1, fit_guard=None) -> ExperimentResult:
    """All seeds, then seed-level summaries and seed-pooled stratified reports."""
    footprints = list(footprints)
    holdout = cfg.holdout_year if cfg.holdout_year is not None else middle_year(footprints)
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_seed_job, [(footprints, grid, s, cfg) for s in cfg.seeds]))
    else:
        runs = [run_seed(footprints, grid, s, cfg, fit_guard) for s in cfg.seeds]
    records = ev.tile_disturbance(footprints, holdout, shot_pooled=cfg.shot_pooled_delta)
    summary = {m: ev.summarize([r.metrics[m] for r in runs]) for m in cfg.methods}
    strata = {m: ev.stratified_reports(m, [r.predictions[m] for r in runs], records)
              for m in cfg.methods}
    return ExperimentResult(runs, records, summary, strata, holdout)
