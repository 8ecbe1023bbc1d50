"""Command-line entry point: ``stnp {synth,train,predict,eval}``.

Every subcommand reads one INI-style config (``key = value`` under
``[world]``, ``[model]``, ``[training]``, ``[baseline]``, ``[experiment]`` and
``[predict]`` sections) and writes fixed file names under ``--out``:

==========  ==============================================================
synth       ``dataset.csv``
train       ``<method>_seed<k>.ckpt`` and ``<method>_seed<k>.log``
predict     ``grid_<method>.csv``
eval        ``table1.csv``, ``table1.json``, ``table2.csv``, ``table2.json``
==========  ==============================================================

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import evalcal as ev
from . import pipeline as pl
from .anp import ANP, ModelConfig
from .checkpoint import CheckpointError, load_anp, load_container, save_anp
from .diffcore import ContractViolation
from .footprints import SpatioTemporalCoord, denormalize_agbd, flat_features, stack_footprints
from .synthworld import (DatasetParseError, DisturbanceEvent, World, WorldConfig,
                         read_dataset, sample_footprints, write_dataset)
from .training import TrainingConfig, TrainingConfigError, train

logger = logging.getLogger(__name__)

SECTIONS = ("world", "model", "training", "baseline", "experiment", "predict")


class ConfigError(ValueError):
    """Bad config file or command-line usage (exit status 2)."""


@dataclasses.dataclass
class PredictConfig:
    grid: tuple[int, int] = (20, 20)      # query cells along (lon, lat)
    years: tuple[int, ...] = ()           # default: the holdout year
    day_of_year: int = 182
    context_max: int = 1024


@dataclasses.dataclass
class RunConfig:
    world: WorldConfig
    model: ModelConfig
    training: TrainingConfig
    baseline: pl.BaselineConfig
    experiment: pl.ExperimentConfig
    predict: PredictConfig
    text: str = ""  # normalized config text echoed into outputs

    @property
    def holdout_year(self) -> int:
        if self.experiment.holdout_year is not None:
            return self.experiment.holdout_year
        years = sorted(self.world.years)
        return years[len(years) // 2]


# ---------------------------------------------------------------- config parsing

def _parse_events(text: str) -> tuple[DisturbanceEvent, ...]:
    events = []
    for chunk in text.split(";"):
        if chunk.strip():
            vals = [float(v) for v in chunk.split()]
            if len(vals) != 5:
                raise ConfigError(f"event needs 5 numbers (lon lat radius time retained), got {chunk!r}")
            events.append(DisturbanceEvent(*vals))
    return tuple(events)


def _format_events(events) -> str:
    return "; ".join(" ".join(repr(float(v)) for v in dataclasses.astuple(e)) for e in events)


def _convert(raw: str, hint, default):
    """Convert ``raw`` following a dataclass field's type hint."""
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if raw.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(raw, inner, default)
    if origin is tuple:
        elem = args[0] if args else float
        if elem is DisturbanceEvent:
            return _parse_events(raw)
        parts = [p for p in raw.replace(",", " ").split()]
        return tuple(_convert(p, elem, None) for p in parts)
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if hint is str:
        return raw
    raise ValueError(f"unsupported field type {hint!r}")


def _build(cls, section: dict[str, str], name: str, **fixed):
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(fixed)
    for key, raw in section.items():
        if key not in known or key in fixed:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            kwargs[key] = _convert(raw, hints[key], None)
        except (ValueError, ContractViolation) as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, ContractViolation) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def _format_value(v) -> str:
    if isinstance(v, tuple):
        if v and isinstance(v[0], DisturbanceEvent):
            return _format_events(v)
        return ", ".join(_format_value(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_text(cfg: RunConfig) -> str:
    """Canonical, fully expanded config text (every field, defaults included)."""
    parser = configparser.ConfigParser(interpolation=None)
    skip = {"experiment": {"training", "model", "baseline"}}
    for name in SECTIONS:
        obj = getattr(cfg, name)
        parser[name] = {f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                        if f.name not in skip.get(name, ())}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue().rstrip("\n") + "\n"


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    extra = set(parser.sections()) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    sec = {name: dict(parser[name]) if parser.has_section(name) else {} for name in SECTIONS}
    world = _build(WorldConfig, sec["world"], "world")
    model_section = dict(sec["model"])
    model_section.setdefault("embed_dim", str(world.embed_dim))
    model = _build(ModelConfig, model_section, "model")
    training = _build(TrainingConfig, sec["training"], "training")
    baseline = _build(pl.BaselineConfig, sec["baseline"], "baseline")
    experiment = _build(pl.ExperimentConfig, sec["experiment"], "experiment",
                        training=training, model=model, baseline=baseline)
    predict = _build(PredictConfig, sec["predict"], "predict")
    if not experiment.seeds:
        raise ConfigError("[experiment] seeds must list at least one seed")
    if experiment.holdout_year is not None and experiment.holdout_year not in world.years:
        raise ConfigError(f"[experiment] holdout_year {experiment.holdout_year} not in world years")
    bad = set(experiment.methods) - set(pl.METHODS)
    if bad:
        raise ConfigError(f"[experiment] unknown methods {sorted(bad)}")
    if model.embed_dim != world.embed_dim:
        raise ConfigError("[model] embed_dim must match [world] embed_dim")
    cfg = RunConfig(world, model, training, baseline, experiment, predict)
    cfg.text = config_text(cfg)
    return cfg


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text)
    if seed is not None:
        cfg = override_seed(cfg, seed)
    return cfg


def override_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """``--seed`` replaces the world seed, the training seed and the seed list."""
    world = cfg.world.replace(seed=seed)
    training = dataclasses.replace(cfg.training, seed=seed)
    experiment = dataclasses.replace(cfg.experiment, seeds=(seed,), training=training)
    out = RunConfig(world, cfg.model, training, cfg.baseline, experiment, cfg.predict)
    out.text = config_text(out)
    return out


# ---------------------------------------------------------------- subcommands

def _load_dataset(path):
    try:
        return read_dataset(path)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc


def cmd_synth(cfg: RunConfig, out: Path) -> Path:
    sample = sample_footprints(cfg.world)
    path = out / "dataset.csv"
    write_dataset(sample.footprints, path, years=cfg.world.years, comment=cfg.text)
    logger.info("wrote %d footprints to %s", len(sample.footprints), path)
    return path


def cmd_train(cfg: RunConfig, dataset, method: str, out: Path) -> Path:
    footprints = _load_dataset(dataset)
    seed = cfg.training.seed
    holdout = cfg.holdout_year
    partition = ev.partition_tiles(cfg.world.tiles, seed, cfg.experiment.buffer_radius)
    train_set, _ = ev.temporal_holdout(footprints, holdout, partition)
    stem = out / f"{method}_seed{seed}"
    extra = {"method": method, "seed": seed, "holdout_year": holdout, "run_config": cfg.text}
    log_buf = io.StringIO()
    for line in cfg.text.rstrip("\n").split("\n"):
        log_buf.write(f"# {line}\n")
    if method == "anp":
        res = train(train_set, cfg.training, cfg.model, log_stream=log_buf)
        save_anp(stem.with_suffix(".ckpt"), res.model, extra)
    elif method in ("qrf", "gbq"):
        exp = dataclasses.replace(cfg.experiment, methods=(method,))
        models, _ = pl.fit_methods(train_set, exp, seed)
        model = models[method]
        if method == "gbq":
            for part in ("lower", "upper", "median"):
                b = getattr(model, part)
                if b is not None:
                    for i, loss in enumerate(b.train_loss):
                        log_buf.write(f"part={part} step={i} loss={loss:.6f}\n")
        bl.save_baseline(stem.with_suffix(".ckpt"), model, extra)
    else:
        raise ConfigError(f"unknown method {method!r}")
    stem.with_suffix(".log").write_text(log_buf.getvalue(), encoding="utf-8")
    return stem.with_suffix(".ckpt")


def load_any(path):
    """Load an ANP or baseline checkpoint; returns (method, model, header)."""
    header, _ = load_container(path)
    kind = header.get("kind")
    if kind == "anp":
        model, header = load_anp(path)
        return "anp", model, header
    if kind in ("qrf", "gbq"):
        model, header = bl.load_baseline(path)
        return kind, model, header
    raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


def grid_queries(cfg: RunConfig, year: int):
    """Cell-centre query points of the prediction grid for one year."""
    nx, ny = cfg.predict.grid
    cols, rows = np.meshgrid(np.arange(nx), np.arange(ny))
    lon = (cols.ravel() + 0.5) / nx
    lat = (rows.ravel() + 0.5) / ny
    return rows.ravel(), cols.ravel(), lon, lat


def cmd_predict(cfg: RunConfig, checkpoint, dataset, out: Path) -> Path:
    method, model, header = load_any(checkpoint)
    footprints = _load_dataset(dataset)
    world = World(cfg.world)
    years = cfg.predict.years or (cfg.holdout_year,)
    doy = cfg.predict.day_of_year
    period = cfg.world.period
    rows_out = []
    for year in years:
        rows, cols, lon, lat = grid_queries(cfg, year)
        tau = float(world.tau_of(np.array([year]), np.array([doy]))[0])
        coords = np.stack([SpatioTemporalCoord.from_observation(a, b, year, doy, period).as_array()
                           for a, b in zip(lon, lat)])
        rng = np.random.default_rng([cfg.world.seed, year, 11])
        s = np.sin(2 * np.pi * doy / 365.0)
        patches = world.embed(lon, lat, np.full(len(lon), tau), np.full(len(lon), s), rng)
        if method == "anp":
            mu, sigma = _anp_grid(model, footprints, world, year, lon, lat, coords, patches, cfg)
        else:
            X = flat_features(coords, patches)
            if method == "qrf":
                q = bl.qrf_predict(model, X)
                g = bl.quantiles_to_gaussian(q[:, 0], q[:, 1], q[:, 2], use_median=True)
            else:
                q = model.predict(X)
                g = bl.quantiles_to_gaussian(q[:, 0], q[:, 1], q[:, 2],
                                             use_median=model.median is not None)
            mu, sigma = g.mu, g.sigma
        for i in range(len(lon)):
            rows_out.append({"year": year, "row": int(rows[i]), "col": int(cols[i]),
                             "lon_norm": lon[i], "lat_norm": lat[i], "mu_norm": mu[i],
                             "sigma_norm": sigma[i], "mu_agbd": denormalize_agbd(mu[i])})
    path = out / f"grid_{method}.csv"
    ev.write_grid(path, rows_out, echo=cfg.text)
    return path


def _anp_grid(model: ANP, footprints, world: World, year, lon, lat, coords, patches, cfg):
    """ANP grid prediction; each query tile conditions on its own and neighbouring tiles' other years."""
    context_fps = [f for f in footprints if f.year != year]
    if not context_fps:
        raise ContractViolation(f"no context footprints outside year {year}")
    ctx_all = stack_footprints(context_fps)
    nx, _ = cfg.world.tiles
    ctx_tile = ctx_all.tile_id
    q_tile = world.tile_of(lon, lat)
    mu = np.empty(len(lon))
    sigma = np.empty(len(lon))
    for t in np.unique(q_tile):
        tr, tc = divmod(int(t), nx)
        cr, cc = np.divmod(ctx_tile, nx)
        near = np.flatnonzero((np.abs(cr - tr) <= 1) & (np.abs(cc - tc) <= 1))
        if len(near) == 0:
            near = np.arange(len(ctx_all))
        if len(near) > cfg.predict.context_max:
            near = np.sort(np.random.default_rng([cfg.training.seed, int(t)]).choice(
                near, cfg.predict.context_max, replace=False))
        sel = np.flatnonzero(q_tile == t)
        pred = model.predict(ctx_all.take(near), coords[sel], patches[sel],
                             n_samples=cfg.experiment.predict_samples, seed=cfg.training.seed)
        mu[sel] = pred.mu.ravel()
        sigma[sel] = pred.sigma.ravel()
    return mu, sigma


def cmd_eval(cfg: RunConfig, dataset, out: Path, checkpoints=(), jobs: int = 1) -> list[Path]:
    footprints = _load_dataset(dataset)
    exp = cfg.experiment
    if checkpoints:
        result = _eval_checkpoints(cfg, footprints, checkpoints)
    else:
        result = pl.run_experiment(footprints, cfg.world.tiles, exp, jobs=jobs)
    methods = [m for m in pl.METHODS if m in result.summary]
    seeds = [r.seed for r in result.runs]
    paths = [out / n for n in ("table1.csv", "table1.json", "table2.csv", "table2.json")]
    ev.write_table1(paths[0], paths[1], result.summary, methods, seeds, echo=cfg.text)
    crossings = {m: sum(r.predictions[m].crossings for r in result.runs) for m in methods}
    ev.write_table2(paths[2], paths[3], result.strata, methods, result.records, crossings,
                    echo=cfg.text)
    return paths


def _eval_checkpoints(cfg: RunConfig, footprints, checkpoints) -> pl.ExperimentResult:
    """Evaluate pre-trained checkpoints; each carries its own seed and holdout year."""
    by_seed: dict[int, dict[str, object]] = {}
    holdouts = set()
    for path in checkpoints:
        method, model, header = load_any(path)
        seed = int(header.get("seed", cfg.training.seed))
        holdouts.add(int(header.get("holdout_year", cfg.holdout_year)))
        by_seed.setdefault(seed, {})[method] = model
    if len(holdouts) != 1:
        raise ConfigError(f"checkpoints disagree on the holdout year: {sorted(holdouts)}")
    holdout = holdouts.pop()
    method_sets = {tuple(sorted(m)) for m in by_seed.values()}
    if len(method_sets) != 1:
        raise ConfigError("every seed needs checkpoints for the same set of methods")
    present = method_sets.pop()
    methods = [m for m in pl.METHODS if m in present]
    runs = []
    for seed, models in sorted(by_seed.items()):
        partition = ev.partition_tiles(cfg.world.tiles, seed, cfg.experiment.buffer_radius)
        preds, metrics = {}, {}
        for m in methods:
            p = ev.evaluate_predictor(pl.predictor_for(m, models[m], cfg.experiment, seed),
                                      footprints, partition, holdout, seed)
            preds[m] = p
            metrics[m] = ev.metrics_report(p.y, p.mu, p.sigma)
        runs.append(pl.SeedRun(seed, partition, preds, metrics, models))
    records = ev.tile_disturbance(footprints, holdout, shot_pooled=cfg.experiment.shot_pooled_delta)
    summary = {m: ev.summarize([r.metrics[m] for r in runs]) for m in methods}
    strata = {m: ev.stratified_reports(m, [r.predictions[m] for r in runs], records) for m in methods}
    return pl.ExperimentResult(runs, records, summary, strata, holdout)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stnp", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=None)
        if dataset:
            sp.add_argument("--dataset", required=True)

    common(sub.add_parser("synth", help="generate the synthetic dataset"), dataset=False)
    t = sub.add_parser("train", help="train one method on the training tiles and years")
    common(t)
    t.add_argument("--method", choices=pl.METHODS, default="anp")
    pr = sub.add_parser("predict", help="gridded mu/sigma export from a checkpoint")
    common(pr)
    pr.add_argument("--checkpoint", required=True)
    e = sub.add_parser("eval", help="Table 1 / Table 2 style reports")
    common(e)
    e.add_argument("--checkpoint", nargs="*", default=[])
    e.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, args.method, out)
        elif args.command == "predict":
            cmd_predict(cfg, args.checkpoint, args.dataset, out)
        elif args.command == "eval":
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cmd_eval(cfg, args.dataset, out, args.checkpoint, args.jobs)
    except (ConfigError, TrainingConfigError, ev.HoldoutConfigError) as exc:
        print(f"stnp: config error: {exc}", file=sys.stderr)
        return 2
    except (DatasetParseError, CheckpointError, ContractViolation, ev.PartitionInfeasible,
            ev.EvaluationEmpty, RuntimeError, OSError, ValueError, FloatingPointError) as exc:
        print(f"stnp: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
