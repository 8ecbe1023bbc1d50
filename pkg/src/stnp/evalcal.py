"""Evaluation protocol: buffered tile partitions, temporal holdout, accuracy
and calibration metrics, disturbance stratification and pooled reporting.

Conventions recorded in every report's metadata:

* z-score standard deviation uses the population divisor (n);
* coverage counts ``|y - mu| <= k sigma`` as inside (boundary inclusive);
* linear-space errors use the naive back-transform without lognormal bias
  correction;
* buffering uses the 8-neighbourhood (Chebyshev distance).
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffcore import ContractViolation
from .footprints import Footprint, denormalize_agbd

logger = logging.getLogger(__name__)

TRAIN, VAL, TEST, BUFFER = "train", "val", "test", "buffer"
STRATA = ("Stable", "Moderate", "Disturbed")
METRIC_NAMES = ("log_r2", "log_rmse", "linear_rmse_mgha", "linear_mae_mgha",
                "cov1", "cov2", "z_mean", "z_std")
METRIC_LABELS = {
    "log_r2": "Log R2",
    "log_rmse": "Log RMSE",
    "linear_rmse_mgha": "Linear RMSE (Mg/ha)",
    "linear_mae_mgha": "Linear MAE (Mg/ha)",
    "cov1": "1sigma Coverage (68%)",
    "cov2": "2sigma Coverage (95%)",
    "z_mean": "Z-Score Mean (0.0)",
    "z_std": "Z-Score Std (1.0)",
}
CONVENTIONS = {
    "z_std_divisor": "n",
    "coverage_boundary": "inclusive",
    "back_transform": "naive expm1(y * ln 501), no bias correction",
    "buffer_adjacency": "chebyshev (8-neighbourhood)",
    "quantile_interpolation": "linear",
}


class PartitionInfeasible(ValueError):
    pass


class EvaluationEmpty(ValueError):
    pass


class HoldoutConfigError(ValueError):
    pass


# ---------------------------------------------------------------- partitioning

@dataclass
class TilePartition:
    grid: tuple[int, int]       # (columns, rows); tile_id = row * columns + col
    roles: list[str]
    seed: int | None = None
    buffer_radius: int = 1

    def tiles(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    def role_of(self, tile_id: int) -> str:
        return self.roles[tile_id]

    def counts(self) -> dict[str, int]:
        return {r: self.roles.count(r) for r in (TRAIN, VAL, TEST, BUFFER)}


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    rest = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def chebyshev(a: int, b: int, columns: int) -> int:
    ra, ca = divmod(a, columns)
    rb, cb = divmod(b, columns)
    return max(abs(ra - rb), abs(ca - cb))


def apply_buffer(roles: Sequence[str], grid: tuple[int, int], buffer_radius: int = 1) -> list[str]:
    """Relabel train/val tiles within ``buffer_radius`` (Chebyshev) of a test tile."""
    columns = grid[0]
    roles = list(roles)
    tests = [i for i, r in enumerate(roles) if r == TEST]
    if buffer_radius <= 0:
        return roles
    for i, r in enumerate(roles):
        if r in (TRAIN, VAL) and any(chebyshev(i, t, columns) <= buffer_radius for t in tests):
            roles[i] = BUFFER
    return roles


def partition_tiles(grid: tuple[int, int], seed: int, buffer_radius: int = 1,
                    fractions: Sequence[float] = (0.70, 0.15, 0.15)) -> TilePartition:
    """Random 70/15/15 train/val/test assignment followed by buffering."""
    columns, rows = grid
    if columns < 3 or rows < 3:
        raise ContractViolation("partitioning needs a grid of at least 3x3 tiles")
    n = columns * rows
    n_train, n_val, n_test = _largest_remainder(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    roles = [TRAIN] * n
    for i in perm[n_train:n_train + n_val]:
        roles[i] = VAL
    for i in perm[n_train + n_val:]:
        roles[i] = TEST
    roles = apply_buffer(roles, grid, buffer_radius)
    if TRAIN not in roles:
        raise PartitionInfeasible(f"seed {seed}: buffering removed every training tile")
    return TilePartition((columns, rows), roles, seed, buffer_radius)


# ---------------------------------------------------------------- temporal holdout

def temporal_holdout(footprints, holdout_year: int, partition: TilePartition | None = None):
    """Split into (train_set, test_set).

    ``train_set``: non-holdout-year footprints in train tiles. ``test_set``:
    holdout-year footprints in test tiles. Without a partition every tile
    counts as both. Only ``year`` and ``tile_id`` are read.
    """
    footprints = list(footprints)
    if not any(f.year == holdout_year for f in footprints):
        raise HoldoutConfigError(f"holdout year {holdout_year} not present in the data")
    train_tiles = set(partition.tiles(TRAIN)) if partition else None
    test_tiles = set(partition.tiles(TEST)) if partition else None
    train = [f for f in footprints if f.year != holdout_year
             and (train_tiles is None or f.tile_id in train_tiles)]
    test = [f for f in footprints if f.year == holdout_year
            and (test_tiles is None or f.tile_id in test_tiles)]
    return train, test


def evaluation_context(footprints, holdout_year: int, tile_id: int) -> list[Footprint]:
    """Context for a test tile: that tile's footprints from the other years."""
    return [f for f in footprints if f.tile_id == tile_id and f.year != holdout_year]


# ---------------------------------------------------------------- metrics

def _check_prob_inputs(y, mu, sigma):
    y, mu, sigma = (np.asarray(v, dtype=np.float64).ravel() for v in (y, mu, sigma))
    if not len(y) == len(mu) == len(sigma):
        raise ContractViolation("y, mu and sigma must have equal length")
    if np.any(sigma <= 0):
        raise ContractViolation("every sigma must be > 0")
    return y, mu, sigma


def z_stats(y, mu, sigma) -> tuple[float, float]:
    """Mean and population standard deviation of ``(y - mu) / sigma``."""
    y, mu, sigma = _check_prob_inputs(y, mu, sigma)
    if len(y) < 2:
        raise ContractViolation("z_stats needs n >= 2")
    z = (y - mu) / sigma
    return float(z.mean()), float(z.std())


def coverage(y, mu, sigma, k: float) -> float:
    """Fraction of observations with ``|y - mu| <= k sigma``."""
    y, mu, sigma = _check_prob_inputs(y, mu, sigma)
    if len(y) == 0:
        raise ContractViolation("coverage of an empty set")
    return float(np.mean(np.abs(y - mu) <= k * sigma))


@dataclass
class AccuracyMetrics:
    log_r2: float
    log_rmse: float
    linear_rmse: float
    linear_mae: float
    r2_defined: bool = True


def r2_score(y, yhat) -> float:
    y, yhat = np.asarray(y, float), np.asarray(yhat, float)
    if len(y) == 0 or np.all(y == y[0]):  # the mean of equal floats can drift off them
        return float("nan")
    sst = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum((y - yhat) ** 2) / sst)


def accuracy_metrics(y_norm, mu_norm) -> AccuracyMetrics:
    """Log-space R2/RMSE on normalized values, linear RMSE/MAE in Mg/ha."""
    y = np.asarray(y_norm, dtype=np.float64).ravel()
    mu = np.asarray(mu_norm, dtype=np.float64).ravel()
    if len(y) != len(mu) or len(y) < 2:
        raise ContractViolation("accuracy_metrics needs two equal-length vectors with n >= 2")
    r2 = r2_score(y, mu)
    log_rmse = float(np.sqrt(np.mean((y - mu) ** 2)))
    ylin, mulin = denormalize_agbd(y), denormalize_agbd(mu)
    lin_rmse = float(np.sqrt(np.mean((ylin - mulin) ** 2)))
    lin_mae = float(np.mean(np.abs(ylin - mulin)))
    return AccuracyMetrics(r2, log_rmse, lin_rmse, lin_mae, r2_defined=not np.isnan(r2))


@dataclass
class MetricsReport:
    log_r2: float
    log_rmse: float
    linear_rmse_mgha: float
    linear_mae_mgha: float
    cov1: float
    cov2: float
    z_mean: float
    z_std: float
    n: int
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def metrics_report(y, mu, sigma) -> MetricsReport:
    acc = accuracy_metrics(y, mu)
    zm, zs = z_stats(y, mu, sigma)
    flags = [] if acc.r2_defined else ["r2_undefined_zero_variance"]
    return MetricsReport(acc.log_r2, acc.log_rmse, acc.linear_rmse, acc.linear_mae,
                         coverage(y, mu, sigma, 1.0), coverage(y, mu, sigma, 2.0),
                         zm, zs, len(np.ravel(y)), flags)


# ---------------------------------------------------------------- disturbance strata

@dataclass
class DisturbanceRecord:
    tile_id: int | None
    ybar_exp: float
    ybar_test: float
    delta: float
    stratum: str | None
    available: bool = True


def stratum_of(delta: float) -> str:
    if delta < 0.1:
        return "Stable"
    if delta <= 0.3:
        return "Moderate"
    return "Disturbed"


def disturbance_delta(yearly_tile_means: dict, test_year: int, tile_id: int | None = None,
                      shot_values: dict | None = None) -> DisturbanceRecord:
    """Relative drop of the test-year tile mean against the surrounding-years expectation.

    ``yearly_tile_means`` maps year -> mean AGBD (Mg/ha). The expectation is the
    unweighted mean of the pre- and post-year means; with ``shot_values``
    (year -> array of shot AGBD) it is instead the mean over all pooled shots
    of those years.
    """
    pre = [y for y in yearly_tile_means if y < test_year]
    post = [y for y in yearly_tile_means if y > test_year]
    if not pre or not post or test_year not in yearly_tile_means:
        return DisturbanceRecord(tile_id, float("nan"), float("nan"), float("nan"), None, False)
    if shot_values is not None:
        ybar_exp = float(np.mean(np.concatenate([np.asarray(shot_values[y]) for y in pre + post])))
    else:
        ybar_exp = float(np.mean([yearly_tile_means[y] for y in pre + post]))
    ybar_test = float(yearly_tile_means[test_year])
    delta = (ybar_exp - ybar_test) / ybar_exp
    return DisturbanceRecord(tile_id, ybar_exp, ybar_test, delta, stratum_of(delta))


def tile_disturbance(footprints, test_year: int, shot_pooled: bool = False) -> dict[int, DisturbanceRecord]:
    """Per-tile disturbance records from all footprints of each tile-year (any role)."""
    values: dict[int, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for f in footprints:
        values[f.tile_id][f.year].append(f.y_norm)
    out = {}
    for tile, by_year in sorted(values.items()):
        shots = {y: denormalize_agbd(np.array(v)) for y, v in by_year.items()}
        means = {y: float(s.mean()) for y, s in shots.items()}
        out[tile] = disturbance_delta(means, test_year, tile, shots if shot_pooled else None)
    return out


def pooled_stratified_r2(y, yhat, strata, stratum: str) -> float:
    """R2 over every pooled (y, yhat) pair labelled ``stratum``, about that subset's own mean."""
    y, yhat = np.asarray(y, float), np.asarray(yhat, float)
    mask = np.asarray(strata) == stratum
    if mask.sum() == 0:
        return float("nan")
    return r2_score(y[mask], yhat[mask])


# ---------------------------------------------------------------- experiment harness

# A predictor maps (test-tile context footprints, target footprints) to
# (mu, sigma, crossed) where ``crossed`` flags targets whose quantile interval crossed.
Predictor = Callable[[list, list], tuple]


@dataclass
class SeedPredictions:
    seed: int
    y: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    tile_id: np.ndarray
    crossed: np.ndarray | None = None
    skipped_tiles: list[int] = field(default_factory=list)

    @property
    def crossings(self) -> int:
        return 0 if self.crossed is None else int(np.sum(self.crossed))


def evaluate_predictor(predictor: Predictor, footprints, partition: TilePartition,
                       holdout_year: int, seed: int = 0) -> SeedPredictions:
    """Run one predictor over every test tile of a partition for the holdout year."""
    footprints = list(footprints)
    _, test = temporal_holdout(footprints, holdout_year, partition)
    if not test:
        raise EvaluationEmpty(f"no holdout-year footprints in the test tiles of seed {seed}")
    by_tile: dict[int, list[Footprint]] = defaultdict(list)
    for f in test:
        by_tile[f.tile_id].append(f)
    context_by_tile: dict[int, list[Footprint]] = defaultdict(list)
    for f in footprints:
        if f.year != holdout_year and f.tile_id in by_tile:
            context_by_tile[f.tile_id].append(f)
    ys, mus, sigmas, tiles, crossed = [], [], [], [], []
    skipped = []
    for tile, targets in sorted(by_tile.items()):
        context = context_by_tile.get(tile, [])
        if not context:
            skipped.append(tile)
            continue
        mu, sigma, cross = predictor(context, targets)
        crossed.append(np.zeros(len(targets), bool) if cross is None else np.asarray(cross, bool))
        ys.append(np.array([f.y_norm for f in targets]))
        mus.append(np.asarray(mu, float))
        sigmas.append(np.asarray(sigma, float))
        tiles.append(np.full(len(targets), tile))
    if skipped:
        logger.warning("seed %d: skipped %d test tiles without context", seed, len(skipped))
    if not ys:
        raise EvaluationEmpty("every test tile lacked context")
    return SeedPredictions(seed, np.concatenate(ys), np.concatenate(mus), np.concatenate(sigmas),
                           np.concatenate(tiles), np.concatenate(crossed), skipped)


@dataclass
class StratumReport:
    stratum: str
    method: str
    metrics: MetricsReport | None
    crossings: int = 0
    flags: list[str] = field(default_factory=list)


def summarize(per_seed: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and (population) std across seeds of each global metric."""
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in per_seed], dtype=float)
        out[name] = (float(np.mean(vals)), float(np.std(vals)))
    return out


def stratified_reports(method: str, predictions: list[SeedPredictions],
                       records: dict[int, DisturbanceRecord]) -> list[StratumReport]:
    """Pool predictions across seeds, then compute metrics per stratum."""
    y = np.concatenate([p.y for p in predictions])
    mu = np.concatenate([p.mu for p in predictions])
    sigma = np.concatenate([p.sigma for p in predictions])
    tiles = np.concatenate([p.tile_id for p in predictions])
    labels = np.array([records[t].stratum if t in records and records[t].available else "NA"
                       for t in tiles])
    crossed = np.concatenate([np.zeros(len(p.y), bool) if p.crossed is None else p.crossed
                              for p in predictions])
    out = []
    for s in STRATA:
        mask = labels == s
        if mask.sum() < 2:
            out.append(StratumReport(s, method, None, flags=["stratum_empty"]))
            continue
        rep = metrics_report(y[mask], mu[mask], sigma[mask])
        rep.log_r2 = pooled_stratified_r2(y, mu, labels, s)
        out.append(StratumReport(s, method, rep, int(crossed[mask].sum())))
    return out


# ---------------------------------------------------------------- report files

TABLE1_BLOCKS = (("Accuracy", METRIC_NAMES[:4]), ("Uncertainty Calibration", METRIC_NAMES[4:]))
TABLE2_METRICS = ("log_r2", "log_rmse", "z_mean", "z_std")
METHOD_LABELS = {"qrf": "QRF", "gbq": "GBQ", "anp": "ANP"}
_PERCENT = {"cov1", "cov2"}


def _comment_lines(echo: str | None) -> list[str]:
    if not echo:
        return []
    return ["# " + line if line else "#" for line in echo.rstrip("\n").split("\n")]


def _cell(name: str, mean: float, std: float) -> str:
    if name in _PERCENT:
        return f"{100 * mean:.1f} ± {100 * std:.1f}"
    digits = 1 if name.startswith("linear") else 3
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def table1_rows(summary: dict[str, dict[str, tuple[float, float]]], methods: Sequence[str]) -> list[list[str]]:
    """Rows of the global table: block, metric label, then one "mean ± std" cell per method."""
    rows = [["block", "metric"] + [METHOD_LABELS.get(m, m) for m in methods]]
    for block, names in TABLE1_BLOCKS:
        for name in names:
            rows.append([block, METRIC_LABELS[name]]
                        + [_cell(name, *summary[m][name]) for m in methods])
    return rows


def table2_rows(strata: dict[str, list[StratumReport]], methods: Sequence[str]) -> list[list[str]]:
    rows = [["stratum", "metric"] + [METHOD_LABELS.get(m, m) for m in methods] + ["n"]]
    for i, s in enumerate(STRATA):
        reports = [strata[m][i] for m in methods]
        for name in TABLE2_METRICS:
            cells = ["" if r.metrics is None else f"{getattr(r.metrics, name):.3f}" for r in reports]
            n = "0" if reports[0].metrics is None else str(reports[0].metrics.n)
            rows.append([s, METRIC_LABELS.get(name, name).split(" (")[0]] + cells + [n])
    return rows


def _write_csv(path, rows, echo):
    import csv
    import io

    buf = io.StringIO()
    for line in _comment_lines(echo):
        buf.write(line + "\n")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _write_json(path, payload):
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def write_table1(path_csv, path_json, summary, methods, seeds, echo: str | None = None) -> None:
    _write_csv(path_csv, table1_rows(summary, methods), echo)
    _write_json(path_json, {
        "config": echo or "",
        "conventions": CONVENTIONS,
        "seeds": list(seeds),
        "metrics": {m: {k: {"mean": v[0], "std": v[1]} for k, v in summary[m].items()} for m in methods},
    })


def write_table2(path_csv, path_json, strata, methods, records, crossings=None,
                 echo: str | None = None) -> None:
    _write_csv(path_csv, table2_rows(strata, methods), echo)
    payload = {"config": echo or "", "conventions": CONVENTIONS, "strata": {}, "tiles": {}}
    for m in methods:
        for r in strata[m]:
            entry = r.metrics.as_dict() if r.metrics else {"flags": r.flags}
            entry["crossings"] = r.crossings
            payload["strata"].setdefault(r.stratum, {})[m] = entry
    for tile, rec in records.items():
        payload["tiles"][str(tile)] = asdict(rec)
    if crossings is not None:
        payload["crossings"] = crossings
    _write_json(path_json, payload)


def write_grid(path, rows: Sequence[dict], echo: str | None = None) -> None:
    """Gridded prediction export, one row per (year, cell)."""
    cols = ["year", "row", "col", "lon_norm", "lat_norm", "mu_norm", "sigma_norm", "mu_agbd"]
    _write_csv(path, [cols] + [[_grid_fmt(r[c]) for c in cols] for r in rows], echo)


def _grid_fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
