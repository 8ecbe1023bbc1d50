"""Synthetic spatiotemporal biomass world with known ground truth.

All positions are normalized to the region box (``lon``, ``lat`` in [0, 1])
and time is the normalized study-period position ``tau`` in [0, 1]. The
geographic extent in :class:`WorldConfig` is kept for provenance only.

The world provides

* ``true_biomass``: a smooth radial-basis base field (Mg/ha) that is constant
  in time except where disturbance events multiply it down;
* ``synth_embedding``: 3x3xD patches whose channels are fixed random smooth
  functions of the local biomass at the query time, with one saturating
  channel, a nuisance texture and white noise;
* ``sample_footprints``: stripe-track sampling per year with lognormal
  observation noise;
* ``write_dataset`` / ``read_dataset``: the delimited text format.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .diffcore import ContractViolation
from .footprints import (BIOMASS_CAP, Footprint, SpatioTemporalCoord, date_of, normalize_agbd,
                         study_period)

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
PIXEL_OFFSET = 1.8e-4  # ~10 m at a 0.5 degree region, in normalized units


@dataclass(frozen=True)
class DisturbanceEvent:
    """Biomass removal inside a disk from ``event_time`` onwards.

    ``center_lon``, ``center_lat`` and ``radius`` are in normalized region units.
    """

    center_lon: float
    center_lat: float
    radius: float
    event_time: float
    retained_fraction: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ContractViolation("event radius must be > 0")
        if not 0.0 <= self.event_time <= 1.0:
            raise ContractViolation("event_time must lie in [0, 1]")
        if not 0.0 <= self.retained_fraction < 1.0:
            raise ContractViolation("retained_fraction must lie in [0, 1)")


DEFAULT_EVENTS = (
    DisturbanceEvent(0.30, 0.30, 0.13, 0.41, 0.25),
    DisturbanceEvent(0.70, 0.70, 0.13, 0.42, 0.30),
    DisturbanceEvent(0.30, 0.70, 0.13, 0.43, 0.30),
    DisturbanceEvent(0.70, 0.30, 0.13, 0.41, 0.35),
    DisturbanceEvent(0.50, 0.10, 0.11, 0.25, 0.50),
    DisturbanceEvent(0.10, 0.90, 0.11, 0.65, 0.50),
    DisturbanceEvent(0.90, 0.50, 0.10, 0.45, 0.60),
)


@dataclass(frozen=True)
class WorldConfig:
    lon_range: tuple[float, float] = (-73.0, -72.5)
    lat_range: tuple[float, float] = (2.0, 2.5)
    tiles: tuple[int, int] = (5, 5)  # (columns along lon, rows along lat)
    years: tuple[int, ...] = (2019, 2020, 2021, 2022, 2023)
    length_scale: float = 0.08
    n_bumps: int = 90
    biomass_range: tuple[float, float] = (0.0, BIOMASS_CAP)
    biomass_low: float = 10.0
    biomass_high: float = 400.0
    noise_sigma_log: float = 0.15
    # canopy-structure multiplier on biomass that the embedding sensor cannot see
    hidden_amp: float = 0.35
    hidden_length_scale: float = 0.05
    events: tuple[DisturbanceEvent, ...] = DEFAULT_EVENTS
    embed_dim: int = 16
    embed_noise: float = 0.2
    footprints_per_tile_year: int = 400
    along_track_spacing: float = 0.01
    beam_spacing: float = 0.006
    beams: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma_log <= 0:
            raise ContractViolation("noise_sigma_log must be > 0")
        if self.biomass_range[1] > BIOMASS_CAP:
            raise ContractViolation(f"biomass range exceeds the {BIOMASS_CAP} Mg/ha cap")
        if min(self.tiles) < 1 or self.embed_dim < 2:
            raise ContractViolation("need at least one tile and embed_dim >= 2")

    @property
    def n_tiles(self) -> int:
        return self.tiles[0] * self.tiles[1]

    @property
    def period(self) -> tuple[dt.date, dt.date]:
        return study_period(self.years)

    def replace(self, **changes) -> "WorldConfig":
        return dataclasses.replace(self, **changes)


def _smooth_softplus(x, k):
    return np.logaddexp(0.0, k * x) / k


class World:
    """A realized world: the fixed random draws behind a :class:`WorldConfig`."""

    def __init__(self, config: WorldConfig):
        self.config = config
        ss = np.random.SeedSequence(config.seed)
        field_seed, embed_seed, nuis_seed, hidden_seed = ss.spawn(4)
        rng = np.random.default_rng(field_seed)
        pad = 2 * config.length_scale
        self.centers = rng.uniform(-pad, 1 + pad, size=(config.n_bumps, 2))
        self.amps = rng.uniform(-1.0, 1.0, size=config.n_bumps)
        self.scales = config.length_scale * rng.uniform(0.6, 1.4, size=config.n_bumps)

        hrng = np.random.default_rng(hidden_seed)
        n_hidden = int(np.ceil(1.5 / config.hidden_length_scale ** 2 / 10))
        self.hidden_centers = hrng.uniform(-pad, 1 + pad, size=(n_hidden, 2))
        self.hidden_amps = hrng.normal(0.0, 1.0, size=n_hidden)
        probe = hrng.uniform(0.0, 1.0, size=(2000, 2))
        raw = self._hidden_raw(probe[:, 0], probe[:, 1])
        self.hidden_scale = config.hidden_amp / raw.std() if config.hidden_amp > 0 else 0.0
        self.hidden_offset = raw.mean()

        nrng = np.random.default_rng(nuis_seed)
        self.nuis_centers = nrng.uniform(-pad, 1 + pad, size=(40, 2))
        self.nuis_amps = nrng.uniform(-1.0, 1.0, size=40)

        erng = np.random.default_rng(embed_seed)
        d = config.embed_dim
        # inputs: log-biomass, saturating biomass, nuisance texture, season
        self.mix = erng.normal(0.0, 1.0, size=(4, d)) * np.array([[2.5], [2.5], [0.8], [0.4]])
        self.mix[:, 0] = [3.0, 0.0, 0.3, 0.0]
        self.mix[:, 1] = [0.0, 3.0, 0.0, 0.2]
        self.bias = erng.normal(0.0, 0.5, size=d)
        self.bias[:2] = [-2.0, -1.5]
        self.linear_channels = np.zeros(d, dtype=bool)
        self.linear_channels[0] = True

    # ------------------------------------------------------------ truth

    def _check_points(self, lon, lat, t):
        lon, lat, t = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (lon, lat, t)))
        eps = 1e-12
        if np.any((lon < -eps) | (lon > 1 + eps) | (lat < -eps) | (lat > 1 + eps)):
            raise ContractViolation("point outside the region")
        if np.any((t < -eps) | (t > 1 + eps)):
            raise ContractViolation("time outside the study period")
        return lon, lat, t

    def _hidden_raw(self, lon, lat) -> np.ndarray:
        pts = np.stack([np.asarray(lon, float), np.asarray(lat, float)], axis=-1)
        d2 = ((pts[..., None, :] - self.hidden_centers) ** 2).sum(-1)
        return (self.hidden_amps * np.exp(-0.5 * d2 / self.config.hidden_length_scale ** 2)).sum(-1)

    def hidden_log_multiplier(self, lon, lat) -> np.ndarray:
        """Log of the structure multiplier; zero-mean with std ``hidden_amp`` over the region."""
        return self.hidden_scale * (self._hidden_raw(lon, lat) - self.hidden_offset)

    def base_field(self, lon, lat) -> np.ndarray:
        """Undisturbed AGBD (Mg/ha)."""
        cfg = self.config
        pts = np.stack([np.asarray(lon, float), np.asarray(lat, float)], axis=-1)
        d2 = ((pts[..., None, :] - self.centers) ** 2).sum(-1)
        raw = (self.amps * np.exp(-0.5 * d2 / self.scales ** 2)).sum(-1)
        frac = 1.0 / (1.0 + np.exp(-2.0 * raw))
        agbd = cfg.biomass_low + (cfg.biomass_high - cfg.biomass_low) * frac
        agbd = agbd * np.exp(self.hidden_log_multiplier(lon, lat))
        return np.clip(agbd, *cfg.biomass_range)

    def retained(self, lon, lat, t) -> np.ndarray:
        out = np.ones(np.broadcast(lon, lat, t).shape)
        for ev in self.config.events:
            hit = ((lon - ev.center_lon) ** 2 + (lat - ev.center_lat) ** 2 <= ev.radius ** 2) & (t >= ev.event_time)
            out = np.where(hit, out * ev.retained_fraction, out)
        return out

    def true_biomass(self, lon, lat, t) -> np.ndarray:
        """Ground-truth AGBD (Mg/ha) at normalized position and time ``t`` = tau."""
        lon, lat, t = self._check_points(lon, lat, t)
        return self.base_field(lon, lat) * self.retained(lon, lat, t)

    def nuisance(self, lon, lat) -> np.ndarray:
        pts = np.stack([np.asarray(lon, float), np.asarray(lat, float)], axis=-1)
        d2 = ((pts[..., None, :] - self.nuis_centers) ** 2).sum(-1)
        return np.tanh((self.nuis_amps * np.exp(-0.5 * d2 / 0.1 ** 2)).sum(-1))

    # ------------------------------------------------------------ embeddings

    def embed(self, lon, lat, t, doy_sin, rng: np.random.Generator | None) -> np.ndarray:
        """Vectorized patches (N, 3, 3, D); ``rng=None`` gives noiseless patches."""
        lon, lat, t = self._check_points(np.atleast_1d(lon), np.atleast_1d(lat), np.atleast_1d(t))
        offs = np.array([-1, 0, 1]) * PIXEL_OFFSET
        plon = np.clip(lon[:, None, None] + offs[None, None, :], 0.0, 1.0)
        plat = np.clip(lat[:, None, None] + offs[None, :, None], 0.0, 1.0)
        plon, plat = np.broadcast_arrays(plon, plat)
        tt = np.broadcast_to(t[:, None, None], plon.shape)
        agbd = self.base_field(plon, plat) * self.retained(plon, plat, tt)
        # the sensor responds to biomass with the structure multiplier divided out
        agbd = agbd * np.exp(-self.hidden_log_multiplier(plon, plat))
        logb = normalize_agbd(agbd)
        sat = (agbd - _smooth_softplus(agbd - 0.6 * BIOMASS_CAP, 0.05)) / (0.6 * BIOMASS_CAP)
        season = np.broadcast_to(np.asarray(doy_sin, float).reshape(-1, 1, 1), plon.shape)
        inputs = np.stack([logb - 0.7, sat - 0.5, self.nuisance(plon, plat), season], axis=-1)
        pre = inputs @ self.mix + self.bias
        patch = np.where(self.linear_channels, pre, np.tanh(pre))
        if rng is not None and self.config.embed_noise > 0:
            patch = patch + rng.normal(0.0, self.config.embed_noise, size=patch.shape)
        return patch

    def tile_of(self, lon, lat) -> np.ndarray:
        nx, ny = self.config.tiles
        col = np.minimum((np.asarray(lon) * nx).astype(int), nx - 1)
        row = np.minimum((np.asarray(lat) * ny).astype(int), ny - 1)
        return row * nx + col

    def tau_of(self, year, day_of_year) -> np.ndarray:
        start, end = self.config.period
        span = (end - start).days
        year = np.atleast_1d(year)
        doy = np.atleast_1d(day_of_year)
        days = np.array([(date_of(int(y), int(d)) - start).days for y, d in zip(year, doy)])
        return days / span


def true_biomass(world: World, lon, lat, t):
    return world.true_biomass(lon, lat, t)


def synth_embedding(world: World, lon: float, lat: float, t: float, rng=None,
                    day_of_year: int = 1) -> np.ndarray:
    """One (3, 3, D) patch at a normalized point and time."""
    s = math.sin(2 * math.pi * day_of_year / 365.0)
    return world.embed(lon, lat, t, s, rng)[0]


class FootprintSample(NamedTuple):
    footprints: list[Footprint]
    truth: np.ndarray          # noiseless AGBD, Mg/ha, parallel to footprints
    sparse_tiles: list[tuple[int, int]]  # (year, tile_id) pairs with < 4 shots


def _track_points(rng, cfg: WorldConfig):
    theta = rng.uniform(0.0, math.pi)
    direction = np.array([math.cos(theta), math.sin(theta)])
    normal = np.array([-direction[1], direction[0]])
    anchor = rng.uniform(0.0, 1.0, size=2)
    half = math.sqrt(2.0)
    out = []
    for b in range(cfg.beams):
        offset = (b - (cfg.beams - 1) / 2.0) * cfg.beam_spacing
        phase = rng.uniform(0.0, cfg.along_track_spacing)
        s = np.arange(-half + phase, half, cfg.along_track_spacing)
        pts = anchor + offset * normal + s[:, None] * direction
        out.append(pts)
    pts = np.concatenate(out)
    inside = (pts >= 0.0).all(axis=1) & (pts < 1.0).all(axis=1)
    return pts[inside]


def sample_footprints(world: World | WorldConfig) -> FootprintSample:
    """Stripe-track sampling of every year with lognormal observation noise."""
    if isinstance(world, WorldConfig):
        world = World(world)
    cfg = world.config
    period = cfg.period
    target = cfg.footprints_per_tile_year * cfg.n_tiles
    footprints: list[Footprint] = []
    truths = []
    sparse = []
    fid = 0
    year_seeds = np.random.SeedSequence([cfg.seed, 7]).spawn(len(cfg.years))
    for year, yseed in zip(cfg.years, year_seeds):
        rng = np.random.default_rng(yseed)
        pts_list, doy_list = [], []
        count = 0
        n_days = (dt.date(year, 12, 31) - dt.date(year, 1, 1)).days + 1
        while count < target:
            pts = _track_points(rng, cfg)
            if len(pts) == 0:
                continue
            doy = int(rng.integers(1, n_days + 1))
            pts = pts[: target - count]  # the last track is cut short at the target
            pts_list.append(pts)
            doy_list.append(np.full(len(pts), doy))
            count += len(pts)
        pts = np.concatenate(pts_list)
        doys = np.concatenate(doy_list)
        lon, lat = pts[:, 0], pts[:, 1]
        tau = world.tau_of(np.full(len(pts), year), doys)
        tau = np.clip(tau, 0.0, 1.0)
        truth = world.true_biomass(lon, lat, tau)
        eps = rng.normal(0.0, cfg.noise_sigma_log, size=len(pts))
        observed = np.minimum(truth * np.exp(eps), BIOMASS_CAP)
        y = np.clip(normalize_agbd(observed), 0.0, 1.0)
        s = np.sin(2 * np.pi * doys / 365.0)
        patches = world.embed(lon, lat, tau, s, rng)
        tiles = world.tile_of(lon, lat)
        counts = np.bincount(tiles, minlength=cfg.n_tiles)
        sparse.extend((year, int(t)) for t in np.flatnonzero(counts < 4))
        for i in range(len(pts)):
            coord = SpatioTemporalCoord.from_observation(lon[i], lat[i], year, int(doys[i]), period)
            footprints.append(Footprint(fid, int(tiles[i]), year, int(doys[i]), coord,
                                        patches[i], float(y[i])))
            fid += 1
        truths.append(truth)
    if sparse:
        warnings.warn(f"{len(sparse)} tile-years have fewer than 4 footprints", stacklevel=2)
    return FootprintSample(footprints, np.concatenate(truths), sparse)


# ---------------------------------------------------------------- dataset file IO

class DatasetParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DatasetFormatError(DatasetParseError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(footprints, path, years=None, comment: str | None = None) -> None:
    """Write footprints as UTF-8 comma-separated text.

    Line 1: ``version=1,D=<D>,period=<first year>-<last year>``. Then one row
    per footprint: footprint_id, tile_id, year, day_of_year, lon, lat, y_norm,
    then 9*D patch values in (row, col, channel) order. ``lon``/``lat`` are
    normalized region coordinates. Floats use the shortest round-trip form.
    ``comment`` lines are written right after the header, each prefixed ``#``.
    """
    footprints = list(footprints)
    if not footprints:
        raise ContractViolation("nothing to write")
    d = footprints[0].patch.shape[-1]
    if years is None:
        years = sorted({f.year for f in footprints})
    lines = [f"version={DATASET_VERSION},D={d},period={min(years)}-{max(years)}"]
    if comment:
        lines += ["# " + c if c else "#" for c in comment.rstrip("\n").split("\n")]
    for f in footprints:
        if f.patch.shape != (3, 3, d):
            raise ContractViolation(f"footprint {f.footprint_id}: patch shape {f.patch.shape}")
        head = [str(f.footprint_id), str(f.tile_id), str(f.year), str(f.day_of_year),
                _fmt(f.coord.lon_norm), _fmt(f.coord.lat_norm), _fmt(f.y_norm)]
        lines.append(",".join(head + [_fmt(v) for v in f.patch.reshape(-1)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str):
    try:
        fields = dict(part.split("=", 1) for part in line.strip().split(","))
        version = int(fields["version"])
        d = int(fields["D"])
        first, last = (int(v) for v in fields["period"].split("-"))
    except (KeyError, ValueError) as exc:
        raise DatasetParseError(f"malformed header {line.strip()!r}", 1) from exc
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}", 1)
    return d, (dt.date(first, 1, 1), dt.date(last, 12, 31))


def read_dataset(path) -> list[Footprint]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise DatasetParseError("empty file", 1)
    d, period = _parse_header(lines[0])
    if not text.endswith("\n"):
        raise DatasetParseError("file is truncated (no final newline)", len(lines))
    width = 7 + 9 * d
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise DatasetFormatError(
                f"row has {len(parts)} columns, header D={d} requires {width}", lineno)
        try:
            fid, tile, year, doy = (int(v) for v in parts[:4])
            lon, lat, y = (float(v) for v in parts[4:7])
            patch = np.array([float(v) for v in parts[7:]]).reshape(3, 3, d)
            coord = SpatioTemporalCoord.from_observation(lon, lat, year, doy, period)
            out.append(Footprint(fid, tile, year, doy, coord, patch, y))
        except (ValueError, ContractViolation) as exc:
            raise DatasetParseError(str(exc), lineno) from exc
    return out


def world_summary(world: World) -> dict:
    cfg = world.config
    return {"tiles": list(cfg.tiles), "years": list(cfg.years), "seed": cfg.seed,
            "noise_sigma_log": cfg.noise_sigma_log, "events": len(cfg.events)}
