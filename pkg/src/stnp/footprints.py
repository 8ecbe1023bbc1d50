"""Shared observation types and the conventions every module agrees on.

Biomass normalization, temporal encoding and the flat feature layout used by
the tree baselines live here so there is exactly one definition of each.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ContractViolation

BIOMASS_CAP = 500.0
LOG_CAP = math.log1p(BIOMASS_CAP)
SIGMA_FLOOR = 1e-3
COORD_DIM = 5


def normalize_agbd(agbd):
    """ln(1 + AGBD) / ln(1 + 500); maps [0, 500] Mg/ha onto [0, 1]."""
    return np.log1p(agbd) / LOG_CAP


def denormalize_agbd(y_norm):
    """Inverse of :func:`normalize_agbd` (naive back-transform, no bias correction)."""
    return np.expm1(np.asarray(y_norm) * LOG_CAP)


def doy_phase(day_of_year):
    angle = 2.0 * np.pi * np.asarray(day_of_year, dtype=np.float64) / 365.0
    return np.sin(angle), np.cos(angle)


def temporal_encode(day_of_year: float, timestamp: dt.date,
                    period: tuple[dt.date, dt.date]) -> tuple[float, float, float]:
    """Seasonal phase and normalized study-period position of one observation.

    Returns ``(sin(2 pi d / 365), cos(2 pi d / 365), tau)`` where ``tau`` is
    the position of ``timestamp`` inside ``period`` scaled to [0, 1].
    """
    start, end = period
    if not start < end:
        raise ContractViolation(f"empty study period {start} .. {end}")
    if not start <= timestamp <= end:
        raise ContractViolation(f"timestamp {timestamp} outside period {start} .. {end}")
    s, c = doy_phase(day_of_year)
    tau = (timestamp - start).days / (end - start).days
    return float(s), float(c), float(tau)


def study_period(years) -> tuple[dt.date, dt.date]:
    years = sorted(years)
    return dt.date(years[0], 1, 1), dt.date(years[-1], 12, 31)


def date_of(year: int, day_of_year: int) -> dt.date:
    return dt.date(year, 1, 1) + dt.timedelta(days=int(day_of_year) - 1)


@dataclass(frozen=True)
class SpatioTemporalCoord:
    lon_norm: float
    lat_norm: float
    doy_sin: float
    doy_cos: float
    tau: float

    def __post_init__(self):
        if abs(self.doy_sin ** 2 + self.doy_cos ** 2 - 1.0) > 1e-9:
            raise ContractViolation("seasonal phase is not on the unit circle")
        for name in ("lon_norm", "lat_norm", "tau"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractViolation(f"{name}={v} outside [0, 1]")

    @classmethod
    def from_observation(cls, lon_norm: float, lat_norm: float, year: int,
                         day_of_year: int, period: tuple[dt.date, dt.date]):
        s, c, tau = temporal_encode(day_of_year, date_of(year, day_of_year), period)
        return cls(float(lon_norm), float(lat_norm), s, c, tau)

    def as_array(self) -> np.ndarray:
        return np.array([self.lon_norm, self.lat_norm, self.doy_sin, self.doy_cos, self.tau])


@dataclass
class Footprint:
    """One LIDAR-like biomass observation.

    ``lon``/``lat`` are normalized to the region box, ``patch`` is (3, 3, D).
    """

    footprint_id: int
    tile_id: int
    year: int
    day_of_year: int
    coord: SpatioTemporalCoord
    patch: np.ndarray
    y_norm: float
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.patch.ndim != 3 or self.patch.shape[:2] != (3, 3):
            raise ContractViolation(f"patch must be (3, 3, D), got {self.patch.shape}")
        if not 0.0 <= self.y_norm <= 1.0:
            raise ContractViolation(f"y_norm={self.y_norm} outside [0, 1]")


@dataclass
class FootprintArrays:
    """Column-stacked view of a list of footprints, the form the models consume."""

    coords: np.ndarray      # (N, 5)
    patches: np.ndarray     # (N, 3, 3, D)
    y: np.ndarray           # (N,)
    year: np.ndarray
    tile_id: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "FootprintArrays":
        return FootprintArrays(self.coords[idx], self.patches[idx], self.y[idx],
                               self.year[idx], self.tile_id[idx])

    @property
    def embed_dim(self) -> int:
        return self.patches.shape[-1]


def stack_footprints(footprints) -> FootprintArrays:
    footprints = list(footprints)
    if not footprints:
        raise ContractViolation("cannot stack an empty footprint list")
    return FootprintArrays(
        coords=np.stack([f.coord.as_array() for f in footprints]),
        patches=np.stack([f.patch for f in footprints]).astype(np.float64),
        y=np.array([f.y_norm for f in footprints], dtype=np.float64),
        year=np.array([f.year for f in footprints]),
        tile_id=np.array([f.tile_id for f in footprints]),
    )


def flat_features(coords: np.ndarray, patches: np.ndarray) -> np.ndarray:
    """Concatenate the 5 normalized coordinates with the flattened 3x3xD patch."""
    coords = np.atleast_2d(coords)
    patches = patches.reshape(len(coords), -1)
    return np.concatenate([coords, patches], axis=1)
