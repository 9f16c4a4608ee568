"""Grids, variable registries, physical states, and normalization."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0
GRAVITY = 9.80665  # m s^-2

_LON_UNIFORM_TOL = 1e-9  # degrees


@dataclass(frozen=True)
class GridSpec:
    """Regular latitude-longitude grid.

    Latitudes are strictly monotone in [-90, 90] degrees; longitudes are
    uniformly spaced in [0, 360). Rows are latitudes, columns longitudes.
    """

    latitudes: np.ndarray
    longitudes: np.ndarray

    def __post_init__(self):
        lat = np.ascontiguousarray(self.latitudes, dtype=np.float64)
        lon = np.ascontiguousarray(self.longitudes, dtype=np.float64)
        object.__setattr__(self, "latitudes", lat)
        object.__setattr__(self, "longitudes", lon)
        if lat.ndim != 1 or lon.ndim != 1:
            raise ValueError("latitudes and longitudes must be 1-D")
        if lat.size < 2:
            raise ValueError(f"need at least 2 latitude rows, got {lat.size}")
        if lon.size < 4:
            raise ValueError(f"need at least 4 longitude columns, got {lon.size}")
        if np.any(lat < -90.0) or np.any(lat > 90.0):
            raise ValueError("latitudes must lie in [-90, 90]")
        dlat = np.diff(lat)
        if not (np.all(dlat > 0) or np.all(dlat < 0)):
            raise ValueError("latitudes must be strictly monotone")
        if np.any(lon < 0.0) or np.any(lon >= 360.0):
            raise ValueError("longitudes must lie in [0, 360)")
        dlon = np.diff(lon)
        if np.any(np.abs(dlon - dlon[0]) > _LON_UNIFORM_TOL):
            raise ValueError("longitude spacing must be uniform")
        if dlon[0] <= 0:
            raise ValueError("longitudes must be increasing")

    @property
    def n_lat(self) -> int:
        return self.latitudes.size

    @property
    def n_lon(self) -> int:
        return self.longitudes.size

    @property
    def lon_spacing(self) -> float:
        """Uniform longitude spacing in degrees."""
        return float(self.longitudes[1] - self.longitudes[0])

    @classmethod
    def regular(cls, n_lat: int, n_lon: int) -> "GridSpec":
        """Global grid with pole-to-pole latitudes and uniform longitudes."""
        lats = np.linspace(90.0, -90.0, n_lat)
        lons = np.arange(n_lon) * (360.0 / n_lon)
        return cls(lats, lons)

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return np.array_equal(self.latitudes, other.latitudes) and np.array_equal(
            self.longitudes, other.longitudes
        )


@dataclass(frozen=True)
class VariableRegistry:
    """Ordered naming of the channels in a state array.

    Channel layout: surface variables first, then pressure-level variables
    grouped by variable (``U200, U500, ..., V200, ...``). Levels are in hPa,
    increasing (i.e. descending in altitude).
    """

    surface_vars: tuple[str, ...]
    pressure_vars: tuple[str, ...]
    levels: tuple[float, ...]
    static_vars: tuple[str, ...] = ()
    clock_vars: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "surface_vars", tuple(self.surface_vars))
        object.__setattr__(self, "pressure_vars", tuple(self.pressure_vars))
        object.__setattr__(self, "levels", tuple(float(p) for p in self.levels))
        object.__setattr__(self, "static_vars", tuple(self.static_vars))
        object.__setattr__(self, "clock_vars", tuple(self.clock_vars))
        if self.pressure_vars and not self.levels:
            raise ValueError("pressure variables given but no levels")
        if self.levels and np.any(np.diff(self.levels) <= 0):
            raise ValueError("levels must be strictly increasing in hPa")
        if self.levels and min(self.levels) <= 0:
            raise ValueError("levels must be positive pressures in hPa")
        all_names = (
            list(self.surface_vars)
            + list(self.pressure_vars)
            + list(self.static_vars)
            + list(self.clock_vars)
        )
        if len(set(all_names)) != len(all_names):
            raise ValueError("variable names must be unique across all groups")

    @property
    def n_surface(self) -> int:
        return len(self.surface_vars)

    @property
    def n_pressure_vars(self) -> int:
        return len(self.pressure_vars)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def n_channels(self) -> int:
        return self.n_surface + self.n_pressure_vars * self.n_levels

    @property
    def channel_names(self) -> tuple[str, ...]:
        names = list(self.surface_vars)
        for v in self.pressure_vars:
            for p in self.levels:
                names.append(f"{v}{p:g}")
        return tuple(names)

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise KeyError(f"unknown channel {name!r}") from None

    def pressure_channel_index(self, var: str, level: float) -> int:
        """Index of a pressure variable at a given level (hPa)."""
        if var not in self.pressure_vars:
            raise KeyError(f"unknown pressure variable {var!r}")
        if float(level) not in self.levels:
            raise KeyError(f"level {level} hPa not in registry levels {self.levels}")
        iv = self.pressure_vars.index(var)
        il = self.levels.index(float(level))
        return self.n_surface + iv * self.n_levels + il

    def channel_levels(self) -> np.ndarray:
        """Per-channel pressure level in hPa; NaN for surface channels."""
        out = np.full(self.n_channels, np.nan)
        for v_i in range(self.n_pressure_vars):
            for l_i, p in enumerate(self.levels):
                out[self.n_surface + v_i * self.n_levels + l_i] = p
        return out

    def tp_channels(self) -> tuple[int, ...]:
        """Indices of total-precipitation channels (log-transformed before stats)."""
        return tuple(
            i for i, name in enumerate(self.surface_vars) if name == "TP"
        )


def standard_registry() -> VariableRegistry:
    """The 71-channel operational variable set: 6 surface variables plus
    5 upper-air variables on 13 pressure levels, with the usual static and
    clock conditioning fields."""
    return VariableRegistry(
        surface_vars=("U10M", "V10M", "T2M", "TD2M", "MSLP", "TP"),
        pressure_vars=("Z", "Q", "T", "U", "V"),
        levels=(50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000),
        static_vars=("SURFACE_Z", "LAND_MASK", "SOIL_TYPE"),
        clock_vars=("LOCAL_TIME", "YEAR_PROGRESS"),
    )


@dataclass
class StateField:
    """A C x H x W array of variables on a lat-lon grid at one timestamp."""

    values: np.ndarray
    timestamp: dt.datetime
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"state values must be C x H x W, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"state at {self.timestamp} contains non-finite values")

    def validate(self, grid: GridSpec, registry: VariableRegistry) -> None:
        expected = (registry.n_channels, grid.n_lat, grid.n_lon)
        if self.values.shape != expected:
            raise ValueError(
                f"state shape {self.values.shape} does not match {expected}"
            )


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        std = np.ascontiguousarray(self.std, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-D arrays of equal length")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(std)):
            raise ValueError("norm stats must be finite")
        if np.any(std <= 0):
            bad = np.nonzero(std <= 0)[0]
            raise ValueError(f"std must be strictly positive; offending channels {bad.tolist()}")


def latitude_weights(grid) -> np.ndarray:
    """Area-proportional weight per latitude row, normalized to unit mean.

    Cell boundaries are midpoints between rows, clamped to the poles, so a
    grid that includes the poles assigns each pole row its half cell. The
    weight of a row is proportional to ``|sin(b_upper) - sin(b_lower)|``.
    Accepts a GridSpec or a raw latitude array (degrees).
    """
    lats = grid.latitudes if isinstance(grid, GridSpec) else np.asarray(grid, dtype=np.float64)
    lats = np.atleast_1d(lats)
    n = lats.size
    edges = np.empty(n + 1)
    if n == 1:
        edges[0], edges[1] = -90.0, 90.0
    else:
        edges[1:-1] = 0.5 * (lats[:-1] + lats[1:])
        edges[0] = lats[0] + 0.5 * (lats[0] - lats[1])
        edges[-1] = lats[-1] + 0.5 * (lats[-1] - lats[-2])
        np.clip(edges, -90.0, 90.0, out=edges)
    area = np.abs(np.diff(np.sin(np.deg2rad(edges))))
    return area / area.mean()


def compute_norm_stats(states, registry: VariableRegistry | None = None) -> NormStats:
    """Per-channel mean and population std over all times and grid points.

    Raises ValueError naming the channel if any channel has zero variance.
    """
    states = list(states)
    if len(states) < 2:
        raise ValueError("need at least 2 states to compute normalization stats")
    n_channels = states[0].values.shape[0]
    count = 0
    total = np.zeros(n_channels)
    for s in states:
        if s.values.shape[0] != n_channels:
            raise ValueError("states disagree on channel count")
        total += s.values.sum(axis=(1, 2), dtype=np.float64)
        count += s.values.shape[1] * s.values.shape[2]
    mean = total / count
    sqdev = np.zeros(n_channels)
    for s in states:
        d = s.values.astype(np.float64) - mean[:, None, None]
        sqdev += np.sum(d * d, axis=(1, 2))
    var = sqdev / count
    if np.any(var <= 0):
        bad = int(np.nonzero(var <= 0)[0][0])
        name = registry.channel_names[bad] if registry is not None else f"channel {bad}"
        raise ValueError(f"zero variance in {name}; cannot normalize")
    return NormStats(mean=mean, std=np.sqrt(var))


def normalize(state: StateField, stats: NormStats) -> StateField:
    """Channel-wise (x - mean) / std. The input must not already be normalized."""
    if state.normalized:
        raise ValueError("state is already normalized")
    vals = (state.values - stats.mean[:, None, None].astype(state.values.dtype)) / stats.std[
        :, None, None
    ].astype(state.values.dtype)
    return StateField(vals, state.timestamp, normalized=True)


def denormalize(state: StateField, stats: NormStats) -> StateField:
    """Inverse of :func:`normalize`. The input must be normalized."""
    if not state.normalized:
        raise ValueError("state is not normalized")
    vals = state.values * stats.std[:, None, None].astype(state.values.dtype) + stats.mean[
        :, None, None
    ].astype(state.values.dtype)
    return StateField(vals, state.timestamp, normalized=False)


def tp_transform(tp):
    """Compress precipitation with ``10 * log10(1 + 200 * tp**1.6)``.

    Monotone increasing on tp >= 0; implemented with log1p to stay accurate
    for small accumulations.
    """
    tp = np.asarray(tp, dtype=np.float64)
    if np.any(tp < 0):
        raise ValueError("precipitation must be non-negative")
    return (10.0 / np.log(10.0)) * np.log1p(200.0 * tp**1.6)


def tp_inverse(y):
    """Exact inverse of :func:`tp_transform` (expm1 form, y >= 0)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("transformed precipitation must be non-negative")
    return (np.expm1(y * (np.log(10.0) / 10.0)) / 200.0) ** (1.0 / 1.6)


def transform_state(state: StateField, registry: VariableRegistry) -> StateField:
    """Apply the precipitation transform to the TP channels of a physical state.

    Normalization statistics are computed on transformed states, so this runs
    before :func:`compute_norm_stats` / :func:`normalize`.
    """
    tp = registry.tp_channels()
    if not tp or state.normalized:
        return state
    vals = state.values.copy()
    for c in tp:
        vals[c] = tp_transform(vals[c]).astype(vals.dtype)
    return StateField(vals, state.timestamp, normalized=False)


def untransform_state(state: StateField, registry: VariableRegistry) -> StateField:
    """Invert :func:`transform_state`; tiny negative TP values produced by the
    model are clipped to zero before inversion."""
    tp = registry.tp_channels()
    if not tp or state.normalized:
        return state
    vals = state.values.copy()
    for c in tp:
        vals[c] = tp_inverse(np.maximum(vals[c], 0.0)).astype(vals.dtype)
    return StateField(vals, state.timestamp, normalized=False)


def to_model_space(state: StateField, registry: VariableRegistry, stats: NormStats) -> StateField:
    """Physical state -> transformed + normalized model input."""
    return normalize(transform_state(state, registry), stats)


def from_model_space(state: StateField, registry: VariableRegistry, stats: NormStats) -> StateField:
    """Normalized model output -> physical state."""
    return untransform_state(denormalize(state, stats), registry)
