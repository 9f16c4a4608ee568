"""Forecast evaluation: latitude-weighted RMSE, zonal power spectra,
vertically integrated column energy, and temporal discontinuity scoring.

Spectrum normalization: the energy at zonal wavenumber m is defined so that
the sum over wavenumbers equals the longitude mean of the squared signal
(Parseval). Energy components use c_v = 718 J/kg/K on the Celsius
temperature, the linear latent-heat law L_v = 2.501e6 - 2361*T_c, the
geopotential as potential energy, and k = (u^2 + v^2)/2, each integrated
over the available pressure levels by the trapezoidal rule and divided by
g = 9.80665.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .grid import GRAVITY, GridSpec, StateField, VariableRegistry, latitude_weights

C_V = 718.0  # J kg^-1 K^-1
LV_0 = 2.501e6  # J kg^-1 at 0 C
LV_SLOPE = -2361.0  # J kg^-1 K^-1
KELVIN_0C = 273.15


def weighted_rmse(forecast: StateField, truth: StateField, channel, grid: GridSpec,
                  registry: VariableRegistry | None = None) -> float:
    """Latitude-weighted RMSE of one channel (index or name) in the units of
    the fields."""
    if forecast.values.shape != truth.values.shape:
        raise ValueError("forecast and truth must share grid and channels")
    if isinstance(channel, str):
        if registry is None:
            raise ValueError("registry required to resolve a channel name")
        channel = registry.channel_index(channel)
    diff = forecast.values[channel].astype(np.float64) - truth.values[channel].astype(np.float64)
    if diff.shape != (grid.n_lat, grid.n_lon):
        raise ValueError(f"channel field {diff.shape} does not match the grid")
    w = latitude_weights(grid)[:, None]
    return float(np.sqrt(np.mean(w * diff**2)))


@dataclass
class SpectrumResult:
    wavenumbers: np.ndarray  # 0 .. n_lon//2
    energy: np.ndarray
    lat_band: tuple[float, float]


def zonal_power_spectrum(field: np.ndarray, grid: GridSpec,
                         lat_band=(-60.0, 60.0)) -> SpectrumResult:
    """Energy per zonal wavenumber, averaged over the latitude band.

    Per latitude row the DFT along longitude is folded onto wavenumbers
    0..n_lon//2 with real-signal symmetry, normalized so that
    sum_m E(m) == mean_j f(j)^2 for that row.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (grid.n_lat, grid.n_lon):
        raise ValueError(f"field {field.shape} does not match the grid")
    lo, hi = min(lat_band), max(lat_band)
    rows = np.nonzero((grid.latitudes >= lo) & (grid.latitudes <= hi))[0]
    if rows.size == 0:
        raise ValueError(f"latitude band {lat_band} contains no grid rows")
    W = grid.n_lon
    coeff = np.fft.rfft(field[rows], axis=1) / W
    energy = np.abs(coeff) ** 2
    if W % 2 == 0:
        energy[:, 1:-1] *= 2.0
    else:
        energy[:, 1:] *= 2.0
    return SpectrumResult(
        wavenumbers=np.arange(energy.shape[1]),
        energy=energy.mean(axis=0),
        lat_band=(lo, hi),
    )


@dataclass
class EnergyBudget:
    internal: float
    latent: float
    potential: float
    kinetic: float
    timestamp: dt.datetime

    def __post_init__(self):
        vals = (self.internal, self.latent, self.potential, self.kinetic)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("energy components must be finite")
        if self.kinetic < 0:
            raise ValueError("kinetic energy cannot be negative")


def kinetic_energy_density(u, v):
    """Kinetic energy per unit mass, (u^2 + v^2) / 2, J kg^-1."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return 0.5 * (u * u + v * v)


def latent_heat(t_celsius):
    """Linear latent heat of vaporization, J kg^-1."""
    return LV_0 + LV_SLOPE * np.asarray(t_celsius, dtype=np.float64)


def _level_cube(state: StateField, registry: VariableRegistry, var: str) -> np.ndarray:
    idx = [registry.pressure_channel_index(var, p) for p in registry.levels]
    return state.values[idx].astype(np.float64)


def column_integral(integrand: np.ndarray, levels_hpa) -> np.ndarray:
    """Trapezoidal integral over pressure (levels in hPa), divided by g."""
    p_pa = np.asarray(levels_hpa, dtype=np.float64) * 100.0
    return np.trapezoid(integrand, x=p_pa, axis=0) / GRAVITY


def energy_components(state: StateField, grid: GridSpec,
                      registry: VariableRegistry) -> EnergyBudget:
    """Area-mean column energy components (J m^-2) of a physical state.

    Requires T, Q, Z, U, V on at least two pressure levels; the integral runs
    over the provided levels.
    """
    if state.normalized:
        raise ValueError("energy components require a physical (denormalized) state")
    missing = [v for v in ("T", "Q", "Z", "U", "V") if v not in registry.pressure_vars]
    if missing:
        raise ValueError(f"registry lacks pressure variables {missing}")
    if registry.n_levels < 2:
        raise ValueError("column integration needs at least two pressure levels")
    t_c = _level_cube(state, registry, "T") - KELVIN_0C
    q = _level_cube(state, registry, "Q")
    z = _level_cube(state, registry, "Z")
    u = _level_cube(state, registry, "U")
    v = _level_cube(state, registry, "V")
    levels = registry.levels
    w = latitude_weights(grid)[:, None]

    def area_mean(col):
        return float(np.mean(w * col))

    return EnergyBudget(
        internal=area_mean(column_integral((1.0 - q) * C_V * t_c, levels)),
        latent=area_mean(column_integral(latent_heat(t_c) * q, levels)),
        potential=area_mean(column_integral(z, levels)),
        kinetic=area_mean(column_integral(kinetic_energy_density(u, v), levels)),
        timestamp=state.timestamp,
    )


def kinetic_energy_series(dataset: Dataset, timestamps=None):
    """Column-integrated, area-mean kinetic energy per timestamp (J m^-2).

    Needs only U and V pressure channels, so it also works on registries
    without the full energy variable set.
    """
    registry = dataset.registry
    if "U" not in registry.pressure_vars or "V" not in registry.pressure_vars:
        raise ValueError("kinetic energy needs U and V pressure variables")
    if registry.n_levels < 2:
        raise ValueError("column integration needs at least two pressure levels")
    w = latitude_weights(dataset.grid)[:, None]
    timestamps = tuple(timestamps) if timestamps is not None else dataset.timestamps
    values = np.empty(len(timestamps))
    for i, ts in enumerate(timestamps):
        state = dataset.load(ts)
        k = kinetic_energy_density(
            _level_cube(state, registry, "U"), _level_cube(state, registry, "V")
        )
        values[i] = float(np.mean(w * column_integral(k, registry.levels)))
    return timestamps, values


@dataclass
class DiscontinuityRecord:
    index: int
    utc_hour: int
    z: float
    flagged: bool


@dataclass
class DiscontinuityResult:
    records: list[DiscontinuityRecord]
    median_increment: float
    threshold: float

    @property
    def flagged_hours(self) -> set[int]:
        return {r.utc_hour for r in self.records if r.flagged}

    def max_z(self, hour: int) -> float:
        zs = [r.z for r in self.records if r.utc_hour == hour]
        return max(zs) if zs else 0.0


def discontinuity_score(hours_utc, values, boundary_hours=(9, 21),
                        threshold: float = 3.0) -> DiscontinuityResult:
    """Score boundary-hour increments of an hourly series against the rest.

    For each sample whose UTC hour is a boundary hour, z is the absolute
    increment from the previous hour divided by the median absolute
    increment over non-boundary hours; a z above the threshold is flagged.
    A zero increment over a zero median scores z = 0.
    """
    hours_utc = np.asarray(hours_utc, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if hours_utc.shape != values.shape or values.ndim != 1:
        raise ValueError("hours and values must be equal-length 1-D arrays")
    if values.size < 48:
        raise ValueError(f"need at least 48 hourly samples, got {values.size}")
    inc = np.abs(np.diff(values))
    inc_hours = hours_utc[1:]
    boundary = np.isin(inc_hours, list(boundary_hours))
    if np.all(boundary):
        raise ValueError("no non-boundary increments to calibrate against")
    med = float(np.median(inc[~boundary]))
    records = []
    for i in np.nonzero(boundary)[0]:
        if med > 0:
            z = float(inc[i] / med)
        else:
            z = 0.0 if inc[i] == 0 else float("inf")
        records.append(
            DiscontinuityRecord(
                index=int(i + 1), utc_hour=int(inc_hours[i]), z=z, flagged=z > threshold
            )
        )
    return DiscontinuityResult(records=records, median_increment=med, threshold=threshold)


# ---------------------------------------------------------------------------
# CSV emitters (the plotting surface)


def write_rmse_csv(path, rows):
    """rows: (lead_hour, channel, value)"""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lead_hour", "channel", "value"])
        for lead, channel, value in rows:
            w.writerow([lead, channel, repr(float(value))])


def write_spectrum_csv(path, rows):
    """rows: (wavenumber, energy, lead_day, channel)"""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavenumber", "energy", "lead_day", "channel"])
        for m, e, day, channel in rows:
            w.writerow([m, repr(float(e)), day, channel])


def write_energy_csv(path, budgets):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "internal", "latent", "potential", "kinetic"])
        for b in budgets:
            w.writerow([
                b.timestamp.isoformat(),
                repr(b.internal), repr(b.latent), repr(b.potential), repr(b.kinetic),
            ])


def write_jumps_csv(path, timestamps, result: DiscontinuityResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "utc_hour", "z", "flag"])
        for r in result.records:
            w.writerow([
                timestamps[r.index].isoformat(), r.utc_hour, repr(r.z), int(r.flagged),
            ])
