"""Deterministic toy-atmosphere generator with controllable analysis-style
discontinuities.

Fields are sums of a few large-scale spectral modes (zonal wavenumbers 1-3,
two meridional shapes vanishing at the poles) on top of smooth per-channel
base profiles. Mode coefficients rotate at an advection phase speed, decay
under explicit-Euler diffusion (with a stability check), and are driven by
a diurnal forcing, so trajectories are smooth, bounded, and fully
reproducible from the seed.

Discontinuities are injected separately: at every timestamp whose UTC hour
falls on an analysis boundary, a fresh seeded smooth perturbation of a
prescribed RMS amplitude replaces the previous one and shifts the entire
segment until the next boundary, the way a reassimilated trajectory is
redefined rather than spiked.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, DatasetWriter, open_dataset
from .grid import GridSpec, StateField, VariableRegistry

LON_WAVENUMBERS = (1, 2, 3)
LAT_MODES = (1, 2)
# jump fields live on disjoint zonal wavenumbers, so inside a segment the
# offset's cross term with the dynamics cancels exactly in zonal means
JUMP_LON_WAVENUMBERS = (4, 5, 6)

_BASE_SCALES = {"U": 2.5, "V": 2.5, "T": 4.0, "MSLP": 250.0, "T2M": 5.0, "TP": 1.0}
_DEFAULT_SCALE = 3.0


def default_synth_registry() -> VariableRegistry:
    return VariableRegistry(
        surface_vars=("MSLP", "T2M", "TP"),
        pressure_vars=("U", "V", "T"),
        levels=(200.0, 500.0, 850.0),
        static_vars=("LAND_MASK", "SURFACE_Z", "SOIL_TYPE"),
        clock_vars=("LOCAL_TIME", "YEAR_PROGRESS"),
    )


@dataclass(frozen=True)
class SynthConfig:
    grid: GridSpec
    registry: VariableRegistry
    hours: int = 240
    seed: int = 0
    advection_speed: float = 1.0
    diffusion: float = 0.004
    forcing_amplitude: float = 0.3
    jet_cycle_hours: float = 37.0  # slow wind-amplitude modulation, off the diurnal period
    jet_cycle_amplitude: float = 0.3
    dt_hours: float = 1.0
    burn_in_hours: int = 240  # spin-up before the first emitted state
    jump_eps: float = 0.0  # relative to each channel's std; applied by the injector
    jump_hours: tuple[int, ...] = (9, 21)
    start: dt.datetime = dt.datetime(2021, 1, 1)

    def __post_init__(self):
        if self.hours < 24:
            raise ValueError("need at least 24 hourly samples")
        if self.jump_eps < 0 or self.burn_in_hours < 0:
            raise ValueError("jump_eps and burn_in_hours must be >= 0")
        if self.dt_hours <= 0 or abs(round(1.0 / self.dt_hours) - 1.0 / self.dt_hours) > 1e-9:
            raise ValueError("dt_hours must divide one hour")


def _kappa2(m: int, n: int) -> float:
    return float(m * m + (2 * n) ** 2)


def _lat_basis(grid: GridSpec) -> np.ndarray:
    """(n_modes, H) meridional shapes, zero at both poles."""
    phi_hat = grid.latitudes / 90.0
    env = np.cos(0.5 * np.pi * phi_hat)
    return np.stack([env * np.cos((n - 1) * np.pi * phi_hat) for n in LAT_MODES])


def _channel_scale(name: str) -> float:
    for key, scale in _BASE_SCALES.items():
        if name.startswith(key):
            return scale
    return _DEFAULT_SCALE


def _base_profile(name: str, grid: GridSpec, level: float | None) -> np.ndarray:
    phi_hat = grid.latitudes / 90.0
    if name.startswith("U"):
        shear = 1.0 if level is None else 0.4 + 0.6 * (1000.0 - level) / 1000.0
        prof = 8.0 * shear * np.cos(0.5 * np.pi * phi_hat)
    elif name.startswith("V"):
        prof = np.zeros_like(phi_hat)
    elif name.startswith("T2M"):
        prof = 288.0 - 40.0 * phi_hat**2
    elif name.startswith("T"):
        cold = 0.0 if level is None else 60.0 * (1000.0 - level) / 1000.0
        prof = 285.0 - cold - 35.0 * phi_hat**2
    elif name.startswith("MSLP"):
        prof = 101325.0 + 600.0 * np.cos(2.0 * np.pi * phi_hat)
    else:
        prof = np.zeros_like(phi_hat)
    return np.repeat(prof[:, None], grid.n_lon, axis=1)


def _smooth_random_field(rng, grid: GridSpec, wavenumbers=LON_WAVENUMBERS) -> np.ndarray:
    """Zero-mean smooth field from random mode coefficients, unit-free."""
    lam = np.deg2rad(grid.longitudes)
    basis = _lat_basis(grid)
    out = np.zeros((grid.n_lat, grid.n_lon))
    for ni in range(len(LAT_MODES)):
        for m in wavenumbers:
            c = rng.normal() + 1j * rng.normal()
            out += np.real(c * np.exp(1j * m * lam))[None, :] * basis[ni][:, None]
    return out


def _synthesize(coeffs_c, lam, basis) -> np.ndarray:
    """Field contribution of a (n_modes, n_wavenumbers) coefficient block."""
    out = np.zeros((basis.shape[1], lam.size))
    for ni in range(coeffs_c.shape[0]):
        zonal = np.real(coeffs_c[ni][:, None] * np.exp(1j * np.outer(LON_WAVENUMBERS, lam)))
        out += basis[ni][:, None] * zonal.sum(axis=0)
    return out


def generate_trajectory(config: SynthConfig, out_path) -> Dataset:
    """Write an hourly trajectory in the on-disk dataset format.

    Raises on an unstable diffusion step, suggesting a finer dt.
    """
    grid, registry = config.grid, config.registry
    kmax = max(_kappa2(m, n) for m in LON_WAVENUMBERS for n in LAT_MODES)
    cfl = config.diffusion * kmax * config.dt_hours
    if cfl > 1.0:
        suggested = 1.0 / (config.diffusion * kmax)
        raise ValueError(
            f"unstable diffusion step (diffusion*kappa_max^2*dt = {cfl:.3f} > 1); "
            f"use dt_hours <= {suggested:.4f}"
        )

    rng = np.random.default_rng(config.seed)
    C = registry.n_channels
    names = registry.channel_names
    levels = registry.channel_levels()
    n_lat_modes, n_m = len(LAT_MODES), len(LON_WAVENUMBERS)

    coeffs = (rng.normal(size=(C, n_lat_modes, n_m)) + 1j * rng.normal(size=(C, n_lat_modes, n_m)))
    coeffs /= 1.0 + np.arange(n_m)[None, None, :]
    forcing = (rng.normal(size=(C, n_lat_modes, n_m)) + 1j * rng.normal(size=(C, n_lat_modes, n_m)))
    forcing *= config.forcing_amplitude / (1.0 + np.arange(n_m)[None, None, :])

    lam = np.deg2rad(grid.longitudes)
    basis = _lat_basis(grid)
    bases = np.stack([_base_profile(names[c], grid, levels[c] if not np.isnan(levels[c]) else None)
                      for c in range(C)])
    scales = np.array([_channel_scale(names[c]) for c in range(C)])
    tp_channels = set(registry.tp_channels())

    omega = 2.0 * np.pi * config.advection_speed * np.asarray(LON_WAVENUMBERS) / 96.0
    kappa = np.array([[_kappa2(m, n) for m in LON_WAVENUMBERS] for n in LAT_MODES])
    rot = np.exp(1j * omega * config.dt_hours)[None, None, :]
    decay = 1.0 - config.diffusion * kappa[None, :, :] * config.dt_hours

    statics = _make_statics(rng, grid)
    meta = {f"synth.{k}": v for k, v in _config_echo(config).items()}
    writer = DatasetWriter(out_path, grid, registry, statics=statics, meta=meta)

    substeps = round(1.0 / config.dt_hours)
    # spin up onto the forced limit cycle so emitted increments are homogeneous
    hours_elapsed = -float(config.burn_in_hours)
    for _ in range(config.burn_in_hours * substeps):
        hours_elapsed += config.dt_hours
        phase = np.exp(1j * 2.0 * np.pi * hours_elapsed / 24.0)
        coeffs = coeffs * rot * decay + config.dt_hours * forcing * phase
    jet_phase = float(rng.uniform(0.0, 2.0 * np.pi))
    wind = np.array([names[c][0] in ("U", "V") and not names[c].startswith("T")
                     for c in range(C)])
    for h in range(config.hours):
        when = config.start + dt.timedelta(hours=h)
        jet = 1.0 + config.jet_cycle_amplitude * np.sin(
            2.0 * np.pi * hours_elapsed / config.jet_cycle_hours + jet_phase
        )
        values = np.empty((C, grid.n_lat, grid.n_lon), dtype=np.float64)
        for c in range(C):
            wave = _synthesize(coeffs[c], lam, basis)
            if c in tp_channels:
                values[c] = 0.05 * np.logaddexp(0.0, wave)
            elif wind[c]:
                values[c] = bases[c] * jet + scales[c] * wave
            else:
                values[c] = bases[c] + scales[c] * wave
        writer.add(StateField(values.astype(np.float32), when))
        for _ in range(substeps):
            hours_elapsed += config.dt_hours
            phase = np.exp(1j * 2.0 * np.pi * hours_elapsed / 24.0)
            coeffs = coeffs * rot * decay + config.dt_hours * forcing * phase
    return writer.close()


def _make_statics(rng, grid: GridSpec) -> dict[str, np.ndarray]:
    def unit(x):
        lo, hi = x.min(), x.max()
        return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)

    land = (unit(_smooth_random_field(rng, grid)) > 0.55).astype(np.float64)
    surface_z = unit(_smooth_random_field(rng, grid))
    soil = np.round(2.0 * unit(_smooth_random_field(rng, grid))) / 2.0
    return {"LAND_MASK": land, "SURFACE_Z": surface_z, "SOIL_TYPE": soil}


def _config_echo(config: SynthConfig) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(config):
        if f.name in ("grid", "registry"):
            continue
        value = getattr(config, f.name)
        if isinstance(value, dt.datetime):
            value = value.isoformat()
        out[f.name] = str(value)
    return out


def inject_assimilation_jumps(
    dataset: Dataset,
    out_path,
    jump_eps,
    jump_hours=(9, 21),
    seed: int = 0,
    relative: bool = True,
) -> Dataset:
    """Copy a dataset, shifting each analysis segment by a fresh perturbation.

    At every timestamp whose UTC hour is in `jump_hours`, a new seeded smooth
    field with per-channel RMS `eps` replaces the current offset and applies
    to all states until the next boundary. With `relative` the amplitude is
    ``jump_eps * std_c`` of the clean data (TP channels excluded, to keep
    precipitation non-negative); otherwise `jump_eps` is a per-channel array
    of absolute amplitudes. ``jump_eps = 0`` reproduces the input bitwise.
    """
    registry = dataset.registry
    C = registry.n_channels
    if relative:
        if jump_eps < 0:
            raise ValueError("jump_eps must be >= 0")
        eps = np.zeros(C)
        if jump_eps > 0:
            acc = np.zeros(C)
            sq = np.zeros(C)
            n = 0
            for s in dataset.iter_states():
                acc += s.values.sum(axis=(1, 2), dtype=np.float64)
                sq += (s.values.astype(np.float64) ** 2).sum(axis=(1, 2))
                n += s.values.shape[1] * s.values.shape[2]
            std = np.sqrt(np.maximum(sq / n - (acc / n) ** 2, 0.0))
            eps = jump_eps * std
            for c in registry.tp_channels():
                eps[c] = 0.0
    else:
        eps = np.asarray(jump_eps, dtype=np.float64)
        if eps.shape != (C,):
            raise ValueError(f"absolute jump_eps must have shape ({C},)")
        if np.any(eps < 0):
            raise ValueError("jump_eps must be >= 0")

    rng = np.random.default_rng(seed)
    meta = dict(dataset.meta or {})
    meta["jumps.eps"] = str(jump_eps)
    meta["jumps.hours"] = ",".join(str(h) for h in jump_hours)
    meta["jumps.seed"] = str(seed)
    writer = DatasetWriter(
        out_path, dataset.grid, registry,
        normalized=dataset.normalized, stats=dataset.stats,
        statics=dataset.load_statics() or None, meta=meta,
    )
    offset = np.zeros((C, dataset.grid.n_lat, dataset.grid.n_lon))
    boundary = set(jump_hours)
    event = 0
    for state in dataset.iter_states():
        if state.timestamp.hour in boundary:
            # alternate the analysis shift between strong and weak so the
            # domain energy carries the familiar boundary sawtooth; the field
            # sits on wavenumbers the dynamics never excites, so inside a
            # segment its zonal-mean energy is exactly the quadratic term
            amp = 1.4 if event % 2 == 0 else 0.6
            for c in range(C):
                if eps[c] > 0:
                    g = _smooth_random_field(rng, dataset.grid, JUMP_LON_WAVENUMBERS)
                    offset[c] = g * (amp * eps[c] / np.sqrt(np.mean(g * g)))
                else:
                    offset[c] = 0.0
            event += 1
        if np.any(eps > 0):
            values = (state.values.astype(np.float64) + offset).astype(np.float32)
        else:
            values = state.values
        writer.add(StateField(values, state.timestamp, normalized=state.normalized))
    return writer.close()


def split_6h_view(dataset: Dataset) -> Dataset:
    """View of a dataset restricted to the 00/06/12/18 UTC analysis times."""
    return dataset.subset_hours((0, 6, 12, 18))
