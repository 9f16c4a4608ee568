"""MSLP-minimum cyclone tracking with dynamical acceptance criteria.

A fix is the grid point of minimal mean sea-level pressure within a
great-circle search radius of the previous fix. A candidate is accepted
while the hemisphere-signed 850 hPa relative vorticity criterion holds
within the criteria radius, and, over land, the 10 m wind criterion; the
850-200 hPa thickness maximum is computed and reported but only enforced
when a threshold is configured. Distances use the haversine formula with a
6371 km Earth radius.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import EARTH_RADIUS_KM, GRAVITY, GridSpec, StateField, VariableRegistry

EARTH_RADIUS_M = EARTH_RADIUS_KM * 1000.0


def haversine_km(lat1, lon1, lat2, lon2) -> np.ndarray | float:
    """Great-circle distance in km between points given in degrees."""
    lat1, lon1, lat2, lon2 = (np.deg2rad(np.asarray(x, dtype=np.float64))
                              for x in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(0.5 * dlat) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(0.5 * dlon) ** 2
    return EARTH_RADIUS_KM * 2.0 * np.arcsin(np.minimum(1.0, np.sqrt(a)))


@dataclass(frozen=True)
class TrackPoint:
    time: dt.datetime
    lat: float
    lon: float
    mslp_min: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")
        if not 0.0 <= self.lon < 360.0:
            raise ValueError(f"longitude {self.lon} out of range")


@dataclass(frozen=True)
class CriteriaConfig:
    vort_threshold: float = 5e-5  # s^-1, hemisphere-signed
    criteria_radius_km: float = 278.0
    wind_threshold: float = 8.0  # m s^-1, enforced over land
    search_radius_km: float = 445.0
    step_hours: int = 6
    thickness_threshold_m: float | None = None  # reported; enforced only if set

    def __post_init__(self):
        if self.criteria_radius_km <= 0 or self.search_radius_km <= 0:
            raise ValueError("radii must be positive")


@dataclass
class Track:
    points: list[TrackPoint]
    termination: str

    def __len__(self):
        return len(self.points)


@dataclass
class CriteriaResult:
    accepted: bool
    reasons: list[str]
    max_vorticity: float
    max_wind: float | None
    max_thickness_m: float


def _distance_field(grid: GridSpec, lat0: float, lon0: float) -> np.ndarray:
    lat2d = np.repeat(grid.latitudes[:, None], grid.n_lon, axis=1)
    lon2d = np.repeat(grid.longitudes[None, :], grid.n_lat, axis=0)
    return haversine_km(lat0, lon0, lat2d, lon2d)


def find_mslp_minimum(mslp: np.ndarray, grid: GridSpec, center, radius_km: float):
    """Grid point of minimal MSLP within a great-circle radius of `center`.

    Ties break toward the smallest latitude index, then longitude index.
    Returns (lat, lon, value, (i, j)).
    """
    mslp = np.asarray(mslp)
    if mslp.shape != (grid.n_lat, grid.n_lon):
        raise ValueError(f"MSLP field {mslp.shape} does not match the grid")
    inside = _distance_field(grid, center[0], center[1]) <= radius_km
    if not np.any(inside):
        raise ValueError(f"no grid points within {radius_km} km of {center}")
    masked = np.where(inside, mslp, np.inf)
    flat = int(np.argmin(masked))  # row-major argmin = smallest i, then j, on ties
    i, j = divmod(flat, grid.n_lon)
    return float(grid.latitudes[i]), float(grid.longitudes[j]), float(mslp[i, j]), (i, j)


def relative_vorticity(u: np.ndarray, v: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Relative vorticity dv/dx - du/dy on the sphere, s^-1.

    Centered differences with metric factors 1/(R cos(phi) dlambda) and
    1/(R dphi); longitude wraps, latitude uses one-sided differences at the
    edges. The operator is the plain coordinate curl: a constant u yields
    exactly zero (no tan(phi) correction), and rows within 1e-8 of the poles
    return zero for the zonal term.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.shape != (grid.n_lat, grid.n_lon):
        raise ValueError("u and v must both match the grid")
    phi = np.deg2rad(grid.latitudes)
    dlam = np.deg2rad(grid.lon_spacing)
    cos_phi = np.cos(phi)
    dvdx = (np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / (2.0 * dlam)
    with np.errstate(divide="ignore", invalid="ignore"):
        dvdx = dvdx / (EARTH_RADIUS_M * cos_phi[:, None])
    dvdx[np.abs(cos_phi) < 1e-8, :] = 0.0
    dudy = np.gradient(u, phi, axis=0) / EARTH_RADIUS_M
    return dvdx - dudy


def check_criteria(state: StateField, grid: GridSpec, registry: VariableRegistry,
                   candidate, config: CriteriaConfig,
                   land_mask: np.ndarray | None = None) -> CriteriaResult:
    """Acceptance test for a candidate fix at one time.

    Needs 850 hPa U/V (vorticity), 850 and 200 hPa Z (thickness), and
    U10M/V10M (wind). Without a land mask every point counts as ocean and
    the wind criterion is skipped.
    """
    if state.normalized:
        raise ValueError("criteria require physical units")
    required = [("U", 850.0), ("V", 850.0), ("Z", 850.0), ("Z", 200.0)]
    missing = [f"{v}{int(p)}" for v, p in required
               if v not in registry.pressure_vars or p not in registry.levels]
    for name in ("U10M", "V10M"):
        if name not in registry.surface_vars:
            missing.append(name)
    if missing:
        raise ValueError(f"missing channels for cyclone criteria: {missing}")

    lat0, lon0 = float(candidate[0]), float(candidate[1])
    inside = _distance_field(grid, lat0, lon0) <= config.criteria_radius_km

    u850 = state.values[registry.pressure_channel_index("U", 850.0)]
    v850 = state.values[registry.pressure_channel_index("V", 850.0)]
    zeta = relative_vorticity(u850, v850, grid)
    if lat0 >= 0:
        vort_extreme = float(zeta[inside].max())
        vort_ok = vort_extreme >= config.vort_threshold
    else:
        vort_extreme = float(zeta[inside].min())
        vort_ok = vort_extreme <= -config.vort_threshold

    u10 = state.values[registry.channel_index("U10M")].astype(np.float64)
    v10 = state.values[registry.channel_index("V10M")].astype(np.float64)
    wind = np.sqrt(u10**2 + v10**2)
    max_wind = float(wind[inside].max())
    over_land = False
    if land_mask is not None:
        i = int(np.argmin(np.abs(grid.latitudes - lat0)))
        j = int(np.argmin(np.abs(grid.longitudes - lon0)))
        over_land = land_mask[i, j] > 0.5
    wind_ok = (not over_land) or max_wind > config.wind_threshold

    z850 = state.values[registry.pressure_channel_index("Z", 850.0)].astype(np.float64)
    z200 = state.values[registry.pressure_channel_index("Z", 200.0)].astype(np.float64)
    thickness = (z200 - z850) / GRAVITY
    max_thickness = float(thickness[inside].max())
    thickness_ok = (
        config.thickness_threshold_m is None or max_thickness >= config.thickness_threshold_m
    )

    reasons = []
    if not vort_ok:
        reasons.append("vorticity")
    if not wind_ok:
        reasons.append("wind over land")
    if not thickness_ok:
        reasons.append("thickness")
    return CriteriaResult(
        accepted=not reasons,
        reasons=reasons,
        max_vorticity=vort_extreme,
        max_wind=max_wind,
        max_thickness_m=max_thickness,
    )


def track(states, grid: GridSpec, registry: VariableRegistry, init_position,
          config: CriteriaConfig | None = None,
          land_mask: np.ndarray | None = None) -> Track:
    """Track a cyclone through a time-ordered 6-hourly state sequence.

    Each step searches for the MSLP minimum within the search radius of the
    previous fix and appends it while the acceptance criteria hold; the
    termination reason is recorded, not raised.
    """
    config = config or CriteriaConfig()
    mslp_channel = registry.channel_index("MSLP")
    position = (float(init_position[0]), float(init_position[1]))
    points: list[TrackPoint] = []
    for k, state in enumerate(states):
        try:
            lat, lon, value, _ = find_mslp_minimum(
                state.values[mslp_channel], grid, position, config.search_radius_km
            )
        except ValueError:
            return Track(points, f"no searchable minimum at step {k}")
        result = check_criteria(state, grid, registry, (lat, lon), config, land_mask)
        if not result.accepted:
            return Track(points, f"criteria failed at step {k}: {', '.join(result.reasons)}")
        points.append(TrackPoint(time=state.timestamp, lat=lat, lon=lon, mslp_min=value))
        position = (lat, lon)
    return Track(points, "end of sequence")


def track_mae(track_a: Track, reference) -> list[tuple[float, float]]:
    """Great-circle distance per matched timestamp, km.

    `reference` is a sequence of (time, lat, lon). Returns (lead_hours,
    distance_km) pairs ordered by lead, lead measured from the first track
    fix. Raises when no timestamps overlap.
    """
    if not track_a.points:
        raise ValueError("empty track")
    ref = {t: (la, lo) for t, la, lo in reference}
    t0 = track_a.points[0].time
    out = []
    for p in track_a.points:
        if p.time in ref:
            la, lo = ref[p.time]
            lead = (p.time - t0).total_seconds() / 3600.0
            out.append((lead, float(haversine_km(p.lat, p.lon, la, lo))))
    if not out:
        raise ValueError("track and reference share no timestamps")
    return out


def write_track_csv(path, storm_id: str, trk: Track, reference=None):
    """Track CSV: storm_id, lead_hour, lat, lon, mslp, distance_km (blank
    without a reference)."""
    dist = dict(track_mae(trk, reference)) if reference else {}
    t0 = trk.points[0].time if trk.points else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["storm_id", "lead_hour", "lat", "lon", "mslp", "distance_km"])
        for p in trk.points:
            lead = (p.time - t0).total_seconds() / 3600.0
            d = dist.get(lead, "")
            w.writerow([storm_id, lead, repr(p.lat), repr(p.lon), repr(p.mslp_min),
                        repr(d) if d != "" else ""])


def read_reference_csv(path):
    """Reference track CSV with header time,lat,lon (ISO-8601 times)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                (dt.datetime.fromisoformat(row["time"]), float(row["lat"]), float(row["lon"]))
            )
    return out
