"""Conditioning channels fed to the velocity network beside the state.

Eleven channels on the model grid, all in [0, 1]: land-sea mask, surface
geopotential, soil type, sine/cosine of latitude and longitude, sine/cosine
of the local time of day (per longitude column) and of the year progress.
Static fields are expected already scaled to [0, 1]; they are never touched
by the state normalization.
"""

from __future__ import annotations

import datetime as dt

import numpy as np

from .grid import GridSpec

COND_CHANNELS = 11
STATIC_ORDER = ("LAND_MASK", "SURFACE_Z", "SOIL_TYPE")


def _to01(x):
    return 0.5 * (1.0 + x)


def year_progress(when: dt.datetime) -> float:
    """Fraction of the calendar year elapsed at `when` (UTC), in [0, 1)."""
    start = dt.datetime(when.year, 1, 1)
    end = dt.datetime(when.year + 1, 1, 1)
    return (when - start).total_seconds() / (end - start).total_seconds()


def local_time_fraction(when: dt.datetime, lon_deg: np.ndarray) -> np.ndarray:
    """Local time of day as a fraction of 24 h, per longitude (15 deg/hour)."""
    utc_hours = when.hour + when.minute / 60.0 + when.second / 3600.0
    return np.mod((utc_hours + lon_deg / 15.0) / 24.0, 1.0)


class ConditioningProvider:
    """Builds the conditioning stack for any timestamp on a fixed grid.

    The seven time-independent channels are precomputed; only the four clock
    channels are rebuilt per call.
    """

    def __init__(self, grid: GridSpec, statics: dict[str, np.ndarray] | None = None):
        self.grid = grid
        H, W = grid.n_lat, grid.n_lon
        statics = statics or {}
        planes = []
        for name in STATIC_ORDER:
            arr = statics.get(name)
            if arr is None:
                arr = np.zeros((H, W))
            else:
                arr = np.asarray(arr, dtype=np.float64)
                if arr.shape != (H, W):
                    raise ValueError(f"static field {name} has shape {arr.shape}, want {(H, W)}")
                if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
                    raise ValueError(f"static field {name} must be scaled to [0, 1]")
            planes.append(arr)
        lat = np.deg2rad(grid.latitudes)[:, None] * np.ones((1, W))
        lon = np.deg2rad(grid.longitudes)[None, :] * np.ones((H, 1))
        planes.append(_to01(np.sin(lat)))
        planes.append(np.cos(lat))  # already in [0, 1] for lat in [-90, 90]
        planes.append(_to01(np.sin(lon)))
        planes.append(_to01(np.cos(lon)))
        self._static_part = np.stack(planes)  # (7, H, W)

    def __call__(self, when: dt.datetime) -> np.ndarray:
        H, W = self.grid.n_lat, self.grid.n_lon
        phase = 2.0 * np.pi * local_time_fraction(when, self.grid.longitudes)
        clock = np.empty((4, H, W))
        clock[0] = _to01(np.sin(phase))[None, :]
        clock[1] = _to01(np.cos(phase))[None, :]
        yp = 2.0 * np.pi * year_progress(when)
        clock[2] = _to01(np.sin(yp))
        clock[3] = _to01(np.cos(yp))
        return np.concatenate([self._static_part, clock], axis=0)
