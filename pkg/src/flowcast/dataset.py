"""On-disk dataset format: a manifest plus raw float32 state files.

A dataset directory holds ``manifest.txt`` (key = value lines describing the
grid, the variable table, optional normalization stats, and free-form
``meta.*`` entries), one ``<timestamp>.f32`` file per timestep containing the
little-endian float32 state in C x H x W order, and optionally
``static.f32`` with the static conditioning fields. Rereads are bit-exact.
"""

from __future__ import annotations

import datetime as dt
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .grid import GridSpec, NormStats, StateField, VariableRegistry

MANIFEST_NAME = "manifest.txt"
STATE_SUFFIX = ".f32"
STATIC_NAME = "static.f32"
FORMAT_TAG = "flowcast-dataset-v1"
TIME_FORMAT = "%Y%m%dT%H%M%SZ"


def format_timestamp(when: dt.datetime) -> str:
    return when.strftime(TIME_FORMAT)


def parse_timestamp(text: str) -> dt.datetime:
    return dt.datetime.strptime(text, TIME_FORMAT)


def _fmt_floats(arr) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(arr).ravel())


def _parse_floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")]) if text else np.array([])


def _fmt_names(names) -> str:
    return ",".join(names)


def _parse_names(text: str) -> tuple[str, ...]:
    return tuple(n for n in text.split(",") if n)


@dataclass
class Dataset:
    """Handle to a dataset directory; states are loaded lazily per timestamp."""

    path: Path
    grid: GridSpec
    registry: VariableRegistry
    timestamps: tuple[dt.datetime, ...]
    normalized: bool = False
    stats: NormStats | None = None
    meta: dict[str, str] | None = None

    @property
    def n_times(self) -> int:
        return len(self.timestamps)

    def state_path(self, when: dt.datetime) -> Path:
        return self.path / (format_timestamp(when) + STATE_SUFFIX)

    def load(self, when: dt.datetime) -> StateField:
        shape = (self.registry.n_channels, self.grid.n_lat, self.grid.n_lon)
        raw = np.fromfile(self.state_path(when), dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise ValueError(f"state file for {when} has {raw.size} values, want {shape}")
        return StateField(raw.reshape(shape), when, normalized=self.normalized)

    def iter_states(self):
        for when in self.timestamps:
            yield self.load(when)

    def load_statics(self) -> dict[str, np.ndarray]:
        names = self.registry.static_vars
        fp = self.path / STATIC_NAME
        if not names or not fp.exists():
            return {}
        raw = np.fromfile(fp, dtype="<f4")
        shape = (len(names), self.grid.n_lat, self.grid.n_lon)
        if raw.size != int(np.prod(shape)):
            raise ValueError(f"static file has {raw.size} values, want {shape}")
        cube = raw.reshape(shape)
        return {name: cube[i] for i, name in enumerate(names)}

    def subset_hours(self, hours) -> "Dataset":
        """View restricted to timestamps whose UTC hour is in `hours`.

        Shares the underlying files; nothing is copied.
        """
        hours = set(hours)
        kept = tuple(ts for ts in self.timestamps if ts.hour in hours)
        return replace(self, timestamps=kept)


def write_manifest(
    path: Path,
    grid: GridSpec,
    registry: VariableRegistry,
    n_times: int,
    normalized: bool,
    stats: NormStats | None,
    meta: dict[str, str] | None,
) -> None:
    lines = [
        f"format = {FORMAT_TAG}",
        f"n_lat = {grid.n_lat}",
        f"n_lon = {grid.n_lon}",
        f"latitudes = {_fmt_floats(grid.latitudes)}",
        f"longitudes = {_fmt_floats(grid.longitudes)}",
        f"surface_vars = {_fmt_names(registry.surface_vars)}",
        f"pressure_vars = {_fmt_names(registry.pressure_vars)}",
        f"levels = {_fmt_floats(registry.levels)}",
        f"static_vars = {_fmt_names(registry.static_vars)}",
        f"clock_vars = {_fmt_names(registry.clock_vars)}",
        f"normalized = {'true' if normalized else 'false'}",
        f"n_times = {n_times}",
    ]
    if stats is not None:
        lines.append(f"norm_mean = {_fmt_floats(stats.mean)}")
        lines.append(f"norm_std = {_fmt_floats(stats.std)}")
    for key in sorted(meta or {}):
        value = str((meta or {})[key]).replace("\n", " ")
        lines.append(f"meta.{key} = {value}")
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


class DatasetWriter:
    """Writes states one at a time, then finalizes the manifest on close."""

    def __init__(
        self,
        path,
        grid: GridSpec,
        registry: VariableRegistry,
        normalized: bool = False,
        stats: NormStats | None = None,
        statics: dict[str, np.ndarray] | None = None,
        meta: dict[str, str] | None = None,
    ):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.grid = grid
        self.registry = registry
        self.normalized = normalized
        self.stats = stats
        self.meta = dict(meta or {})
        self.timestamps: list[dt.datetime] = []
        if statics:
            missing = [n for n in registry.static_vars if n not in statics]
            if missing:
                raise ValueError(f"static fields missing for {missing}")
            cube = np.stack([np.asarray(statics[n], dtype="<f4") for n in registry.static_vars])
            cube.astype("<f4").tofile(self.path / STATIC_NAME)

    def add(self, state: StateField) -> None:
        state.validate(self.grid, self.registry)
        if state.normalized != self.normalized:
            raise ValueError("state normalization flag does not match dataset")
        fp = self.path / (format_timestamp(state.timestamp) + STATE_SUFFIX)
        np.ascontiguousarray(state.values, dtype="<f4").tofile(fp)
        self.timestamps.append(state.timestamp)

    def close(self) -> Dataset:
        write_manifest(
            self.path, self.grid, self.registry, len(self.timestamps),
            self.normalized, self.stats, self.meta,
        )
        return open_dataset(self.path)


def write_dataset(path, grid, registry, states, **kwargs) -> Dataset:
    writer = DatasetWriter(path, grid, registry, **kwargs)
    for state in states:
        writer.add(state)
    return writer.close()


def open_dataset(path) -> Dataset:
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {path}")
    kv: dict[str, str] = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" = ")
        kv[key] = value
    if kv.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported dataset format {kv.get('format')!r}")
    grid = GridSpec(_parse_floats(kv["latitudes"]), _parse_floats(kv["longitudes"]))
    registry = VariableRegistry(
        surface_vars=_parse_names(kv.get("surface_vars", "")),
        pressure_vars=_parse_names(kv.get("pressure_vars", "")),
        levels=tuple(_parse_floats(kv.get("levels", ""))),
        static_vars=_parse_names(kv.get("static_vars", "")),
        clock_vars=_parse_names(kv.get("clock_vars", "")),
    )
    stats = None
    if "norm_mean" in kv:
        stats = NormStats(_parse_floats(kv["norm_mean"]), _parse_floats(kv["norm_std"]))
    meta = {k[len("meta."):]: v for k, v in kv.items() if k.startswith("meta.")}
    stems = sorted(
        fp.stem for fp in path.iterdir()
        if fp.suffix == STATE_SUFFIX and fp.name != STATIC_NAME
    )
    timestamps = tuple(parse_timestamp(s) for s in stems)
    expected = int(kv.get("n_times", len(timestamps)))
    if expected != len(timestamps):
        raise ValueError(
            f"manifest says {expected} timesteps but {len(timestamps)} state files found"
        )
    return Dataset(
        path=path,
        grid=grid,
        registry=registry,
        timestamps=timestamps,
        normalized=kv.get("normalized", "false") == "true",
        stats=stats,
        meta=meta,
    )
