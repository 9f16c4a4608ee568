"""Checkpoint archives: zip files holding a parameter manifest, raw
little-endian float buffers, a config snapshot, and (for resumable training
checkpoints) optimizer moments, EMA shadow parameters, and RNG state.
Reload is bit-exact."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..grid import GridSpec, NormStats, VariableRegistry
from .model import ModelConfig, VelocityModel

FORMAT_TAG = "flowcast-checkpoint-v1"
_ZIP_DATE = (2000, 1, 1, 0, 0, 0)  # fixed so identical content gives identical bytes


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    zf.writestr(info, data)


def _dump_group(zf, group: str, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    entries = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str})
        _write_entry(zf, f"{group}/{name}.bin", arr.astype(dtype, copy=False).tobytes())
    manifest[group] = entries


def _load_group(zf, group: str, manifest: dict) -> dict[str, np.ndarray]:
    arrays = {}
    for entry in manifest.get(group, []):
        raw = zf.read(f"{group}/{entry['name']}.bin")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays


@dataclass
class Checkpoint:
    config: ModelConfig
    grid: GridSpec
    registry: VariableRegistry
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    opt: dict | None = None
    rng_state: dict | None = None
    norm_stats: NormStats | None = None
    meta: dict | None = None

    def build_model(self) -> VelocityModel:
        return VelocityModel(self.config, self.grid, self.registry)


def save_checkpoint(
    path,
    *,
    config: ModelConfig,
    grid: GridSpec,
    registry: VariableRegistry,
    params: dict[str, np.ndarray],
    ema: dict[str, np.ndarray] | None = None,
    opt: dict | None = None,
    rng_state: dict | None = None,
    norm_stats: NormStats | None = None,
    meta: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format": FORMAT_TAG}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        _dump_group(zf, "params", params, manifest)
        if ema is not None:
            _dump_group(zf, "ema", ema, manifest)
        if opt is not None:
            _dump_group(zf, "opt_m", opt["m"], manifest)
            _dump_group(zf, "opt_v", opt["v"], manifest)
            manifest["opt_step"] = int(opt["step"])
        if rng_state is not None:
            manifest["rng_state"] = rng_state
        snapshot = {
            "model": dataclasses.asdict(config),
            "grid": {
                "latitudes": grid.latitudes.tolist(),
                "longitudes": grid.longitudes.tolist(),
            },
            "registry": dataclasses.asdict(registry),
            "norm_stats": None
            if norm_stats is None
            else {"mean": norm_stats.mean.tolist(), "std": norm_stats.std.tolist()},
            "meta": meta or {},
        }
        _write_entry(zf, "config.json", json.dumps(snapshot, indent=1, sort_keys=True).encode())
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
        snapshot = json.loads(zf.read("config.json"))
        params = _load_group(zf, "params", manifest)
        ema = _load_group(zf, "ema", manifest) or None
        opt = None
        if "opt_step" in manifest:
            opt = {
                "step": manifest["opt_step"],
                "m": _load_group(zf, "opt_m", manifest),
                "v": _load_group(zf, "opt_v", manifest),
            }
    cfg_kw = dict(snapshot["model"])
    for key in ("depths", "pressure_patch", "surface_patch", "window"):
        cfg_kw[key] = tuple(cfg_kw[key])
    config = ModelConfig(**cfg_kw)
    grid = GridSpec(
        np.array(snapshot["grid"]["latitudes"]), np.array(snapshot["grid"]["longitudes"])
    )
    reg_kw = dict(snapshot["registry"])
    for key in ("surface_vars", "pressure_vars", "levels", "static_vars", "clock_vars"):
        reg_kw[key] = tuple(reg_kw[key])
    registry = VariableRegistry(**reg_kw)
    ns = snapshot.get("norm_stats")
    norm_stats = None if ns is None else NormStats(np.array(ns["mean"]), np.array(ns["std"]))
    return Checkpoint(
        config=config,
        grid=grid,
        registry=registry,
        params=params,
        ema=ema,
        opt=opt,
        rng_state=manifest.get("rng_state"),
        norm_stats=norm_stats,
        meta=snapshot.get("meta") or {},
    )


def checkpoint_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
