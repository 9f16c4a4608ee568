"""Flat ``key = value`` configuration files and per-run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


class Config:
    """Typed access to a flat key = value file ('#' starts a comment)."""

    def __init__(self, values: dict[str, str], source: str = "<memory>"):
        self.values = values
        self.source = source

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values: dict[str, str] = {}
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return cls(values, str(path))

    def _get(self, key, default, convert, kind):
        if key not in self.values:
            if default is not None or key in self.values:
                return default
            raise ConfigError(f"{self.source}: missing required key {key!r}")
        try:
            return convert(self.values[key])
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"{self.source}: key {key!r} is not a valid {kind}") from exc

    def str(self, key, default=None):
        return self._get(key, default, lambda s: s, "string")

    def int(self, key, default=None):
        return self._get(key, default, int, "integer")

    def float(self, key, default=None):
        return self._get(key, default, float, "float")

    def bool(self, key, default=None):
        def conv(s):
            s = s.lower()
            if s in ("true", "1", "yes"):
                return True
            if s in ("false", "0", "no"):
                return False
            raise ConfigError(f"{self.source}: key {key!r} is not a boolean")

        return self._get(key, default, conv, "boolean")

    def ints(self, key, default=None):
        return self._get(key, default, lambda s: tuple(int(v) for v in s.split(",")), "int list")

    def floats(self, key, default=None):
        return self._get(
            key, default, lambda s: tuple(float(v) for v in s.split(",")), "float list"
        )


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str]
    code_version: str
    wall_time_s: float


def write_run_manifest(out_dir, manifest: RunManifest) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(dataclasses.asdict(manifest), indent=1, sort_keys=True) + "\n")
    return path


class RunTimer:
    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self._t0
        return False
