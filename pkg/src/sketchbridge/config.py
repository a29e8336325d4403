"""Flat TOML training configs and per-run provenance manifests."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from .errors import BadConfig, ParseError, UnknownKey
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MANIFEST_NAME = "run_manifest.json"


def config_from_dict(data: dict) -> TrainConfig:
    """Fill absent keys with defaults; reject unknown keys and wrong types."""
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise UnknownKey(f"unknown config key(s): {', '.join(unknown)}")
    defaults = TrainConfig()
    values = {}
    for key, value in data.items():
        want = type(getattr(defaults, key))
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif want is tuple and isinstance(value, list):
            value = tuple(value)
        if not isinstance(value, want) or (want is int and isinstance(value, bool)):
            raise BadConfig(f"{key} must be {want.__name__}, got {value!r}")
        values[key] = value
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return config_from_dict(data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def dump_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    lines = [f"{k} = {_toml_value(v)}" for k, v in cfg.as_dict().items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dir_digest(path, pattern="*.png") -> str:
    """Hash of (relative name, content digest) over matching files, in name order."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(root.rglob(pattern)):
        h.update(str(p.relative_to(root)).encode())
        h.update(file_digest(p).encode())
    return h.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict
    data_hashes: dict
    operator_fingerprint: str | None
    seed: int
    code_version: str = field(default_factory=code_version)
    started_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def identity(self) -> dict:
        """Everything that determines the run's outputs (timestamps excluded)."""
        return {"command": self.command, "config": self.config,
                "data_hashes": self.data_hashes,
                "operator_fingerprint": self.operator_fingerprint,
                "seed": self.seed, "code_version": self.code_version}

    def to_dict(self) -> dict:
        return {**self.identity(), "started_at": self.started_at}

    def write(self, directory) -> Path:
        """Write next to the run's outputs; an existing manifest is never overwritten."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        n = 1
        while path.exists():
            path = directory / f"run_manifest_{n}.json"
            n += 1
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
