"""Run configuration files.

A run config is one JSON document with the sections ``dataset``,
``geometry``, ``train``, ``ensemble``, ``eval`` and ``paths``. Every section
is optional; unknown keys anywhere are rejected. ``RunConfig.to_dict`` gives
the fully-populated config so it can be echoed back and hashed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data_sim import DatasetConfig, ScanGeometry
from .errors import ConfigError, InvalidArgument
from .train import TrainConfig

_STD_DIVISORS = {"N": 0, "N-1": 1}


@dataclass
class EnsembleSettings:
    checkpoint_epochs: list = field(default_factory=lambda: [2, 4, 6, 8, 10])
    std_divisor: str = "N"


@dataclass
class EvalSettings:
    model_tag: str = "UNet"
    exclude_metal: bool = True
    data_range: float = 1.0


@dataclass
class PathSettings:
    data_dir: str = "data"
    runs_dir: str = "runs"
    eval_dir: str = "eval"


@dataclass
class RunConfig:
    dataset: DatasetConfig
    train: TrainConfig
    ensemble: EnsembleSettings
    eval: EvalSettings
    paths: PathSettings

    def to_dict(self):
        d = self.dataset.to_dict()
        geometry = d.pop("geometry")
        train = self.train.to_dict()
        for key in ("checkpoint_epochs", "std_ddof"):
            train.pop(key)
        return {
            "dataset": d,
            "geometry": geometry,
            "train": train,
            "ensemble": asdict(self.ensemble),
            "eval": asdict(self.eval),
            "paths": asdict(self.paths),
        }

    def training_hash(self, arm):
        """Hash of everything that determines a training run's outputs."""
        d = self.to_dict()
        key = {k: d[k] for k in ("dataset", "geometry", "train", "ensemble")}
        key["arm"] = arm
        blob = json.dumps(key, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = ("dataset", "geometry", "train", "ensemble", "eval", "paths")


def _section(raw, name, allowed):
    body = raw.get(name, {})
    if not isinstance(body, dict):
        raise ConfigError(f"section '{name}' must be an object")
    unknown = sorted(set(body) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key '{name}.{unknown[0]}'")
    return dict(body)


def _names(cls, exclude=()):
    return {f.name for f in fields(cls)} - set(exclude)


def parse_config(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    dataset = _section(raw, "dataset", _names(DatasetConfig, exclude=("geometry",)))
    geometry = _section(raw, "geometry", _names(ScanGeometry))
    train = _section(raw, "train", _names(TrainConfig, exclude=("checkpoint_epochs", "std_ddof")))
    ensemble = _section(raw, "ensemble", _names(EnsembleSettings))
    evals = _section(raw, "eval", _names(EvalSettings))
    paths = _section(raw, "paths", _names(PathSettings))

    try:
        if "beam_hardening_coeffs" in geometry:
            geometry["beam_hardening_coeffs"] = tuple(geometry["beam_hardening_coeffs"])
        if geometry.get("photon_count") in ("inf", "Infinity"):
            geometry["photon_count"] = float("inf")
        geom = ScanGeometry(**geometry)
        ds = DatasetConfig(geometry=geom, **dataset)
        ens = EnsembleSettings(**ensemble)
        if ens.std_divisor not in _STD_DIVISORS:
            raise ConfigError(f"ensemble.std_divisor must be one of {sorted(_STD_DIVISORS)}")
        train.setdefault("grid_size", ds.grid_size)
        tc = TrainConfig(checkpoint_epochs=tuple(ens.checkpoint_epochs), std_ddof=_STD_DIVISORS[ens.std_divisor], **train)
        tc.architecture.validate()
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(f"bad value: {exc}") from exc
    if tc.grid_size != ds.grid_size:
        raise ConfigError(f"train.grid_size {tc.grid_size} != dataset.grid_size {ds.grid_size}")
    return RunConfig(dataset=ds, train=tc, ensemble=ens, eval=EvalSettings(**evals), paths=PathSettings(**paths))


def load_config(path):
    if path is None:
        return parse_config({})
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return parse_config(raw)
