"""Experiment configuration: nested dataclasses, YAML in, YAML out.

A config file is a YAML mapping whose top-level keys mirror
:class:`ExperimentConfig` (``seed``, ``method``, ``net``, ``weights``,
``schedule``, ``geom``, ``centers``, ...). Nested sections are mappings of
field name to value; ``centers`` is a list of center mappings with an
``intensity`` sub-mapping. Missing keys keep their defaults; unknown keys are
rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossWeights
from .nets import NetConfig
from .swarm import METHODS, TrainSchedule
from .synthdata import CenterSpec, GeomConfig, Intensity, default_centers


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    method: str = "ours"
    net: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    geom: GeomConfig = field(default_factory=GeomConfig)
    centers: list[CenterSpec] = field(default_factory=default_centers)
    n_generic: int = 24
    eval_samples: int = 4
    eval_latent: str = "sample"
    out_dir: str = "runs"
    jobs: int = 1
    log_messages: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method {self.method!r} not in {METHODS}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if (self.net.height, self.net.width) != (self.geom.height, self.geom.width):
            raise ConfigError("net and geom image sizes differ")
        if self.eval_samples < 1 or self.eval_latent not in ("sample", "mean"):
            raise ConfigError("eval_samples >= 1 and eval_latent in {sample, mean} required")
        if self.jobs < 1 or self.n_generic < 1:
            raise ConfigError("jobs and n_generic must be >= 1")
        ids = [c.center_id for c in self.centers]
        if not ids or len(set(ids)) != len(ids):
            raise ConfigError(f"center ids must be unique and non-empty, got {ids}")
        for c in self.centers:
            try:
                c.validate(self.geom.height, self.geom.width)
            except ValueError as err:
                raise ConfigError(str(err)) from None
        return self


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def _center(raw, i: int) -> CenterSpec:
    if not isinstance(raw, dict):
        raise ConfigError(f"centers[{i}]: expected a mapping")
    raw = dict(raw)
    raw["intensity"] = _build(Intensity, raw.get("intensity"), f"centers[{i}].intensity")
    return _build(CenterSpec, raw, f"centers[{i}]")


_SECTIONS = {"net": NetConfig, "weights": LossWeights, "schedule": TrainSchedule, "geom": GeomConfig}


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    kwargs = {}
    for key, cls in _SECTIONS.items():
        if key in raw:
            kwargs[key] = _build(cls, raw.pop(key), key)
    if "centers" in raw:
        kwargs["centers"] = [_center(c, i) for i, c in enumerate(raw.pop("centers") or [])]
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs.update(raw)
    try:
        return ExperimentConfig(**kwargs).validate()
    except TypeError as err:
        raise ConfigError(str(err)) from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return plain(cfg)


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from None
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
