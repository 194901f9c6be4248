"""Run configuration: one nested JSON document covering every config type.

Sections map onto the config dataclasses (``siren``, ``mnif``, ``meta``,
``autodec``, ``diffusion``) plus ``data`` and ``run``. Unknown sections or
keys are rejected with an error naming the dotted key. ``SYMBOLS`` maps the
conventional short hyperparameter names onto their dotted keys.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import DiffusionConfig
from .mixture import MnifConfig
from .siren import SirenConfig
from .trainers import AutoDecodeConfig, MetaTrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class SirenSection:
    hidden_width: int = 32
    hidden_depth: int = 2
    w0: float = 30.0
    w0_on_input: bool = True


@dataclass(frozen=True)
class MnifSection:
    num_mixtures: int = 16
    latent_dim: int = 32
    coefficient_mode: str = "latent_projected"
    mix_output_layer: bool = True
    projection_scale: float | None = None
    basis_init: str = "matched"


@dataclass(frozen=True)
class DataSection:
    synth: str | None = None
    path: str | None = None
    count: int = 64
    size: int = 16
    resolution: int = 16
    points_per_step: int = 4096
    views: int = 8
    views_per_step: int = 4
    pixels_per_view: int = 64
    samples_per_ray: int = 32


@dataclass(frozen=True)
class RunSection:
    method: str = "meta"
    domain: str = "image"
    seed: int = 0
    threads: int = 1


SECTIONS = {
    "siren": SirenSection,
    "mnif": MnifSection,
    "meta": MetaTrainConfig,
    "autodec": AutoDecodeConfig,
    "diffusion": DiffusionConfig,
    "data": DataSection,
    "run": RunSection,
}

SYMBOLS = {
    "L": "siren.hidden_depth",
    "W": "siren.hidden_width",
    "w0": "siren.w0",
    "M": "mnif.num_mixtures",
    "H": "mnif.latent_dim",
    "N_inner": "meta.inner_steps",
    "eps_latent": "meta.inner_lr",
    "eps_shared": "meta.outer_lr",
    "sigma": "meta.latent_init_std",
    "T": "diffusion.timesteps",
    "schedule": "diffusion.schedule",
}

DOMAIN_IO = {"image": (2, 3, "linear"), "voxel": (3, 1, "linear"), "nerf": (3, 4, "rgb_density")}


@dataclass(frozen=True)
class RunConfig:
    siren: SirenSection = field(default_factory=SirenSection)
    mnif: MnifSection = field(default_factory=MnifSection)
    meta: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    autodec: AutoDecodeConfig = field(default_factory=AutoDecodeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def mnif_config(self) -> MnifConfig:
        if self.run.domain not in DOMAIN_IO:
            raise ConfigError("run.domain", f"must be one of {sorted(DOMAIN_IO)}")
        d, k, act = DOMAIN_IO[self.run.domain]
        s = self.siren
        siren = SirenConfig(d, k, s.hidden_width, s.hidden_depth, s.w0, act, s.w0_on_input)
        return MnifConfig(siren, **dataclasses.asdict(self.mnif))


def field_types(section_cls) -> dict[str, type]:
    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(section_cls)}


def _base_type(tp):
    """Strip ``X | None``; returns (base, optional)."""
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def coerce(key: str, value, tp):
    base, optional = _base_type(tp)
    if value is None or (isinstance(value, str) and optional and value.lower() in ("none", "null")):
        if optional:
            return None
        raise ConfigError(key, "may not be null")
    try:
        if base is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("1", "true", "yes", "on", "0", "false", "no", "off"):
                return value.lower() in ("1", "true", "yes", "on")
            raise ValueError(f"not a boolean: {value!r}")
        if base is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if base is float:
            if isinstance(value, bool):
                raise ValueError(f"not a number: {value!r}")
            return float(value)
        if base is str:
            if not isinstance(value, str):
                raise ValueError(f"not a string: {value!r}")
            return value
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None
    raise ConfigError(key, f"unsupported field type {tp}")


def _build_section(name: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(name, "section must be an object")
    types_ = field_types(cls)
    kwargs = {}
    for key, value in values.items():
        if key not in types_:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kwargs[key] = coerce(f"{name}.{key}", value, types_[key])
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from None


def from_dict(doc: dict, overrides: dict | None = None) -> RunConfig:
    """Validate ``doc`` (optionally patched by dotted-key ``overrides``) into a RunConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config document must be an object")
    merged = {name: dict(doc.get(name) or {}) for name in SECTIONS}
    for name in doc:
        if name not in SECTIONS:
            raise ConfigError(name, "unknown section")
    for dotted, value in (overrides or {}).items():
        dotted = SYMBOLS.get(dotted, dotted)
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(dotted, "unknown key")
        merged[section][key] = value
    cfg = RunConfig(**{name: _build_section(name, cls, merged[name]) for name, cls in SECTIONS.items()})
    cfg.mnif_config()
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return from_dict(doc, overrides)
