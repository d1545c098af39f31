"""Run configuration: INI text with one section per component.

Every field of every section is written on serialization, so a config file
plus its seed reproduces a run.  Values are typed by the field's default:
ints, floats (written with ``repr`` so they round-trip), booleans
(``true``/``false``), comma-separated integer tuples and plain strings.

Environment overrides, applied by :func:`apply_env`: ``SDQ_OUTPUT_DIR``
replaces ``run.output_dir`` and ``SDQ_SEED`` replaces ``run.seed``.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field

from .data import DatasetSpec
from .gradcore import ContractError
from .phase1 import GRANULARITIES, Phase1Config
from .phase2 import Phase2Config
from .training import FpConfig


class ConfigError(ContractError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 7
    model: str = "mlp:2-32-32-32-4"
    granularity: str = "layer"
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")


@dataclass(frozen=True)
class GumbelSection:
    """Gumbel settings; the sampler's seed is taken from ``run.seed``."""
    tau: float = 1.0
    hard: bool = True
    per_sample: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"gumbel tau must be positive, got {self.tau}")


SECTIONS = {
    "run": RunSection,
    "data": DatasetSpec,
    "fp": FpConfig,
    "phase1": Phase1Config,
    "gumbel": GumbelSection,
    "phase2": Phase2Config,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    fp: FpConfig = field(default_factory=FpConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    gumbel: GumbelSection = field(default_factory=GumbelSection)
    phase2: Phase2Config = field(default_factory=Phase2Config)

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section),
                                                                         **changes)})


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return text


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name))
                        for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {' '.join(str(exc).split())}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        values = {}
        if parser.has_section(name):
            known = {f.name for f in dataclasses.fields(cls)}
            extra = set(parser[name]) - known
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
            for key, raw in parser[name].items():
                values[key] = _parse(raw, getattr(defaults, key), f"[{name}] {key}")
        try:
            parts[name] = cls(**values)
        except ContractError as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    return RunConfig(**parts)


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def save(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(cfg))


def apply_env(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    changes = {}
    if environ.get("SDQ_OUTPUT_DIR"):
        changes["output_dir"] = environ["SDQ_OUTPUT_DIR"]
    if environ.get("SDQ_SEED"):
        changes["seed"] = _parse(environ["SDQ_SEED"], 0, "SDQ_SEED")
    return cfg.replace("run", **changes) if changes else cfg
