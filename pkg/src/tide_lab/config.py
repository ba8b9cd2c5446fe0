"""INI experiment configuration with strict schema validation."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig, TideConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class CorpusConfig:
    exponent: float = 1.5
    length: int = 2_000_000
    successor_prob: float = 0.5
    bin_count: int = 10
    val_fraction: float = 0.05
    stream: str = ""  # existing token stream to ingest instead of sampling

    def __post_init__(self):
        if self.exponent <= 0 or self.length < 2 or self.bin_count < 1:
            raise ConfigError("corpus needs exponent > 0, length >= 2, bin_count >= 1")
        if not 0 <= self.successor_prob <= 1 or not 0 < self.val_fraction < 1:
            raise ConfigError("successor_prob must lie in [0, 1] and val_fraction in (0, 1)")


@dataclass(frozen=True)
class DiagnosticsConfig:
    eval_seq_len: int = 32
    audit_steps: int = 200
    audit_batch: int = 4
    audit_seq_len: int = 32
    audit_update: bool = True
    kpath_steps: int = 200
    n_templates: int = 150
    template_len: int = 16
    delta_tol: float = 1e-6
    collapse_pairs: int = 4
    knn_k: int = 10
    knn_queries: int = 20
    suppression_eps: float = 1e-3
    compress_percents: str = "0,30,60,90"
    compress_bits: str = "16,8,4"

    def __post_init__(self):
        for name in ("eval_seq_len", "audit_batch", "audit_seq_len", "n_templates", "template_len", "knn_k", "knn_queries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"diagnostics.{name} must be >= 1")
        if self.audit_steps < 0 or self.kpath_steps < 0:
            raise ConfigError("step counts must be >= 0")

    def percents(self) -> list[float]:
        return parse_list(self.compress_percents, float, "diagnostics.compress_percents")

    def bits(self) -> list[int]:
        return parse_list(self.compress_bits, int, "diagnostics.compress_bits")


def parse_list(text: str, kind, key: str) -> list:
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    arch: str = "tide"

    def __post_init__(self):
        if self.arch not in ("base", "tide"):
            raise ConfigError(f"run.arch must be 'base' or 'tide', got {self.arch!r}")


SECTIONS = {
    "run": RunConfig,
    "model": ModelConfig,
    "tide": TideConfig,
    "train": TrainConfig,
    "corpus": CorpusConfig,
    "diagnostics": DiagnosticsConfig,
}
# keys whose type cannot be read off the default value
OPTIONAL_INT = {("tide", "d_block")}
# the run seed drives every RNG; a per-section seed would only shadow it
HIDDEN = {("train", "seed")}


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    tide: TideConfig = field(default_factory=lambda: TideConfig(n_blocks=4))
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def __post_init__(self):
        if self.train.seed != self.run.seed:
            self.train = dataclasses.replace(self.train, seed=self.run.seed)
        self.tide.validate(self.model)

    @property
    def seed(self) -> int:
        return self.run.seed

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        kw = {name: getattr(self, name) for name in SECTIONS}
        kw[section] = dataclasses.replace(kw[section], **changes)
        return ExperimentConfig(**kw)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            obj = getattr(self, name)
            cp[name] = {
                f.name: _fmt(getattr(obj, f.name))
                for f in dataclasses.fields(obj)
                if (name, f.name) not in HIDDEN
            }
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_ini())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(section: str, key: str, raw: str, default):
    path = f"{section}.{key}"
    raw = raw.strip()
    try:
        if (section, key) in OPTIONAL_INT:
            return int(raw) if raw else None
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse INI text; unknown sections or keys are rejected by path."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    kw = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
    for name, cls in SECTIONS.items():
        defaults = getattr(ExperimentConfig(), name)
        known = {f.name for f in dataclasses.fields(cls)} - {k for s, k in HIDDEN if s == name}
        values = {}
        if cp.has_section(name):
            for key, raw in cp[name].items():
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {name}.{key}")
                values[key] = _convert(name, key, raw, getattr(defaults, key))
        try:
            kw[name] = dataclasses.replace(defaults, **values)
        except ConfigError as e:
            raise ConfigError(f"{source}: [{name}] {e}") from None
    try:
        return ExperimentConfig(**kw)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, str(path))
