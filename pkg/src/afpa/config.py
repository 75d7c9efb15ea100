"""Run configuration: defaults, TOML loading, flag overrides, content hash.

One flat config object covers every stage (feature extraction, attention,
classifier, training, synthetic corpus). Every field has a default; a TOML
file provides section tables ([dsp], [attention], [model], [train],
[corpus]) and CLI flags override individual fields. The canonical JSON dump
is hashed and recorded into checkpoints and reports so outputs can be tied
back to the exact settings that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    clip_seconds: float = 10.0
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 128
    n_frames: int = 312
    f_min: float = 0.0
    f_max: float | None = None  # None = Nyquist


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 6
    qk_init_scale: float = 0.05
    init_noise: float = 0.02


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (32, 64, 64, 128, 128)
    block_strides: tuple[int, ...] = (2, 2, 2, 1)
    embed_dim: int = 128
    margin: float = 1.0
    scale: float = 30.0


@dataclass(frozen=True)
class TrainSettings:
    lr_max: float = 1e-4
    lr_min: float = 0.0
    epochs: int = 30           # desk-scale default; 200 is the full-scale preset
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    use_afpa: bool = True
    dtype: str = "float32"     # float32 for speed; tests use float64
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train: epochs and batch_size must be >= 1")
        if not (self.lr_max > self.lr_min >= 0):
            raise ConfigError("train: need lr_max > lr_min >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"train: unknown dtype {self.dtype!r}")


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 40
    n_test_normal: int = 10
    n_test_anomalous: int = 10
    seed: int = 0
    defect_hz: float = 6000.0
    defect_rel_db: float = -10.0


@dataclass(frozen=True)
class RunConfig:
    dsp: DspConfig = field(default_factory=DspConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def describe(self) -> str:
        """Effective configuration, one line per setting."""
        lines = []
        for section, values in self.to_dict().items():
            for key, value in values.items():
                lines.append(f"{section}.{key} = {value!r}")
        return "\n".join(lines)


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}
_SECTION_TYPES = {
    "dsp": DspConfig,
    "attention": AttentionConfig,
    "model": ModelConfig,
    "train": TrainSettings,
    "corpus": CorpusConfig,
}


def _build_section(cls, table: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad [{section}] section: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    sections = {}
    for name, table in data.items():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(table, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        cls = _SECTION_TYPES[name]
        if name == "model":
            table = dict(table)
            for key in ("channels", "block_strides"):
                if key in table:
                    table[key] = tuple(table[key])
        sections[name] = _build_section(cls, table, name)
    return RunConfig(**sections)


def load_config(path=None) -> RunConfig:
    """Defaults, optionally updated from a TOML file."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: not valid TOML: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(config: RunConfig, *, seed: int | None = None,
                    epochs: int | None = None, use_afpa: bool | None = None) -> RunConfig:
    """Apply CLI flag overrides; --seed steers both corpus synthesis and training."""
    train = config.train
    corpus = config.corpus
    if seed is not None:
        train = replace(train, seed=seed)
        corpus = replace(corpus, seed=seed)
    if epochs is not None:
        if epochs < 1:
            raise ConfigError(f"--epochs must be >= 1, got {epochs}")
        train = replace(train, epochs=epochs)
    if use_afpa is not None:
        train = replace(train, use_afpa=use_afpa)
    return replace(config, train=train, corpus=corpus)
