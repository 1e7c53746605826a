"""Experiment configuration: defaults, presets, TOML round-trip and validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .datasets import SyntheticSpec
from .diffrank import SoftRankConfig

PAPER_SEEDS = (16, 22, 41, 56, 67, 77, 14, 78, 99, 23, 82, 40, 51, 37, 62)
SWEEP_VOCAB = (3, 5, 10, 20, 40, 50, 100)
SWEEP_MAX_LEN = (2, 3, 5, 10, 50, 100)
LOSSES = ("ce", "ce_rsa")
REWARDS = ("ce", "accuracy")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    loss: str = "ce"
    vocab_size: int = 10
    max_len: int = 5
    speaker_hidden: int = 64
    listener_hidden: int = 64
    embed_dim: int = 50
    temperature: float = 0.1
    speaker_lr: float = 0.01
    listener_lr: float = 0.001
    batch_size: int = 32
    epochs: int = 30
    entropy_coef: float = 0.1
    reward: str = "ce"
    n_candidates: int = 2
    reembed: bool = False
    softrank_strength: float = 0.1
    softrank_standardize: bool = True
    # data
    embeddings_path: str = ""
    labels_path: str = ""
    n_attributes: int = 4
    n_values: int = 4
    items_per_category: int = 300
    input_dim: int = 64
    input_noise: float = 0.05
    projection_seed: int = 0
    n_noise_pairs: int = 200
    n_fixed_pairs: int = 200
    fixed_pairs_both_directions: bool = True
    topsim_metric: str = "cosine"
    # bookkeeping
    seeds: list[int] = field(default_factory=lambda: list(PAPER_SEEDS[:5]))
    out: str = "runs"
    workers: int = 1
    checkpoints: bool = True

    def validate(self) -> "ExperimentConfig":
        self._check_types()
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.reward not in REWARDS:
            raise ConfigError(f"reward must be one of {REWARDS}, got {self.reward!r}")
        if self.topsim_metric not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown topsim_metric {self.topsim_metric!r}")
        positive = ("vocab_size", "max_len", "speaker_hidden", "listener_hidden", "embed_dim",
                    "temperature", "batch_size", "softrank_strength", "input_dim",
                    "items_per_category", "workers")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("speaker_lr", "listener_lr", "entropy_coef", "epochs", "input_noise",
                     "n_noise_pairs", "n_fixed_pairs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2 (EOS plus one symbol)")
        if self.n_candidates < 2:
            raise ConfigError("n_candidates must be at least 2")
        if self.batch_size < 3:
            raise ConfigError("batch_size must be at least 3")
        if bool(self.embeddings_path) != bool(self.labels_path):
            raise ConfigError("embeddings_path and labels_path must be given together")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        try:
            self.synthetic_spec()
            self.softrank()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def _check_types(self) -> None:
        defaults = ExperimentConfig()
        for f in dataclasses.fields(self):
            value, expected = getattr(self, f.name), type(getattr(defaults, f.name))
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                setattr(self, f.name, float(value))
                continue
            if expected is list:
                ok = isinstance(value, (list, tuple)) and all(
                    isinstance(v, int) and not isinstance(v, bool) for v in value)
                if ok:
                    setattr(self, f.name, [int(v) for v in value])
            else:
                ok = isinstance(value, expected) and (expected is bool or not isinstance(value, bool))
            if not ok:
                raise ConfigError(f"{f.name} must be of type {expected.__name__}, got {value!r}")

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.n_attributes, self.n_values, self.items_per_category,
                             self.input_dim, self.input_noise, self.projection_seed)

    def softrank(self) -> SoftRankConfig:
        return SoftRankConfig(self.softrank_strength, self.softrank_standardize)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


def paper_params(config: ExperimentConfig | None = None) -> ExperimentConfig:
    """Full-scale preset: V=40, L=2, 768-unit perception layers, 15 seeds."""
    config = config or ExperimentConfig()
    return config.replace(vocab_size=40, max_len=2, speaker_hidden=768, listener_hidden=768,
                          embed_dim=50, temperature=0.1, speaker_lr=0.01, listener_lr=0.001,
                          batch_size=32, epochs=30, seeds=list(PAPER_SEEDS))


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(data)


def dump_config(config: ExperimentConfig) -> str:
    return tomli_w.dumps(config.to_dict())


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(config))
