"""Experiment configuration: nested dataclass schema, desk/full profiles.

The "full" profile carries the published architecture and training values;
the "desk" profile shrinks widths, codebooks, and schedules so the whole
pipeline trains in minutes on one CPU core. Unknown keys are rejected so a
typo in a config file cannot silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

PART_NAMES = ("upper", "hands", "lower", "face")
BODY_PARTS = ("upper", "hands", "lower")
CATEGORY_NAMES = ("nogesture", "beat", "deictic", "iconic", "metaphoric")

SEED_ENV_VAR = "GESTTOKEN_SEED"


class ConfigError(Exception):
    """Raised for schema violations: unknown keys, bad types, bad values."""


@dataclass
class CorpusConfig:
    speakers: int = 8
    sequences: int = 48
    frames: int = 192
    categories: int = 5
    phonemes: int = 16
    primitives_per_category: int = 3
    part_dims: dict[str, int] = field(default_factory=lambda: {
        "upper": 18, "hands": 36, "lower": 9, "face": 18})
    audio_dim: int = 12
    beat_period: int = 15
    segment_min: int = 24
    segment_max: int = 48
    audio_noise: float = 0.05
    text_noise: float = 0.02
    fps: int = 30

    def validate(self) -> None:
        if self.speakers < 4:
            raise ConfigError("corpus.speakers must be >= 4")
        if self.sequences < 40:
            raise ConfigError("corpus.sequences must be >= 40")
        if self.frames < 128:
            raise ConfigError("corpus.frames must be >= 128")
        if self.frames % 4 != 0:
            raise ConfigError("corpus.frames must be divisible by 4")
        if self.categories != 5:
            raise ConfigError("corpus.categories is fixed at 5")
        if self.phonemes < 8:
            raise ConfigError("corpus.phonemes must be >= 8")
        if set(self.part_dims) != set(PART_NAMES):
            raise ConfigError(f"corpus.part_dims must cover {PART_NAMES}")
        for name, dim in self.part_dims.items():
            if dim % 9 != 0 or dim <= 0:
                raise ConfigError(
                    f"corpus.part_dims.{name}={dim} must be a positive multiple of 9")
        if self.segment_min % 4 or self.segment_max % 4:
            raise ConfigError("segment bounds must be multiples of 4")


@dataclass
class TokenizerConfig:
    latent_dim: int = 32
    width: int = 64
    depth: int = 3
    dilation_growth: int = 3
    content_entries_per_category: int = 4
    style_entries: int = 64
    style_layers: int = 7
    face_entries: int = 64
    ema_decay: float = 0.99
    kappa: float = 1.0
    tau0: float = 1.0
    tau_cl: float = 0.1
    commit_weight: float = 0.25
    msaf_heads: int = 4
    cpa_heads: int = 4
    gate_init_hands: float = -2.0
    gate_init_other: float = -3.0
    dead_code_threshold: float = 1e-3
    dead_code_patience: int = 100
    iterations: int = 600
    batch_size: int = 16
    window: int = 128
    stride: int = 20
    lr: float = 2e-4
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    clip_norm: float = 1.0

    @property
    def content_entries(self) -> int:
        return 5 * self.content_entries_per_category

    def validate(self) -> None:
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("tokenizer.ema_decay must be in (0, 1)")
        if self.tau0 <= 0:
            raise ConfigError("tokenizer.tau0 must be positive")
        if self.tau_cl <= 0:
            raise ConfigError("tokenizer.tau_cl must be positive")
        if self.style_layers < 1:
            raise ConfigError("tokenizer.style_layers must be >= 1")
        if self.window % 4:
            raise ConfigError("tokenizer.window must be divisible by 4")


@dataclass
class CMTConfig:
    layers: int = 8
    heads: int = 6
    width: int = 384
    ffn: int = 1024
    dropout: float = 0.2
    cond_dropout: float = 0.2
    decode_steps: int = 18
    cfg_scale: float = 4.0
    filter_threshold: float = 0.9
    alpha: float = 0.6
    beta: float = 0.4
    rand_scale: float = 0.2
    qbar_mode: str = "max_prob"
    iterations: int = 2000
    batch_size: int = 128
    lr: float = 2e-4
    lr_decay_frac: float = 0.7
    lr_decay_factor: float = 0.1

    def validate(self) -> None:
        if self.width % self.heads:
            raise ConfigError("cmt.width must be divisible by cmt.heads")
        if not 0 <= self.dropout < 1 or not 0 <= self.cond_dropout < 1:
            raise ConfigError("cmt dropout rates must be in [0, 1)")
        if self.decode_steps < 1:
            raise ConfigError("cmt.decode_steps must be >= 1")
        if not 0 < self.filter_threshold <= 1:
            raise ConfigError("cmt.filter_threshold must be in (0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("cmt remask weights must be >= 0")
        if not 0 <= self.rand_scale <= 1:
            raise ConfigError("cmt.rand_scale must be in [0, 1]")
        if self.qbar_mode not in ("max_prob", "one_minus_nogesture"):
            raise ConfigError(f"unknown cmt.qbar_mode {self.qbar_mode!r}")


@dataclass
class SRTConfig:
    layers: int = 8
    heads: int = 6
    width: int = 384
    ffn: int = 1024
    dropout: float = 0.2
    cond_dropout: float = 0.1
    cfg_scale: float = 3.0
    prefix_min: float = 0.25
    prefix_max: float = 0.50
    iterations: int = 2000
    batch_size: int = 128
    lr: float = 8e-4
    lr_decay_frac: float = 0.667
    lr_decay_factor: float = 0.1

    def validate(self) -> None:
        if self.width % self.heads:
            raise ConfigError("srt.width must be divisible by srt.heads")
        if not 0.0 < self.prefix_min <= self.prefix_max <= 1.0:
            raise ConfigError("srt prefix fractions must satisfy 0 < min <= max <= 1")


@dataclass
class InferenceConfig:
    window: int = 128
    stride: int = 96
    lock_tokens: int = 8
    highpass_window: int = 60
    translation_channels: int = 0

    def validate(self) -> None:
        if self.window % 4 or self.stride % 4:
            raise ConfigError("inference window/stride must be divisible by 4")
        if self.stride > self.window:
            raise ConfigError("inference.stride must be <= window")
        if self.lock_tokens < 0 or self.lock_tokens > self.window // 4:
            raise ConfigError("inference.lock_tokens out of range")


@dataclass
class MetricsConfig:
    sigma_bc: float = 3.0
    beat_smooth: int = 5
    eig_floor: float = 1e-10
    runs: int = 5
    diversity_samples: int = 16

    def validate(self) -> None:
        if self.sigma_bc <= 0:
            raise ConfigError("metrics.sigma_bc must be positive")
        if self.runs < 1:
            raise ConfigError("metrics.runs must be >= 1")


@dataclass
class AblationConfig:
    a1_no_msaf: bool = False
    a2_no_cpa: bool = False
    a3_no_smoc: bool = False
    a4_no_global_token: bool = False
    a5_no_sam: bool = False
    a6_no_cl_no_phone: bool = False
    a7_no_cl: bool = False

    def validate(self) -> None:
        pass


VARIANT_FIELDS = {
    "A1": "a1_no_msaf",
    "A2": "a2_no_cpa",
    "A3": "a3_no_smoc",
    "A4": "a4_no_global_token",
    "A5": "a5_no_sam",
    "A6": "a6_no_cl_no_phone",
    "A7": "a7_no_cl",
}


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    seed: int = 7
    out_dir: str = "runs"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    cmt: CMTConfig = field(default_factory=CMTConfig)
    srt: SRTConfig = field(default_factory=SRTConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> None:
        if self.profile not in ("desk", "full"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        for section in (self.corpus, self.tokenizer, self.cmt, self.srt,
                        self.inference, self.metrics, self.ablation):
            section.validate()

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def with_variant(self, variant: str) -> "ExperimentConfig":
        """Return a copy with one ablation switch (A1..A7) enabled."""
        if variant not in VARIANT_FIELDS:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        cfg = from_dict(self.to_dict())
        setattr(cfg.ablation, VARIANT_FIELDS[variant], True)
        return cfg


# Published rotation-feature dimensionalities; used for metric weighting.
# Not corpus dims: synthetic parts are built from 3x3 blocks (multiples of 9).
FULL_SCALE_PART_DIMS = {"face": 100, "upper": 78, "hands": 180, "lower": 57}


def full_profile() -> ExperimentConfig:
    """The published architecture/training values (Appendix-scale)."""
    cfg = ExperimentConfig(profile="full")
    cfg.corpus = CorpusConfig(speakers=20, sequences=64, frames=256, phonemes=71)
    cfg.tokenizer = TokenizerConfig(
        latent_dim=128, width=512, content_entries_per_category=102,
        style_entries=512, face_entries=512, iterations=20000, batch_size=128,
        window=128, stride=20)
    cfg.cmt = CMTConfig()
    cfg.srt = SRTConfig()
    return cfg


def desk_profile() -> ExperimentConfig:
    cfg = ExperimentConfig(profile="desk")
    cfg.cmt = CMTConfig(layers=2, heads=6, width=96, ffn=192, dropout=0.1,
                        iterations=700, batch_size=16)
    cfg.srt = SRTConfig(layers=2, heads=6, width=96, ffn=192, dropout=0.1,
                        iterations=700, batch_size=16)
    return cfg


def profile_config(name: str) -> ExperimentConfig:
    if name == "desk":
        return desk_profile()
    if name == "full":
        return full_profile()
    raise ConfigError(f"unknown profile {name!r}")


_SECTION_TYPES = {
    "corpus": CorpusConfig,
    "tokenizer": TokenizerConfig,
    "cmt": CMTConfig,
    "srt": SRTConfig,
    "inference": InferenceConfig,
    "metrics": MetricsConfig,
    "ablation": AblationConfig,
}


def _fill_section(cls: type, data: dict[str, Any], path: str) -> Any:
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section '{path}'")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        fld = known[name]
        if fld.type in ("int",) and isinstance(value, bool):
            raise ConfigError(f"{path}.{name}: expected int, got bool")
        if fld.type == "int" and not isinstance(value, int):
            raise ConfigError(f"{path}.{name}: expected int, got {type(value).__name__}")
        if fld.type == "float" and not isinstance(value, (int, float)):
            raise ConfigError(f"{path}.{name}: expected number")
        if fld.type == "float":
            value = float(value)
        if fld.type == "bool" and not isinstance(value, bool):
            raise ConfigError(f"{path}.{name}: expected bool")
        if fld.type == "str" and not isinstance(value, str):
            raise ConfigError(f"{path}.{name}: expected str")
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build a config from a nested dict, rejecting unknown keys."""
    data = dict(data)
    sections: dict[str, Any] = {}
    for key, cls in _SECTION_TYPES.items():
        if key in data:
            raw = data.pop(key)
            if not isinstance(raw, dict):
                raise ConfigError(f"section '{key}' must be a mapping")
            sections[key] = _fill_section(cls, raw, key)
    top = _fill_section(ExperimentConfig, data, "<root>")
    for key, value in sections.items():
        setattr(top, key, value)
    top.validate()
    return top


def load_config(path: str | Path | None, profile: str | None = None,
                seed: int | None = None) -> ExperimentConfig:
    """Load YAML config over a profile base; env seed override wins last."""
    base = profile_config(profile or "desk")
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError("config file must contain a mapping")
        merged = _merge(base.to_dict(), doc)
        base = from_dict(merged)
    if profile is not None:
        base.profile = profile
    if seed is not None:
        base.seed = seed
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            base.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
    base.validate()
    return base


def _merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def parse_config(text: str) -> ExperimentConfig:
    doc = yaml.safe_load(text) or {}
    return from_dict(doc)
