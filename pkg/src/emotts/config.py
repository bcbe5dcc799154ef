"""Configuration dataclasses and JSON config-file handling.

One JSON file describes a full run, with sections ``corpus``, ``model``,
``schedule``, ``train``, and ``eval``. Command-line flags override
individual keys. Defaults are desk-scale; ``paper_scale_model`` returns
the published large-model dimensions as a preset.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class CorpusConfig:
    seed: int = 0
    speakers: int = 4
    emotional_speakers: int = 1
    emotions: int = 3
    utterances_per_cell: int = 115
    vocab_size: int = 40
    bands: int = 20
    min_tokens: int = 6
    max_tokens: int = 12
    min_base_duration: float = 2.0
    max_base_duration: float = 5.0
    noise_sigma: float = 0.3
    mod_amplitude: float = 1.0
    speaker_scale: float = 1.5
    token_scale: float = 1.0
    # 0 = independent emotion band patterns, 1 = all emotional categories
    # share one pattern. Intermediate values make them confusable.
    emotion_pattern_overlap: float = 0.0
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.speakers < 1:
            raise ValueError(f"speakers must be >= 1, got {self.speakers}")
        if self.emotions < 1:
            raise ValueError(f"emotions must be >= 1, got {self.emotions}")
        if not 0 <= self.emotional_speakers <= self.speakers:
            raise ValueError(
                f"emotional_speakers must be in [0, {self.speakers}], "
                f"got {self.emotional_speakers}"
            )
        if self.utterances_per_cell < 1:
            raise ValueError("utterances_per_cell must be >= 1")
        if self.bands < 4:
            raise ValueError(f"bands must be >= 4, got {self.bands}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (two token-id ranges)")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        if not 0 < self.min_base_duration <= self.max_base_duration:
            raise ValueError("need 0 < min_base_duration <= max_base_duration")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")
        if not 0 <= self.emotion_pattern_overlap <= 1:
            raise ValueError("emotion_pattern_overlap must be in [0, 1]")


@dataclass
class ModelConfig:
    vocab_size: int = 40
    bands: int = 20
    width: int = 64            # linguistic representation width
    attn_blocks: int = 2
    attn_heads: int = 2
    emb_width: int = 32        # emotion embedding width
    spk_width: int = 32        # speaker look-up table width
    adv_hidden: int = 64       # GRU width of the text-side adversarial head
    duration_hidden: int = 64
    adaptor_blocks: int = 2
    ref_channels: tuple[int, ...] = (32, 32, 64)
    ref_gru: int = 64
    unet_base: int = 32
    unet_mults: tuple[int, ...] = (1, 2)
    grl_scale: float = 1.0

    def validate(self) -> None:
        for name in ("vocab_size", "bands", "width", "attn_blocks", "attn_heads",
                     "emb_width", "spk_width", "adv_hidden", "duration_hidden",
                     "adaptor_blocks", "ref_gru", "unet_base"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.width % self.attn_heads != 0:
            raise ValueError("width must be divisible by attn_heads")
        if self.grl_scale <= 0:
            raise ValueError("grl_scale must be positive")


def paper_scale_model() -> ModelConfig:
    """Published large-model dimensions (untested at desk scale)."""
    return ModelConfig(
        vocab_size=200,
        bands=80,
        width=448,
        attn_blocks=6,
        attn_heads=8,
        emb_width=256,
        spk_width=64,
        adv_hidden=256,
        duration_hidden=256,
        ref_channels=(32, 32, 64, 64, 128, 128),
        ref_gru=128,
        unet_base=64,
        unet_mults=(1, 2, 4),
    )


@dataclass
class ScheduleConfig:
    beta0: float = 0.05
    beta1: float = 20.0
    t_floor: float = 1e-3     # lower limit of sampled t in the score loss

    def validate(self) -> None:
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        if self.beta1 < self.beta0:
            raise ValueError("beta1 must be >= beta0")
        if not 0 < self.t_floor < 1:
            raise ValueError("t_floor must be in (0, 1)")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    total_steps: int = 5000
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip: float = 1.0
    checkpoint_every: int = 1000
    no_content_loss: bool = False
    no_emotional_adaptor: bool = False
    no_opl: bool = False
    no_per_block_conditioning: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


@dataclass
class EvalConfig:
    split: str = "test"
    split_seed: int = 0
    oracle_paths: int = 50000
    oracle_samples: int = 5000
    ode_steps: int = 200

    def validate(self) -> None:
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.oracle_paths < 100 or self.oracle_samples < 100:
            raise ValueError("oracle_paths and oracle_samples must be >= 100")


@dataclass
class Config:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _section_from_dict(cls, data: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(
            f"unknown key(s) in config section '{section}': {sorted(unknown)}"
        )
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> Config:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _section_from_dict(cls, data.get(name, {}), name)
    cfg = Config(**sections)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> Config:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must contain a JSON object")
    return config_from_dict(data)


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
