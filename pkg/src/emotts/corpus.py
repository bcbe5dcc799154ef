"""Synthetic multi-speaker, multi-emotion, two-language corpus.

Every mel frame is built from known latent signatures::

    mel[t] = token_pattern[token_at(t)] + speaker_envelope
             + amplitude * emotion_pattern * sin(2*pi*t / period)
             + gaussian(noise_sigma)

so speaker identity, emotion and content are all linearly decodable by
construction and can serve as test oracles. Durations are per-token base
values scaled by a per-emotion tempo multiplier (1.0 for the neutral
categories).

The two "languages" are disjoint token-id ranges: speakers with even ids
draw tokens from the lower half of the vocabulary, odd ids from the upper
half. Cross-lingual synthesis means recombining a speaker with the token
range it never saw in training.

On-disk layout (all paths relative to the manifest's directory):

* ``manifest.jsonl`` — one JSON record per utterance.
* ``mels/<id>.mel`` — binary mel file, magic ``DMEL``, u32 frames, u32
  bands, then frames*bands little-endian float32, frame-major.
* ``signatures.json`` — the latent signatures used by evaluation oracles.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .config import CorpusConfig

MEL_MAGIC = b"DMEL"
NEUTRAL_N = "neutral_N"

# Category layout: index 0 is the pooled neutral category of the
# non-emotional speakers, index 1 the emotional speakers' own neutral,
# 2.. the emotional categories.
NEUTRAL_N_ID = 0
NEUTRAL_ID = 1


def category_names(n_emotions: int) -> list[str]:
    return [NEUTRAL_N, "neutral"] + [f"emotion_{k}" for k in range(1, n_emotions + 1)]


@dataclass
class EmotionCategories:
    """Ordered emotion label space; must contain the pooled neutral_N."""

    names: list[str]

    def __post_init__(self) -> None:
        if len(self.names) < 2:
            raise ValueError("need at least 2 emotion categories")
        if NEUTRAL_N not in self.names:
            raise ValueError(f"category set must contain {NEUTRAL_N!r}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("category names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class Utterance:
    id: str
    speaker_id: int
    emotion_id: int
    language_id: int
    tokens: list[int]
    durations: list[int]
    mel_path: str
    split: str = "train"

    def validate(self) -> None:
        if len(self.tokens) != len(self.durations):
            raise ValueError(
                f"utterance {self.id}: {len(self.tokens)} tokens but "
                f"{len(self.durations)} durations"
            )
        if not self.tokens:
            raise ValueError(f"utterance {self.id}: empty token sequence")
        if any(d < 1 for d in self.durations):
            raise ValueError(f"utterance {self.id}: durations must be >= 1")

    @property
    def frames(self) -> int:
        return sum(self.durations)


@dataclass
class Corpus:
    root: Path
    bands: int
    utterances: list[Utterance]
    categories: EmotionCategories

    def mel_file(self, utt: Utterance) -> Path:
        return self.root / utt.mel_path

    def load_mel(self, utt: Utterance) -> np.ndarray:
        return read_mel(self.mel_file(utt))

    def subset(self, split: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == split]

    @property
    def n_speakers(self) -> int:
        return max(u.speaker_id for u in self.utterances) + 1


@dataclass
class LatentSignatures:
    """Ground-truth generative factors, persisted beside the manifest."""

    seed: int
    noise_sigma: float
    mod_amplitude: float
    category_names: list[str]
    speaker_envelopes: np.ndarray     # (speakers, bands)
    emotion_patterns: np.ndarray      # (categories, bands), unit norm
    emotion_periods: np.ndarray       # (categories,) frames per cycle
    duration_multipliers: np.ndarray  # (categories,), 1.0 for neutrals
    token_patterns: np.ndarray        # (vocab, bands)

    def emotion_term(self, emotion_id: int, frames: int) -> np.ndarray:
        """The additive emotion component for a given frame count."""
        t = np.arange(frames, dtype=np.float64)
        phase = np.sin(2.0 * math.pi * t / self.emotion_periods[emotion_id])
        return self.mod_amplitude * phase[:, None] * self.emotion_patterns[emotion_id]


# ---------------------------------------------------------------------------
# Mel file I/O
# ---------------------------------------------------------------------------


def write_mel(mel: np.ndarray, path: str | Path) -> None:
    mel = np.asarray(mel)
    if mel.ndim != 2:
        raise ValueError(f"mel must be 2-D (frames x bands), got shape {mel.shape}")
    if not np.all(np.isfinite(mel)):
        raise ValueError("mel contains non-finite values")
    frames, bands = mel.shape
    payload = mel.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC)
        fh.write(struct.pack("<II", frames, bands))
        fh.write(payload)


def read_mel(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mel file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MEL_MAGIC:
        raise ValueError(f"bad magic in mel file {path}")
    frames, bands = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * frames * bands
    if len(raw) != expected:
        raise ValueError(
            f"truncated mel file {path}: header says {frames}x{bands} "
            f"({expected} bytes), file has {len(raw)}"
        )
    values = np.frombuffer(raw[12:], dtype="<f4").reshape(frames, bands)
    return values.copy()


def read_mel_header(path: str | Path) -> tuple[int, int]:
    """(frames, bands) without reading the payload."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mel file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != MEL_MAGIC:
        raise ValueError(f"bad magic in mel file {path}")
    return struct.unpack("<II", head[4:12])


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

_MANIFEST_FIELDS = (
    "id", "speaker_id", "emotion_id", "language_id",
    "tokens", "durations", "mel_path", "split",
)


def save_manifest(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for utt in corpus.utterances:
            record = {name: getattr(utt, name) for name in _MANIFEST_FIELDS}
            fh.write(json.dumps(record) + "\n")


def load_manifest(path: str | Path, check_mels: bool = True) -> Corpus:
    """Read a manifest and validate every record.

    Raises ``ValueError`` naming the offending line for malformed records
    and ``FileNotFoundError`` naming the utterance id for missing mels.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    utterances: list[Utterance] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                utt = Utterance(**{k: record[k] for k in _MANIFEST_FIELDS})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"malformed manifest record at line {lineno}: {exc}") from exc
            utt.validate()
            utterances.append(utt)
    if not utterances:
        raise ValueError(f"manifest {path} contains no utterances")

    bands = None
    if check_mels:
        for utt in utterances:
            mel_file = root / utt.mel_path
            if not mel_file.exists():
                raise FileNotFoundError(
                    f"utterance {utt.id}: mel file missing at {mel_file}"
                )
            frames, file_bands = read_mel_header(mel_file)
            if frames != utt.frames:
                raise ValueError(
                    f"utterance {utt.id}: durations sum to {utt.frames} frames "
                    f"but mel file has {frames}"
                )
            if bands is None:
                bands = file_bands
            elif file_bands != bands:
                raise ValueError(
                    f"utterance {utt.id}: {file_bands} bands, corpus uses {bands}"
                )
    if bands is None:
        bands = 0

    n_emotions = max(u.emotion_id for u in utterances) - 1
    categories = EmotionCategories(category_names(max(n_emotions, 1)))
    return Corpus(root=root, bands=bands, utterances=utterances, categories=categories)


def save_signatures(sig: LatentSignatures, path: str | Path) -> None:
    data = asdict(sig)
    for key, value in data.items():
        if isinstance(value, np.ndarray):
            data[key] = value.tolist()
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def load_signatures(path: str | Path) -> LatentSignatures:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"signatures file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    arrays = ("speaker_envelopes", "emotion_patterns", "emotion_periods",
              "duration_multipliers", "token_patterns")
    for key in arrays:
        data[key] = np.asarray(data[key], dtype=np.float64)
    return LatentSignatures(**data)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def language_of_speaker(speaker_id: int) -> int:
    return speaker_id % 2


def token_range(language_id: int, vocab_size: int) -> tuple[int, int]:
    half = vocab_size // 2
    return (0, half) if language_id == 0 else (half, vocab_size)


def _draw_signatures(cfg: CorpusConfig) -> LatentSignatures:
    rng = np.random.default_rng([cfg.seed])
    n_cat = 2 + cfg.emotions
    envelopes = rng.normal(0.0, cfg.speaker_scale, size=(cfg.speakers, cfg.bands))
    tokens = rng.normal(0.0, cfg.token_scale, size=(cfg.vocab_size, cfg.bands))

    patterns = rng.normal(0.0, 1.0, size=(n_cat, cfg.bands))
    patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
    if cfg.emotion_pattern_overlap > 0 and cfg.emotions > 1:
        # Mix each emotional pattern toward the previous one so that
        # neighbouring categories become confusable.
        c = cfg.emotion_pattern_overlap
        for k in range(3, n_cat):
            mixed = c * patterns[k - 1] + (1 - c) * patterns[k]
            patterns[k] = mixed / np.linalg.norm(mixed)

    periods = rng.uniform(6.0, 24.0, size=n_cat)
    multipliers = np.ones(n_cat)
    multipliers[2:] = rng.uniform(0.75, 1.45, size=cfg.emotions)

    return LatentSignatures(
        seed=cfg.seed,
        noise_sigma=cfg.noise_sigma,
        mod_amplitude=cfg.mod_amplitude,
        category_names=category_names(cfg.emotions),
        speaker_envelopes=envelopes,
        emotion_patterns=patterns,
        emotion_periods=periods,
        duration_multipliers=multipliers,
        token_patterns=tokens,
    )


def _render_mel(utt: Utterance, sig: LatentSignatures, rng: np.random.Generator) -> np.ndarray:
    frames = utt.frames
    token_at = np.repeat(np.asarray(utt.tokens), np.asarray(utt.durations))
    mel = sig.token_patterns[token_at].astype(np.float64)
    mel += sig.speaker_envelopes[utt.speaker_id]
    mel += sig.emotion_term(utt.emotion_id, frames)
    if sig.noise_sigma > 0:
        mel += rng.normal(0.0, sig.noise_sigma, size=mel.shape)
    return mel.astype(np.float32)


def generate_corpus(cfg: CorpusConfig, out_dir: str | Path) -> tuple[Corpus, LatentSignatures]:
    """Write manifest, mel files and signatures under ``out_dir``.

    Fully reproducible: every utterance is rendered from an rng seeded by
    ``(cfg.seed, utterance_index)``, so reruns are byte-identical and
    generation could be parallelised across utterances.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "mels").mkdir(parents=True, exist_ok=True)
    sig = _draw_signatures(cfg)

    # Cell plan: emotional speakers get one cell per category except
    # neutral_N; the remaining speakers only produce neutral_N.
    cells: list[tuple[int, int]] = []
    n_cat = 2 + cfg.emotions
    for spk in range(cfg.speakers):
        if spk < cfg.emotional_speakers:
            cells.extend((spk, emo) for emo in range(NEUTRAL_ID, n_cat))
        else:
            cells.append((spk, NEUTRAL_N_ID))

    utterances: list[Utterance] = []
    index = 0
    for spk, emo in cells:
        lang = language_of_speaker(spk)
        lo, hi = token_range(lang, cfg.vocab_size)
        rho = sig.duration_multipliers[emo]
        n_test = math.ceil(cfg.test_fraction * cfg.utterances_per_cell)
        for i in range(cfg.utterances_per_cell):
            rng = np.random.default_rng([cfg.seed, index])
            count = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
            tokens = rng.integers(lo, hi, size=count).tolist()
            base = rng.uniform(cfg.min_base_duration, cfg.max_base_duration, size=count)
            durations = np.maximum(1, np.rint(base * rho).astype(int)).tolist()
            utt = Utterance(
                id=f"spk{spk}_emo{emo}_{i:04d}",
                speaker_id=spk,
                emotion_id=emo,
                language_id=lang,
                tokens=[int(t) for t in tokens],
                durations=[int(d) for d in durations],
                mel_path=f"mels/spk{spk}_emo{emo}_{i:04d}.mel",
                split="test" if i >= cfg.utterances_per_cell - n_test else "train",
            )
            mel = _render_mel(utt, sig, rng)
            write_mel(mel, out_dir / utt.mel_path)
            utterances.append(utt)
            index += 1

    corpus = Corpus(
        root=out_dir,
        bands=cfg.bands,
        utterances=utterances,
        categories=EmotionCategories(sig.category_names),
    )
    save_manifest(corpus, out_dir / "manifest.jsonl")
    save_signatures(sig, out_dir / "signatures.json")
    return corpus, sig


# ---------------------------------------------------------------------------
# Signature-based oracles
# ---------------------------------------------------------------------------


def speaker_residual(
    mel: np.ndarray,
    tokens: list[int],
    durations: list[int],
    emotion_id: int,
    sig: LatentSignatures,
) -> np.ndarray:
    """Time-averaged mel minus the known token and emotion terms.

    For a noise-free generated utterance this equals the speaker envelope
    exactly; for synthesized audio it estimates the rendered envelope.
    """
    mel = np.asarray(mel, dtype=np.float64)
    token_at = np.repeat(np.asarray(tokens), np.asarray(durations))
    if len(token_at) != mel.shape[0]:
        raise ValueError(
            f"durations sum to {len(token_at)} but mel has {mel.shape[0]} frames"
        )
    residual = mel - sig.token_patterns[token_at] - sig.emotion_term(emotion_id, mel.shape[0])
    return residual.mean(axis=0)


def assign_speaker(
    mel: np.ndarray,
    tokens: list[int],
    durations: list[int],
    emotion_id: int,
    sig: LatentSignatures,
) -> int:
    """Nearest speaker envelope to the utterance's residual."""
    residual = speaker_residual(mel, tokens, durations, emotion_id, sig)
    dists = np.linalg.norm(sig.speaker_envelopes - residual, axis=1)
    return int(np.argmin(dists))
