"""Joint optimization of the prior text encoder, the emotion disentangling
module and the score decoder under one summed objective, plus
checkpointing, deterministic batching and end-to-end synthesis.

All stochasticity flows through explicit generators saved in checkpoints,
so a fixed seed fixes the full metric stream and resuming from a
checkpoint reproduces an uninterrupted run exactly.
"""

from __future__ import annotations

import io
import json
import pickle
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffusion as diff
from . import emotion as emo
from . import text_prior as tp
from .config import Config, config_from_dict
from .corpus import Corpus, Utterance

CHECKPOINT_MAGIC = b"EMCK1\n"

METRIC_KEYS = (
    "step", "L_ladv", "L_c", "L_dur", "L_mel", "L_prior",
    "L_sadv", "L_emo", "L_opl", "L_opedm", "L_diff", "L_total",
)


def total_loss(prior, opedm, diffusion):
    """Unweighted sum of the three module losses."""
    return prior + opedm + diffusion


class TtsModel(torch.nn.Module):
    """All trainable components in one module."""

    def __init__(self, cfg: Config, n_speakers: int, n_categories: int):
        super().__init__()
        m = cfg.model
        t = cfg.train
        self.n_speakers = n_speakers
        self.n_categories = n_categories
        self.text_encoder = tp.TextEncoder(
            m.vocab_size, m.width, m.attn_blocks, m.attn_heads
        )
        self.text_spk_head = tp.SpeakerAdversarialHead(
            m.width, n_speakers, m.adv_hidden, m.grl_scale
        )
        self.content_head = tp.ContentClassifier(m.width, m.vocab_size)
        self.duration_predictor = tp.DurationPredictor(
            m.width, m.emb_width, m.duration_hidden
        )
        self.adaptor = tp.EmotionalAdaptor(
            m.width, m.bands, m.emb_width, m.adaptor_blocks, m.attn_heads,
            conditional=not t.no_emotional_adaptor,
        )
        self.ref_encoder = emo.ReferenceEncoder(
            m.bands, m.emb_width, tuple(m.ref_channels), m.ref_gru
        )
        self.emb_spk_head = emo.EmbeddingSpeakerHead(m.emb_width, n_speakers, m.grl_scale)
        self.emotion_head = emo.EmotionClassifierHead(m.emb_width, n_categories)
        self.speaker_table = diff.SpeakerTable(n_speakers, m.spk_width)
        self.score_net = diff.ScoreNetwork(
            m.bands, m.unet_base, m.spk_width, m.emb_width,
            per_block_conditioning=not t.no_per_block_conditioning,
        )


@dataclass
class TrainState:
    config: Config
    step: int
    model: TtsModel
    optimizer: torch.optim.Adam
    noise_gen: torch.Generator
    sampler: random.Random
    n_speakers: int
    n_categories: int

    @property
    def schedule(self) -> diff.DiffusionSchedule:
        return diff.DiffusionSchedule(self.config.schedule.beta0, self.config.schedule.beta1)


def build_state(cfg: Config, n_speakers: int, n_categories: int) -> TrainState:
    cfg.validate()
    torch.manual_seed(cfg.train.seed)
    model = TtsModel(cfg, n_speakers, n_categories)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.train.lr,
        betas=(cfg.train.adam_beta1, cfg.train.adam_beta2),
    )
    noise_gen = torch.Generator().manual_seed(cfg.train.seed + 1)
    sampler = random.Random(cfg.train.seed + 2)
    return TrainState(
        config=cfg, step=0, model=model, optimizer=optimizer,
        noise_gen=noise_gen, sampler=sampler,
        n_speakers=n_speakers, n_categories=n_categories,
    )


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def collate(utterances: list[Utterance], mels: list[torch.Tensor]) -> dict:
    """Pad a list of utterances into batch tensors."""
    b = len(utterances)
    c_max = max(len(u.tokens) for u in utterances)
    t_max = max(u.frames for u in utterances)
    bands = mels[0].shape[1]
    tokens = torch.zeros(b, c_max, dtype=torch.long)
    durations = torch.zeros(b, c_max, dtype=torch.long)
    token_lengths = torch.zeros(b, dtype=torch.long)
    mel_batch = torch.zeros(b, t_max, bands)
    frame_lengths = torch.zeros(b, dtype=torch.long)
    for i, (utt, mel) in enumerate(zip(utterances, mels)):
        c = len(utt.tokens)
        tokens[i, :c] = torch.as_tensor(utt.tokens)
        durations[i, :c] = torch.as_tensor(utt.durations)
        token_lengths[i] = c
        mel_batch[i, : utt.frames] = mel
        frame_lengths[i] = utt.frames
    return {
        "tokens": tokens,
        "durations": durations,
        "token_lengths": token_lengths,
        "mels": mel_batch,
        "frame_lengths": frame_lengths,
        "speaker_ids": torch.as_tensor([u.speaker_id for u in utterances]),
        "emotion_ids": torch.as_tensor([u.emotion_id for u in utterances]),
    }


def load_train_mels(corpus: Corpus, utterances: list[Utterance]) -> list[torch.Tensor]:
    return [torch.from_numpy(corpus.load_mel(u)) for u in utterances]


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------


def train_step(state: TrainState, batch: dict) -> dict:
    """Run one optimizer update and return the metric record.

    Composite losses in the record are recomposed in float64 from the
    logged components, so the bookkeeping identities hold exactly.
    """
    cfg = state.config.train
    model = state.model
    model.train()
    schedule = state.schedule

    repr_ = model.text_encoder(batch["tokens"], batch["token_lengths"])
    ladv_t = model.text_spk_head(repr_, batch["token_lengths"], batch["speaker_ids"])
    if cfg.no_content_loss:
        c_t = None
    else:
        c_t = model.content_head(repr_, batch["tokens"], batch["token_lengths"])

    emb = model.ref_encoder(batch["mels"], batch["frame_lengths"])
    sadv_t = model.emb_spk_head(emb, batch["speaker_ids"])
    emo_t = model.emotion_head(emb, batch["emotion_ids"])
    opl_t = None if cfg.no_opl else emo.orthogonal_projection_loss(emb, batch["emotion_ids"])

    dur_pred = model.duration_predictor(repr_, emb, batch["token_lengths"])
    dur_t = tp.duration_loss(dur_pred, batch["durations"].float(), batch["token_lengths"])

    expanded = tp.length_regulate_batch(repr_, batch["durations"], batch["mels"].shape[1])
    mu = model.adaptor(expanded, emb, batch["frame_lengths"])
    mel_t = tp.prior_mel_loss(mu, batch["mels"], batch["frame_lengths"])

    spk_emb = model.speaker_table.lookup(batch["speaker_ids"])
    diff_t = diff.diffusion_loss(
        model.score_net, schedule, batch["mels"], mu, spk_emb, emb,
        generator=state.noise_gen, frame_lengths=batch["frame_lengths"],
        t_floor=state.config.schedule.t_floor,
    )

    prior_t = tp.prior_loss(ladv_t, 0.0 if c_t is None else c_t, dur_t, mel_t)
    opedm_t = emo.edm_loss(sadv_t, emo_t, 0.0 if opl_t is None else opl_t)
    total_t = total_loss(prior_t, opedm_t, diff_t)

    components = {
        "L_ladv": ladv_t.item(), "L_c": 0.0 if c_t is None else c_t.item(),
        "L_dur": dur_t.item(), "L_mel": mel_t.item(),
        "L_sadv": sadv_t.item(), "L_emo": emo_t.item(),
        "L_opl": 0.0 if opl_t is None else opl_t.item(),
        "L_diff": diff_t.item(),
    }
    metrics = dict(step=state.step, **components)
    metrics["L_prior"] = tp.prior_loss(
        metrics["L_ladv"], metrics["L_c"], metrics["L_dur"], metrics["L_mel"]
    )
    metrics["L_opedm"] = emo.edm_loss(metrics["L_sadv"], metrics["L_emo"], metrics["L_opl"])
    metrics["L_total"] = total_loss(metrics["L_prior"], metrics["L_opedm"], metrics["L_diff"])

    if not all(np.isfinite(v) for v in metrics.values()):
        breakdown = ", ".join(f"{k}={v}" for k, v in metrics.items() if k != "step")
        raise RuntimeError(f"non-finite loss at step {state.step}: {breakdown}")

    state.optimizer.zero_grad()
    total_t.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return metrics


def sample_batch(state: TrainState, utterances: list[Utterance],
                 mels: list[torch.Tensor]) -> dict:
    idx = [state.sampler.randrange(len(utterances)) for _ in range(state.config.train.batch_size)]
    return collate([utterances[i] for i in idx], [mels[i] for i in idx])


def run_training(
    state: TrainState,
    corpus: Corpus,
    out_dir: str | Path | None = None,
    steps: int | None = None,
    metrics_sink=None,
) -> list[dict]:
    """Train from the state's current step up to ``total_steps`` (or for
    ``steps`` more steps), streaming metrics and periodic checkpoints."""
    train_utts = corpus.subset("train")
    if not train_utts:
        raise ValueError("corpus has no training utterances")
    mels = load_train_mels(corpus, train_utts)
    target = state.config.train.total_steps if steps is None else state.step + steps

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        mode = "a" if state.step > 0 else "w"
        metrics_file = open(out_path / "metrics.jsonl", mode, encoding="utf-8")

    history: list[dict] = []
    try:
        while state.step < target:
            batch = sample_batch(state, train_utts, mels)
            metrics = train_step(state, batch)
            history.append(metrics)
            if metrics_sink is not None:
                metrics_sink(metrics)
            if metrics_file is not None:
                metrics_file.write(json.dumps(metrics) + "\n")
            if out_path is not None and state.step % state.config.train.checkpoint_every == 0:
                save_checkpoint(state, out_path / f"ckpt_{state.step:06d}.pt")
        if out_path is not None:
            save_checkpoint(state, out_path / "ckpt_final.pt")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return history


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def _to_numpy(obj):
    if torch.is_tensor(obj):
        return {"__tensor__": True, "data": obj.detach().cpu().numpy()}
    if isinstance(obj, dict):
        return {k: _to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        out = [_to_numpy(v) for v in obj]
        return out if isinstance(obj, list) else tuple(out)
    return obj


def _to_torch(obj):
    if isinstance(obj, dict):
        if obj.get("__tensor__") is True:
            return torch.from_numpy(obj["data"].copy())
        return {k: _to_torch(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        out = [_to_torch(v) for v in obj]
        return out if isinstance(obj, list) else tuple(out)
    return obj


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Single binary file: config echo, parameters, optimizer moments and
    rng states. Deterministic bytes for identical states."""
    payload = {
        "config": state.config.to_dict(),
        "step": state.step,
        "n_speakers": state.n_speakers,
        "n_categories": state.n_categories,
        "model": _to_numpy(state.model.state_dict()),
        "optimizer": _to_numpy(state.optimizer.state_dict()),
        "noise_gen": state.noise_gen.get_state().numpy(),
        "sampler": state.sampler.getstate(),
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    pickle.dump(payload, buf, protocol=4)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"corrupted checkpoint header in {path}")
    try:
        payload = pickle.loads(raw[len(CHECKPOINT_MAGIC):])
    except Exception as exc:
        raise ValueError(f"corrupted checkpoint {path}: {exc}") from exc

    cfg = config_from_dict(payload["config"])
    state = build_state(cfg, payload["n_speakers"], payload["n_categories"])
    state.model.load_state_dict(_to_torch(payload["model"]))
    state.optimizer.load_state_dict(_to_torch(payload["optimizer"]))
    state.noise_gen.set_state(torch.from_numpy(payload["noise_gen"].copy()))
    sampler_state = payload["sampler"]
    if isinstance(sampler_state, list):
        sampler_state = tuple(
            tuple(s) if isinstance(s, list) else s for s in sampler_state
        )
    state.sampler.setstate(sampler_state)
    state.step = payload["step"]
    return state


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def synthesize(
    state: TrainState,
    token_ids,
    speaker_id: int,
    reference_mel,
    n_steps: int = 50,
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
    use_sde: bool = False,
) -> np.ndarray:
    """Text + speaker + emotional reference -> mel.

    Durations are predicted with the reference's emotion embedding and
    rounded to integers >= 1, so the output frame count equals their sum.
    """
    if len(token_ids) == 0:
        raise ValueError("empty token sequence")
    model = state.model
    model.eval()
    with torch.no_grad():
        spk_emb = model.speaker_table.lookup(
            torch.tensor([int(speaker_id)])
        ).squeeze(0)
        repr_ = model.text_encoder.encode(token_ids)
        emb = model.ref_encoder.encode(reference_mel)
        lengths = torch.tensor([repr_.shape[0]])
        pred = model.duration_predictor(
            repr_.unsqueeze(0), emb.unsqueeze(0), lengths
        ).squeeze(0)
        durations = torch.clamp(torch.round(pred), min=1).long()
        expanded = tp.length_regulate(repr_, durations)
        mu = model.adaptor(
            expanded.unsqueeze(0), emb.unsqueeze(0),
            torch.tensor([expanded.shape[0]]),
        ).squeeze(0)
        sampler = diff.reverse_sde_sample if use_sde else diff.reverse_ode_sample
        mel = sampler(
            model.score_net, state.schedule, mu, spk_emb, emb,
            n_steps=n_steps, generator=generator, temperature=temperature,
        )
    return mel.numpy().astype(np.float32)
