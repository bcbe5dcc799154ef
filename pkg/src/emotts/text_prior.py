"""Token sequences to an emotion-conditioned, speaker-scrubbed linguistic
prior with the same shape as the target mel.

The text encoder is pushed to drop speaker identity by a speaker
classifier behind a gradient-reversal gate; a per-position token
classifier (content loss) keeps the representation linguistically
faithful under that adversarial pressure. The encoded tokens are expanded
to frame rate by ground-truth or predicted durations and converted to mel
bands by an adaptor whose layer norms are conditioned on the emotion
embedding.

Module losses combine as::

    prior = 0.01 * speaker_adversarial + content + duration + prior_mel
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (
    ConditionalLayerNorm,
    GradientReversalGate,
    SelfAttentionBlock,
    pad_mask_from_lengths,
    sinusoidal_embedding,
)

PRIOR_ADV_WEIGHT = 0.01


class TextEncoder(nn.Module):
    """Embedding, convolutional pre-net, self-attention blocks and a final
    projection. Output is one row per token."""

    def __init__(self, vocab_size: int, width: int = 64, blocks: int = 2,
                 heads: int = 2, prenet_kernel: int = 5):
        super().__init__()
        self.vocab_size = vocab_size
        self.width = width
        self.embedding = nn.Embedding(vocab_size, width)
        nn.init.normal_(self.embedding.weight, 0.0, width ** -0.5)
        self.prenet_convs = nn.ModuleList(
            nn.Conv1d(width, width, prenet_kernel, padding=prenet_kernel // 2)
            for _ in range(3)
        )
        self.prenet_norms = nn.ModuleList(nn.LayerNorm(width) for _ in range(3))
        self.prenet_linear = nn.Linear(width, width)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(width, heads) for _ in range(blocks)
        )
        self.proj = nn.Linear(width, width)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """tokens: (B, C) int64, padded with any valid id; lengths: (B,).
        Returns (B, C, width) with padding rows zeroed."""
        if tokens.numel() == 0:
            raise ValueError("empty token sequence")
        bad = (tokens < 0) | (tokens >= self.vocab_size)
        if bool(bad.any()):
            offender = int(tokens[bad][0])
            raise ValueError(
                f"unknown token id {offender} (vocab size {self.vocab_size})"
            )
        pad = pad_mask_from_lengths(lengths, tokens.shape[1])
        x = self.embedding(tokens) * (self.width ** 0.5)
        for conv, norm in zip(self.prenet_convs, self.prenet_norms):
            x = F.relu(norm(conv(x.transpose(1, 2)).transpose(1, 2)))
        x = self.prenet_linear(x)
        positions = torch.arange(tokens.shape[1], dtype=x.dtype, device=x.device)
        x = x + sinusoidal_embedding(positions, self.width)
        for block in self.blocks:
            x = block(x, pad)
        x = self.proj(x)
        return x * (~pad).unsqueeze(-1).to(x.dtype)

    def encode(self, token_ids) -> torch.Tensor:
        """Single utterance: sequence of ids -> (C, width)."""
        device = self.embedding.weight.device
        tokens = torch.as_tensor(token_ids, dtype=torch.long, device=device).unsqueeze(0)
        lengths = torch.tensor([tokens.shape[1]], device=device)
        return self.forward(tokens, lengths).squeeze(0)


class SpeakerAdversarialHead(nn.Module):
    """GRU summary of the token representation, then a linear speaker
    classifier, all behind a gradient-reversal gate."""

    def __init__(self, width: int, n_speakers: int, hidden: int = 64,
                 grl_scale: float = 1.0):
        super().__init__()
        self.n_speakers = n_speakers
        self.gate = GradientReversalGate(grl_scale)
        self.gru = nn.GRU(width, hidden, batch_first=True)
        self.fc = nn.Linear(hidden, n_speakers)

    def logits(self, repr_: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.gate(repr_)
        out, _ = self.gru(x)
        final = out[torch.arange(out.shape[0], device=out.device), lengths - 1]
        return self.fc(final)

    def forward(self, repr_: torch.Tensor, lengths: torch.Tensor,
                speaker_ids: torch.Tensor) -> torch.Tensor:
        if bool((speaker_ids < 0).any()) or bool((speaker_ids >= self.n_speakers).any()):
            raise ValueError(
                f"speaker id out of range [0, {self.n_speakers}): "
                f"{speaker_ids.tolist()}"
            )
        return F.cross_entropy(self.logits(repr_, lengths), speaker_ids)


class ContentClassifier(nn.Module):
    """Per-position token classifier; its loss is summed over positions and
    averaged over the batch."""

    def __init__(self, width: int, vocab_size: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or width
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, vocab_size)

    def logits(self, repr_: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(repr_)))

    def forward(self, repr_: torch.Tensor, tokens: torch.Tensor,
                lengths: torch.Tensor) -> torch.Tensor:
        if repr_.shape[1] != tokens.shape[1]:
            raise ValueError(
                f"representation has {repr_.shape[1]} rows but {tokens.shape[1]} tokens"
            )
        logp = F.log_softmax(self.logits(repr_), dim=-1)
        nll = -logp.gather(-1, tokens.unsqueeze(-1)).squeeze(-1)
        valid = (~pad_mask_from_lengths(lengths, tokens.shape[1])).to(nll.dtype)
        return (nll * valid).sum(dim=1).mean()


class DurationPredictor(nn.Module):
    """Per-token frame counts from the token representation plus the
    emotion embedding (different emotions carry different tempo)."""

    def __init__(self, width: int, emb_width: int, hidden: int = 64, kernel: int = 3):
        super().__init__()
        self.cond = nn.Linear(emb_width, width)
        self.conv1 = nn.Conv1d(width, hidden, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, 1)

    def forward(self, repr_: torch.Tensor, emb: torch.Tensor,
                lengths: torch.Tensor) -> torch.Tensor:
        """(B, C, width), (B, emb_width) -> (B, C) nonnegative frame counts."""
        x = repr_ + self.cond(emb).unsqueeze(1)
        x = F.relu(self.norm1(self.conv1(x.transpose(1, 2)).transpose(1, 2)))
        x = F.relu(self.norm2(self.conv2(x.transpose(1, 2)).transpose(1, 2)))
        pred = F.softplus(self.out(x).squeeze(-1))
        return pred * (~pad_mask_from_lengths(lengths, repr_.shape[1])).to(pred.dtype)


def duration_loss(predicted: torch.Tensor, target: torch.Tensor,
                  lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error in the linear frame domain."""
    predicted = torch.as_tensor(predicted, dtype=torch.get_default_dtype()) \
        if not torch.is_tensor(predicted) else predicted
    target = torch.as_tensor(target, dtype=predicted.dtype, device=predicted.device) \
        if not torch.is_tensor(target) else target.to(predicted.dtype)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(predicted.shape)} vs {tuple(target.shape)}")
    sq = (predicted - target) ** 2
    if lengths is None:
        return sq.mean()
    valid = (~pad_mask_from_lengths(lengths, predicted.shape[-1])).to(sq.dtype)
    return (sq * valid).sum() / valid.sum()


def length_regulate(repr_: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row j of a (C, width) representation durations[j] times."""
    durations = torch.as_tensor(durations, dtype=torch.long, device=repr_.device)
    if durations.ndim != 1 or durations.shape[0] != repr_.shape[0]:
        raise ValueError(
            f"need one duration per row: {durations.shape[0]} durations, "
            f"{repr_.shape[0]} rows"
        )
    if bool((durations <= 0).any()):
        raise ValueError("durations must be positive integers")
    return torch.repeat_interleave(repr_, durations, dim=0)


def frame_index_map(durations: torch.Tensor, max_frames: int) -> torch.Tensor:
    """(B, C) integer durations -> (B, max_frames) index of the token each
    frame belongs to (0 beyond the utterance's end). Lets the batched
    expansion run as a single gather."""
    c = durations.shape[1]
    frame = torch.arange(max_frames, device=durations.device)
    ends = durations.cumsum(dim=1)
    # token index of frame f = number of ends <= f
    idx = (frame.unsqueeze(0).unsqueeze(-1) >= ends.unsqueeze(1)).sum(dim=-1)
    return idx.clamp(max=c - 1)


def length_regulate_batch(repr_: torch.Tensor, durations: torch.Tensor,
                          max_frames: int) -> torch.Tensor:
    """Batched expansion: (B, C, width) -> (B, max_frames, width); rows past
    an utterance's total duration repeat its last token and are expected
    to be masked downstream."""
    idx = frame_index_map(durations, max_frames)
    return repr_.gather(1, idx.unsqueeze(-1).expand(-1, -1, repr_.shape[-1]))


class EmotionalAdaptor(nn.Module):
    """Expanded representation -> mel-shaped prior. A 1-D convolution in,
    attention/FFN blocks each followed by a conditional layer norm driven
    by the emotion embedding, and a 1-D convolution out to mel bands.

    ``conditional=False`` swaps the conditional norms for plain layer
    norms, giving the emotion-blind variant used in ablation runs."""

    def __init__(self, width: int, bands: int, emb_width: int, blocks: int = 2,
                 heads: int = 2, kernel: int = 3, conditional: bool = True):
        super().__init__()
        self.conditional = conditional
        self.conv_in = nn.Conv1d(width, width, kernel, padding=kernel // 2)
        self.blocks = nn.ModuleList(SelfAttentionBlock(width, heads) for _ in range(blocks))
        if conditional:
            self.norms = nn.ModuleList(
                ConditionalLayerNorm(width, emb_width) for _ in range(blocks)
            )
        else:
            self.norms = nn.ModuleList(nn.LayerNorm(width) for _ in range(blocks))
        self.conv_out = nn.Conv1d(width, bands, kernel, padding=kernel // 2)
        self.width = width

    def forward(self, expanded: torch.Tensor, emb: torch.Tensor,
                frame_lengths: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, width), (B, emb_width) -> (B, T, bands)."""
        if expanded.shape[-1] != self.width:
            raise ValueError(
                f"expected width {self.width}, got {expanded.shape[-1]}"
            )
        pad = None
        if frame_lengths is not None:
            pad = pad_mask_from_lengths(frame_lengths, expanded.shape[1])
        x = self.conv_in(expanded.transpose(1, 2)).transpose(1, 2)
        positions = torch.arange(x.shape[1], dtype=x.dtype, device=x.device)
        x = x + sinusoidal_embedding(positions, self.width)
        for block, norm in zip(self.blocks, self.norms):
            x = block(x, pad)
            x = norm(x, emb) if self.conditional else norm(x)
        out = self.conv_out(x.transpose(1, 2)).transpose(1, 2)
        if pad is not None:
            out = out * (~pad).unsqueeze(-1).to(out.dtype)
        return out


def prior_mel_loss(prior: torch.Tensor, mel: torch.Tensor,
                   frame_lengths: torch.Tensor | None = None) -> torch.Tensor:
    """MSE between the prior and the target mel, over valid frames."""
    if prior.shape != mel.shape:
        raise ValueError(f"shape mismatch: {tuple(prior.shape)} vs {tuple(mel.shape)}")
    sq = (prior - mel) ** 2
    if frame_lengths is None:
        return sq.mean()
    valid = (~pad_mask_from_lengths(frame_lengths, prior.shape[-2])).to(sq.dtype)
    return (sq * valid.unsqueeze(-1)).sum() / (valid.sum() * prior.shape[-1])


def prior_loss(adv, content, dur, mel):
    """Weighted sum of the four component losses."""
    return PRIOR_ADV_WEIGHT * adv + content + dur + mel
