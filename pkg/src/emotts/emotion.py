"""Reference-mel emotion encoder with adversarial speaker removal and an
orthogonal-projection constraint on the embedding space.

The encoder turns a mel of any length into a fixed-width embedding. Three
losses shape that space: a speaker classifier behind a gradient-reversal
gate scrubs speaker identity, an emotion classifier (over all categories
including the pooled ``neutral_N``) keeps it emotion-discriminative, and
the orthogonal projection loss pulls same-emotion embeddings together
while pushing different-emotion embeddings toward mutual orthogonality::

    opl   = (1 - E_same) + 0.5 * |E_diff|
    total = 0.2 * speaker_adversarial + 0.8 * emotion_classification + opl

E_same / E_diff are the mean pairwise cosines over same- / different-label
pairs within the batch; a term with no pairs to average over is dropped.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ChannelLayerNorm2d, GradientReversalGate

EDM_ADV_WEIGHT = 0.2
EDM_CLS_WEIGHT = 0.8
OPL_DIFF_WEIGHT = 0.5


class ReferenceEncoder(nn.Module):
    """Strided 2-D convolutions over the mel, GRU summarization and a
    linear projection to the embedding width."""

    def __init__(self, bands: int, emb_width: int = 32,
                 channels: tuple[int, ...] = (32, 32, 64), gru_hidden: int = 64):
        super().__init__()
        self.bands = bands
        self.emb_width = emb_width
        convs = []
        norms = []
        in_ch = 1
        f = bands
        for ch in channels:
            convs.append(nn.Conv2d(in_ch, ch, kernel_size=3, stride=2, padding=1))
            norms.append(ChannelLayerNorm2d(ch))
            in_ch = ch
            f = (f + 1) // 2
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.gru = nn.GRU(in_ch * f, gru_hidden, batch_first=True)
        self.proj = nn.Linear(gru_hidden, emb_width)

    def _reduced_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        for _ in self.convs:
            lengths = (lengths + 1) // 2
        return lengths

    def forward(self, mels: torch.Tensor, frame_lengths: torch.Tensor) -> torch.Tensor:
        """mels: (B, T, bands) zero-padded; frame_lengths: (B,).
        Returns (B, emb_width); independent of T by construction."""
        if mels.ndim != 3 or mels.shape[-1] != self.bands:
            raise ValueError(
                f"expected (B, T, {self.bands}) mel batch, got {tuple(mels.shape)}"
            )
        if bool((frame_lengths < 1).any()):
            raise ValueError("reference mel must have at least one frame")
        x = mels.unsqueeze(1)  # (B, 1, T, F)
        t_lens = frame_lengths
        for conv, norm in zip(self.convs, self.norms):
            x = F.relu(norm(conv(x)))
            t_lens = (t_lens + 1) // 2
            # zero frames past each sample's (reduced) length so padding
            # never reaches the GRU
            idx = torch.arange(x.shape[2], device=x.device)
            keep = (idx.unsqueeze(0) < t_lens.unsqueeze(1)).to(x.dtype)
            x = x * keep.unsqueeze(1).unsqueeze(-1)
        b, ch, t, f = x.shape
        seq = x.permute(0, 2, 1, 3).reshape(b, t, ch * f)
        out, _ = self.gru(seq)
        final = out[torch.arange(b, device=out.device), t_lens - 1]
        return self.proj(final)

    def encode(self, mel) -> torch.Tensor:
        """Single reference: (T, bands) array/tensor -> (emb_width,)."""
        device = self.proj.weight.device
        dtype = self.proj.weight.dtype
        mel_t = torch.as_tensor(mel, dtype=dtype, device=device)
        if mel_t.ndim != 2 or mel_t.shape[0] < 1:
            raise ValueError(f"reference mel must be (T, bands) with T >= 1, got {tuple(mel_t.shape)}")
        lengths = torch.tensor([mel_t.shape[0]], device=device)
        return self.forward(mel_t.unsqueeze(0), lengths).squeeze(0)


class EmbeddingSpeakerHead(nn.Module):
    """Linear speaker classifier behind a gradient-reversal gate."""

    def __init__(self, emb_width: int, n_speakers: int, grl_scale: float = 1.0):
        super().__init__()
        self.n_speakers = n_speakers
        self.gate = GradientReversalGate(grl_scale)
        self.fc = nn.Linear(emb_width, n_speakers)

    def logits(self, emb: torch.Tensor) -> torch.Tensor:
        return self.fc(self.gate(emb))

    def forward(self, emb: torch.Tensor, speaker_ids: torch.Tensor) -> torch.Tensor:
        if bool((speaker_ids < 0).any()) or bool((speaker_ids >= self.n_speakers).any()):
            raise ValueError(
                f"speaker id out of range [0, {self.n_speakers}): {speaker_ids.tolist()}"
            )
        return F.cross_entropy(self.logits(emb), speaker_ids)


class EmotionClassifierHead(nn.Module):
    """Linear emotion classifier over all categories (same structure as the
    speaker head, minus the gate)."""

    def __init__(self, emb_width: int, n_categories: int):
        super().__init__()
        self.n_categories = n_categories
        self.fc = nn.Linear(emb_width, n_categories)

    def logits(self, emb: torch.Tensor) -> torch.Tensor:
        return self.fc(emb)

    def forward(self, emb: torch.Tensor, emotion_ids: torch.Tensor) -> torch.Tensor:
        if bool((emotion_ids < 0).any()) or bool((emotion_ids >= self.n_categories).any()):
            raise ValueError(
                f"emotion id out of range [0, {self.n_categories}): {emotion_ids.tolist()}"
            )
        return F.cross_entropy(self.logits(emb), emotion_ids)


def pairwise_cosine_stats(embeddings: torch.Tensor, labels: torch.Tensor):
    """Mean cosine over same-label and different-label pairs (i < j).

    Returns ``(e_same, e_diff)``; an entry is ``None`` when the batch has
    no pair of that kind."""
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ValueError("need a batch of at least 2 embeddings")
    norms = embeddings.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    unit = embeddings / norms.unsqueeze(1)
    cos = unit @ unit.t()
    n = embeddings.shape[0]
    upper = torch.triu(torch.ones(n, n, dtype=torch.bool, device=cos.device), diagonal=1)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    same_pairs = cos[same & upper]
    diff_pairs = cos[(~same) & upper]
    e_same = same_pairs.mean() if same_pairs.numel() else None
    e_diff = diff_pairs.mean() if diff_pairs.numel() else None
    return e_same, e_diff


def orthogonal_projection_loss(embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """(1 - E_same) + 0.5 * |E_diff| over within-batch pairs."""
    labels = torch.as_tensor(labels, device=embeddings.device)
    e_same, e_diff = pairwise_cosine_stats(embeddings, labels)
    loss = embeddings.new_zeros(())
    if e_same is not None:
        loss = loss + (1.0 - e_same)
    if e_diff is not None:
        loss = loss + OPL_DIFF_WEIGHT * e_diff.abs()
    return loss


def edm_loss(adv, cls, opl):
    """Weighted sum of the three embedding-space losses."""
    return EDM_ADV_WEIGHT * adv + EDM_CLS_WEIGHT * cls + opl
