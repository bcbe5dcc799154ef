"""Shared building blocks: gradient reversal, positional/time embeddings,
conditional layer normalization and transformer-style blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class _ReverseGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


class GradientReversalGate(nn.Module):
    """Identity in the forward pass; multiplies gradients by -scale in the
    backward pass. ``enabled=False`` turns it into a plain identity, which
    is what the sign-flip contract tests compare against."""

    def __init__(self, scale: float = 1.0):
        super().__init__()
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.scale = scale
        self.enabled = True

    def forward(self, x):
        if not self.enabled:
            return x
        return _ReverseGradient.apply(x, self.scale)


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sin/cos embedding. ``positions`` is any shape; output gains
    a trailing ``dim`` axis."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=positions.dtype, device=positions.device) / max(half - 1, 1)
    )
    args = positions.unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


class ChannelLayerNorm2d(nn.Module):
    """LayerNorm over the channel axis at each (t, f) position of a
    (B, C, T, F) map. Unlike batch/group norms, the result at a valid
    position is unaffected by padded positions, so batched-with-padding
    and single-sample forward passes agree exactly."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, (self.channels,), self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class ConditionalLayerNorm(nn.Module):
    """LayerNorm whose scale and shift are affine projections of a
    conditioning vector. Initialised to the identity (scale 1, shift 0)."""

    def __init__(self, width: int, cond_width: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.to_scale = nn.Linear(cond_width, width)
        self.to_shift = nn.Linear(cond_width, width)
        nn.init.zeros_(self.to_scale.weight)
        nn.init.ones_(self.to_scale.bias)
        nn.init.zeros_(self.to_shift.weight)
        nn.init.zeros_(self.to_shift.bias)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # x: (B, T, width), cond: (B, cond_width)
        normed = self.normalize(x)
        scale = self.to_scale(cond).unsqueeze(1)
        shift = self.to_shift(cond).unsqueeze(1)
        return scale * normed + shift


class SelfAttentionBlock(nn.Module):
    """Post-norm transformer block: self-attention + conv feed-forward."""

    def __init__(self, width: int, heads: int, ffn_kernel: int = 3):
        super().__init__()
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(
            nn.Conv1d(width, width * 2, ffn_kernel, padding=ffn_kernel // 2),
            nn.ReLU(),
            nn.Conv1d(width * 2, width, ffn_kernel, padding=ffn_kernel // 2),
        )
        self.norm2 = nn.LayerNorm(width)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        # x: (B, T, width); pad_mask: (B, T) True at padding positions.
        attn_out, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        x = self.norm1(x + attn_out)
        ffn_out = self.ffn(x.transpose(1, 2)).transpose(1, 2)
        x = self.norm2(x + ffn_out)
        if pad_mask is not None:
            x = x * (~pad_mask).unsqueeze(-1)
        return x


def pad_mask_from_lengths(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    """(B,) lengths -> (B, T) boolean mask, True at padding positions."""
    if max_len is None:
        max_len = int(lengths.max())
    idx = torch.arange(max_len, device=lengths.device)
    return idx.unsqueeze(0) >= lengths.unsqueeze(1)
