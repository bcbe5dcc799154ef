"""Diffusion core: noise schedule, closed-form forward process, conditioned
U-shaped score network, weighted score-matching loss, and reverse-time
ODE / SDE samplers.

The forward process relaxes the data toward a data-dependent terminal
distribution N(mu, I) (identity covariance assumed throughout)::

    dX = 1/2 (mu - X) beta_t dt + sqrt(beta_t) dW

whose marginal given X0 is Gaussian with

    mean_t = mu + (X0 - mu) exp(-B(t)/2),   var_t = lam(t) = 1 - exp(-B(t))
    B(t)   = integral of beta over [0, t]

The score network is trained to match the conditional score
-(X_t - mean_t)/lam(t) under the weight lam(t), and sampling integrates
either the probability-flow ODE or the reverse SDE from t=1 to t=0 on a
uniform grid (explicit Euler / Euler-Maruyama).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ChannelLayerNorm2d, sinusoidal_embedding


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear noise schedule beta(t) = beta0 + (beta1 - beta0) t on [0, 1]."""

    beta0: float = 0.05
    beta1: float = 20.0

    def __post_init__(self):
        if self.beta0 <= 0:
            raise ValueError(f"beta0 must be positive, got {self.beta0}")
        if self.beta1 < self.beta0:
            raise ValueError(f"beta1 must be >= beta0, got {self.beta1} < {self.beta0}")

    @staticmethod
    def _as_tensor(t):
        if torch.is_tensor(t):
            return t
        return torch.tensor(float(t), dtype=torch.float64)

    def beta(self, t):
        t = self._as_tensor(t)
        return self.beta0 + (self.beta1 - self.beta0) * t

    def cumulative(self, t):
        """B(t) = beta0 t + (beta1 - beta0) t^2 / 2."""
        t = self._as_tensor(t)
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t

    def lam(self, t):
        """Marginal variance 1 - exp(-B(t)); strictly increasing from 0."""
        return 1.0 - torch.exp(-self.cumulative(t))


def _broadcast_t(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    while t.ndim < like.ndim:
        t = t.unsqueeze(-1)
    return t


def forward_marginal(schedule: DiffusionSchedule, x0: torch.Tensor, mu: torch.Tensor,
                     t, generator: torch.Generator | None = None) -> torch.Tensor:
    """Sample X_t ~ N(mu + (X0 - mu) e^{-B(t)/2}, lam(t) I).

    ``t`` may be a scalar or a tensor matching the leading dimension of
    ``x0`` (one time per batch element)."""
    t = torch.as_tensor(t, dtype=x0.dtype, device=x0.device)
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    t = _broadcast_t(t, x0)
    decay = torch.exp(-0.5 * schedule.cumulative(t))
    mean = mu + (x0 - mu) * decay
    std = torch.sqrt(schedule.lam(t))
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    return mean + std * noise


def true_conditional_score(schedule: DiffusionSchedule, xt: torch.Tensor,
                           x0: torch.Tensor, mu: torch.Tensor, t) -> torch.Tensor:
    """Analytic score of the Gaussian marginal: -(X_t - mean_t) / lam(t).

    Undefined at t = 0 (the marginal degenerates to a point mass)."""
    t = torch.as_tensor(t, dtype=xt.dtype, device=xt.device)
    if bool((t <= 0).any()) or bool((t > 1).any()):
        raise ValueError(f"t must lie in (0, 1] for the conditional score, got {t}")
    t = _broadcast_t(t, xt)
    decay = torch.exp(-0.5 * schedule.cumulative(t))
    mean = mu + (x0 - mu) * decay
    return -(xt - mean) / schedule.lam(t)


class SpeakerTable(nn.Module):
    """Trainable per-speaker embedding vectors."""

    def __init__(self, n_speakers: int, width: int = 32):
        super().__init__()
        self.n_speakers = n_speakers
        self.table = nn.Embedding(n_speakers, width)

    def lookup(self, speaker_ids: torch.Tensor) -> torch.Tensor:
        speaker_ids = torch.as_tensor(speaker_ids, device=self.table.weight.device)
        if bool((speaker_ids < 0).any()) or bool((speaker_ids >= self.n_speakers).any()):
            raise ValueError(
                f"unknown speaker id {speaker_ids.tolist()} "
                f"(table has {self.n_speakers} speakers)"
            )
        return self.table(speaker_ids)

    forward = lookup


class ResBlock(nn.Module):
    """Two masked convolutions with group norms; the time embedding (and,
    in the condition-enhanced mode, the speaker and emotion embeddings) is
    projected and added to the hidden activation."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int,
                 spk_width: int = 0, emb_width: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = ChannelLayerNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = ChannelLayerNorm2d(out_ch)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.spk_proj = nn.Linear(spk_width, out_ch) if spk_width else None
        self.emo_proj = nn.Linear(emb_width, out_ch) if emb_width else None
        self.res = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, mask, t_emb, spk_emb=None, emo_emb=None):
        h = F.silu(self.norm1(self.conv1(x * mask)))
        cond = self.time_proj(t_emb)
        if self.spk_proj is not None:
            cond = cond + self.spk_proj(spk_emb)
        if self.emo_proj is not None:
            cond = cond + self.emo_proj(emo_emb)
        h = h + cond[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h * mask)))
        return (h + self.res(x * mask)) * mask


class ScoreNetwork(nn.Module):
    """U-shaped convolutional score estimator over (frames, bands) states.

    The state and the prior mean enter as two image channels. With
    ``per_block_conditioning`` (the default) the speaker and emotion
    embeddings are added inside every residual block; otherwise they are
    broadcast along time and concatenated to the input image, matching the
    plain conditioning baseline.
    """

    DOWN_FACTOR = 4  # two stride-2 stages; frames/bands are padded to this

    def __init__(self, bands: int, base: int = 32, spk_width: int = 32,
                 emb_width: int = 32, per_block_conditioning: bool = True):
        super().__init__()
        self.bands = bands
        self.per_block_conditioning = per_block_conditioning
        self.time_dim = base * 2
        self.time_mlp = nn.Sequential(
            nn.Linear(base, self.time_dim), nn.SiLU(),
            nn.Linear(self.time_dim, self.time_dim),
        )
        self.base = base
        in_ch = 2 if per_block_conditioning else 4
        if not per_block_conditioning:
            self.spk_to_band = nn.Linear(spk_width, bands)
            self.emo_to_band = nn.Linear(emb_width, bands)
        bw = (spk_width, emb_width) if per_block_conditioning else (0, 0)
        c0, c1 = base, base * 2
        self.rb_down0 = ResBlock(in_ch, c0, self.time_dim, *bw)
        self.down0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.rb_down1 = ResBlock(c0, c1, self.time_dim, *bw)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.rb_mid = ResBlock(c1, c1, self.time_dim, *bw)
        self.up1 = nn.ConvTranspose2d(c1, c1, 4, stride=2, padding=1)
        self.rb_up1 = ResBlock(c1 + c1, c0, self.time_dim, *bw)
        self.up0 = nn.ConvTranspose2d(c0, c0, 4, stride=2, padding=1)
        self.rb_up0 = ResBlock(c0 + c0, c0, self.time_dim, *bw)
        self.out_conv = nn.Conv2d(c0, 1, 1)

    @property
    def resblocks(self) -> list[ResBlock]:
        """All residual blocks in forward order (for conditioning probes)."""
        return [self.rb_down0, self.rb_down1, self.rb_mid, self.rb_up1, self.rb_up0]

    def forward(self, xt: torch.Tensor, mu: torch.Tensor, t: torch.Tensor,
                spk_emb: torch.Tensor, emo_emb: torch.Tensor,
                frame_lengths: torch.Tensor | None = None) -> torch.Tensor:
        """xt, mu: (B, T, bands); t: (B,); spk_emb/emo_emb: (B, width).
        Returns the estimated score, shaped like ``xt``."""
        if xt.shape != mu.shape:
            raise ValueError(f"state/prior shape mismatch: {tuple(xt.shape)} vs {tuple(mu.shape)}")
        if xt.shape[-1] != self.bands:
            raise ValueError(f"expected {self.bands} bands, got {xt.shape[-1]}")
        b, frames, bands = xt.shape
        t = torch.as_tensor(t, dtype=xt.dtype, device=xt.device).reshape(b)
        t_emb = self.time_mlp(sinusoidal_embedding(t * 1000.0, self.base))

        image = torch.stack([xt, mu], dim=1)  # (B, 2, T, F)
        if not self.per_block_conditioning:
            spk_map = self.spk_to_band(spk_emb)[:, None, None, :].expand(b, 1, frames, bands)
            emo_map = self.emo_to_band(emo_emb)[:, None, None, :].expand(b, 1, frames, bands)
            image = torch.cat([image, spk_map, emo_map], dim=1)

        if frame_lengths is None:
            frame_lengths = torch.full((b,), frames, device=xt.device, dtype=torch.long)
        idx = torch.arange(frames, device=xt.device)
        mask = (idx.unsqueeze(0) < frame_lengths.unsqueeze(1)).to(xt.dtype)
        mask = mask[:, None, :, None]  # (B, 1, T, 1)

        pad_t = (-frames) % self.DOWN_FACTOR
        pad_f = (-bands) % self.DOWN_FACTOR
        if pad_t or pad_f:
            image = F.pad(image, (0, pad_f, 0, pad_t))
            mask = F.pad(mask, (0, 0, 0, pad_t))

        cond = (spk_emb, emo_emb) if self.per_block_conditioning else (None, None)
        m0 = mask
        m1 = m0[:, :, ::2]
        m2 = m1[:, :, ::2]
        h0 = self.rb_down0(image, m0, t_emb, *cond)
        h1 = self.rb_down1(self.down0(h0) * m1, m1, t_emb, *cond)
        m = self.rb_mid(self.down1(h1) * m2, m2, t_emb, *cond)
        u = self.up1(m) * m1
        u = self.rb_up1(torch.cat([u, h1], dim=1), m1, t_emb, *cond)
        u = self.up0(u) * m0
        u = self.rb_up0(torch.cat([u, h0], dim=1), m0, t_emb, *cond)
        out = self.out_conv(u) * m0
        out = out.squeeze(1)
        if pad_t or pad_f:
            out = out[:, :frames, :bands]
        return out


def diffusion_loss(net: ScoreNetwork, schedule: DiffusionSchedule,
                   x0: torch.Tensor, mu: torch.Tensor,
                   spk_emb: torch.Tensor, emo_emb: torch.Tensor,
                   generator: torch.Generator | None = None,
                   frame_lengths: torch.Tensor | None = None,
                   t_floor: float = 1e-3,
                   score_fn=None) -> torch.Tensor:
    """Weighted score-matching loss.

    Per batch element: draw t ~ U(t_floor, 1), noise X0 to X_t with the
    closed-form marginal, and weight the squared error against the
    analytic conditional score by lam(t). The t_floor keeps lam(t) away
    from zero; the lam weight cancels the score's 1/lam growth so the loss
    stays finite as t approaches it.

    ``score_fn(xt, t)`` may replace the network (oracle checks).
    """
    if not 0 < t_floor < 1:
        raise ValueError(f"t_floor must be in (0, 1), got {t_floor}")
    b = x0.shape[0]
    t = t_floor + (1.0 - t_floor) * torch.rand(
        b, generator=generator, dtype=x0.dtype, device=x0.device
    )
    xt = forward_marginal(schedule, x0, mu, t, generator)
    target = true_conditional_score(schedule, xt, x0, mu, t)
    if score_fn is not None:
        est = score_fn(xt, t)
    else:
        est = net(xt, mu, t, spk_emb, emo_emb, frame_lengths)
    sq = (est - target) ** 2
    if frame_lengths is not None:
        idx = torch.arange(x0.shape[1], device=x0.device)
        valid = (idx.unsqueeze(0) < frame_lengths.unsqueeze(1)).to(sq.dtype)
        per_sample = (sq * valid[:, :, None]).sum(dim=(1, 2)) / (valid.sum(dim=1) * x0.shape[2])
    else:
        per_sample = sq.mean(dim=tuple(range(1, sq.ndim)))
    weight = schedule.lam(t)
    return (weight * per_sample).mean()


def ode_sample(score_fn, schedule: DiffusionSchedule, mu: torch.Tensor,
               n_steps: int, generator: torch.Generator | None = None,
               temperature: float = 1.0) -> torch.Tensor:
    """Explicit Euler integration of the probability-flow ODE from t=1 to 0,
    started at X_1 ~ N(mu, I/temperature)."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    x = mu + noise / math.sqrt(temperature)
    h = 1.0 / n_steps
    for i in range(n_steps):
        t = 1.0 - i * h
        beta = float(schedule.beta(t))
        dx = 0.5 * (mu - x - score_fn(x, t)) * beta * h
        x = x - dx
    return x


def sde_sample(score_fn, schedule: DiffusionSchedule, mu: torch.Tensor,
               n_steps: int, generator: torch.Generator | None = None,
               temperature: float = 1.0) -> torch.Tensor:
    """Euler-Maruyama integration of the reverse-time SDE from t=1 to 0."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    x = mu + noise / math.sqrt(temperature)
    h = 1.0 / n_steps
    for i in range(n_steps):
        t = 1.0 - i * h
        beta = float(schedule.beta(t))
        drift = (0.5 * (mu - x) - score_fn(x, t)) * beta * h
        z = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        x = x - drift + math.sqrt(beta * h) * z
    return x


def _conditioned_score_fn(net: ScoreNetwork, mu: torch.Tensor,
                          spk_emb: torch.Tensor, emo_emb: torch.Tensor):
    mu_b = mu.unsqueeze(0)
    spk_b = spk_emb.unsqueeze(0)
    emo_b = emo_emb.unsqueeze(0)

    def score_fn(x, t):
        t_b = torch.tensor([t], dtype=x.dtype, device=x.device)
        return net(x.unsqueeze(0), mu_b, t_b, spk_b, emo_b).squeeze(0)

    return score_fn


def reverse_ode_sample(net: ScoreNetwork, schedule: DiffusionSchedule,
                       mu: torch.Tensor, spk_emb: torch.Tensor, emo_emb: torch.Tensor,
                       n_steps: int, generator: torch.Generator | None = None,
                       temperature: float = 1.0) -> torch.Tensor:
    """Sample a (frames, bands) state with the trained network as score."""
    fn = _conditioned_score_fn(net, mu, spk_emb, emo_emb)
    return ode_sample(fn, schedule, mu, n_steps, generator, temperature)


def reverse_sde_sample(net: ScoreNetwork, schedule: DiffusionSchedule,
                       mu: torch.Tensor, spk_emb: torch.Tensor, emo_emb: torch.Tensor,
                       n_steps: int, generator: torch.Generator | None = None,
                       temperature: float = 1.0) -> torch.Tensor:
    fn = _conditioned_score_fn(net, mu, spk_emb, emo_emb)
    return sde_sample(fn, schedule, mu, n_steps, generator, temperature)
