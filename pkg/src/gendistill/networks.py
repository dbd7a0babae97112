"""Desk-scale networks for adversarial diffusion distillation: a class-conditional
denoiser (teacher and student share it), a frozen convolutional feature
extractor and the learnable projection discriminator heads."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, _coef


def timestep_embedding(t: torch.Tensor, dim: int, t_max: int) -> torch.Tensor:
    t = t.float() * (1000.0 / max(t_max, 1))
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Denoiser(nn.Module):
    """Class-conditional v-prediction network.

    Class index ``num_classes`` is the null (unconditional) token. The
    denoised estimate is ``x0 = alpha_t * x_t - sigma_t * v``, clamped to
    [-1, 1].
    """

    def __init__(self, channels: int = 3, num_classes: int = 2, width: int = 64, num_blocks: int = 3,
                 emb_dim: int = 128, t_max: int = 999):
        super().__init__()
        self.config = dict(channels=channels, num_classes=num_classes, width=width,
                           num_blocks=num_blocks, emb_dim=emb_dim, t_max=t_max)
        self.num_classes = num_classes
        self.t_max = t_max
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.class_emb = nn.Embedding(num_classes + 1, emb_dim)
        self.inp = nn.Conv2d(channels, width, 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(width, emb_dim) for _ in range(num_blocks))
        self.out_norm = nn.GroupNorm(_groups(width), width)
        self.out = nn.Conv2d(width, channels, 3, padding=1)
        self.calls = 0

    @property
    def null_class(self) -> int:
        return self.num_classes

    def forward(self, x_t: torch.Tensor, t, y: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        n = x_t.shape[0]
        if not isinstance(t, torch.Tensor) or t.dim() == 0:
            t = torch.full((n,), int(t), dtype=torch.long, device=x_t.device)
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim, self.t_max)) + self.class_emb(y)
        emb = F.silu(emb)
        h = self.inp(x_t)
        for block in self.blocks:
            h = block(h, emb)
        return self.out(F.silu(self.out_norm(h)))

    def predict_x0(self, x_t: torch.Tensor, t, y: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
        v = self(x_t, t, y)
        x0 = _coef(schedule.alphas, t, x_t) * x_t - _coef(schedule.sigmas, t, x_t) * v
        return x0.clamp(-1.0, 1.0)


class FeatureExtractor(nn.Module):
    """Small convolutional encoder exposing one feature map per block.

    Stands in for a pretrained ViT; it is pretrained as a classifier and then
    frozen.
    """

    def __init__(self, channels: int = 3, widths: tuple[int, ...] = (32, 64), num_classes: int = 2):
        super().__init__()
        self.config = dict(channels=channels, widths=tuple(widths), num_classes=num_classes)
        layers = []
        c = channels
        for w in widths:
            layers.append(nn.Sequential(
                nn.Conv2d(c, w, 3, padding=1), nn.GroupNorm(_groups(w), w), nn.SiLU(),
                nn.Conv2d(w, w, 3, padding=1), nn.SiLU(), nn.AvgPool2d(2, ceil_mode=True),
            ))
            c = w
        self.stages = nn.ModuleList(layers)
        self.classifier = nn.Linear(c, num_classes)

    @property
    def tap_channels(self) -> tuple[int, ...]:
        return tuple(self.config["widths"])

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps

    def forward(self, x):
        return self.classifier(self.features(x)[-1].mean(dim=(2, 3)))

    def freeze(self) -> "FeatureExtractor":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


class DiscriminatorHead(nn.Module):
    """Scalar critic on one feature tap with a class projection term."""

    def __init__(self, in_ch: int, num_classes: int, hidden: int = 64):
        super().__init__()
        self.proj = nn.Sequential(nn.Conv2d(in_ch, hidden, 1), nn.LeakyReLU(0.2),
                                  nn.Conv2d(hidden, hidden, 3, padding=1), nn.LeakyReLU(0.2))
        self.linear = nn.Linear(hidden, 1)
        self.embed = nn.Embedding(num_classes, hidden)
        nn.init.normal_(self.embed.weight, std=0.02)

    def forward(self, feat, y):
        h = self.proj(feat).mean(dim=(2, 3))
        return self.linear(h).squeeze(1) + (self.embed(y) * h).sum(dim=1)


class DiscriminatorStack(nn.Module):
    """Frozen extractor ``F_k`` feeding learnable heads ``D_k``; returns ``[N, K]``."""

    def __init__(self, extractor: FeatureExtractor, num_classes: int, hidden: int = 64):
        super().__init__()
        self.extractor = extractor.freeze()
        self.heads = nn.ModuleList(DiscriminatorHead(c, num_classes, hidden) for c in extractor.tap_channels)

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def head_parameters(self):
        return self.heads.parameters()

    def train(self, mode: bool = True):
        super().train(mode)
        self.extractor.eval()
        return self

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        feats = self.extractor.features(x)
        return torch.stack([head(f, y) for head, f in zip(self.heads, feats)], dim=1)
