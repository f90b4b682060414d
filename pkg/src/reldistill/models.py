"""Desk-scale networks: a small U-Net denoiser and a convolutional classifier.

Both keep their constructor arguments in ``self.spec`` so checkpoints can
rebuild them without pickling code.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedule import COSINE, NoiseSchedule


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of continuous times in [0, 1] (scaled by 1000)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = 1000.0 * t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.drop = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(self.drop(F.silu(self.norm2(h))))
        return h + self.skip(x)


class UNet(nn.Module):
    """Time (and optionally class) conditioned U-Net returning a clean-image estimate.

    The network body predicts ``v = alpha * eps - sigma * x`` and the forward
    pass converts it to ``x = alpha * z - sigma * v``, which stays well
    conditioned at both ends of the time range.

    Args:
        in_channels: image channels.
        base_channels: channels at full resolution.
        channel_mults: per-level multipliers; each level after the first halves resolution.
        num_res_blocks: residual blocks per level.
        num_classes: enables class conditioning when > 0.
        dropout: dropout inside residual blocks.
    """

    def __init__(self, in_channels: int = 1, base_channels: int = 32,
                 channel_mults: Sequence[int] = (1, 2), num_res_blocks: int = 1,
                 num_classes: int = 0, dropout: float = 0.0, image_size: int = 16):
        super().__init__()
        self.spec = dict(in_channels=in_channels, base_channels=base_channels,
                         channel_mults=list(channel_mults), num_res_blocks=num_res_blocks,
                         num_classes=num_classes, dropout=dropout, image_size=image_size)
        self.schedule: NoiseSchedule = COSINE
        self.image_size = image_size
        self.in_channels = in_channels
        emb_dim = 4 * base_channels
        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.base_channels = base_channels
        self.num_classes = num_classes
        if num_classes > 0:
            self.label_emb = nn.Embedding(num_classes, emb_dim)

        self.stem = nn.Conv2d(in_channels, base_channels, 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        chans = [base_channels]
        ch = base_channels
        for level, mult in enumerate(channel_mults):
            blocks = nn.ModuleList()
            for _ in range(num_res_blocks):
                blocks.append(ResBlock(ch, base_channels * mult, emb_dim, dropout))
                ch = base_channels * mult
                chans.append(ch)
            self.down.append(blocks)
            if level < len(channel_mults) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                chans.append(ch)
        self.mid = nn.ModuleList([ResBlock(ch, ch, emb_dim, dropout), ResBlock(ch, ch, emb_dim, dropout)])

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level, mult in reversed(list(enumerate(channel_mults))):
            blocks = nn.ModuleList()
            for _ in range(num_res_blocks + 1):
                blocks.append(ResBlock(ch + chans.pop(), base_channels * mult, emb_dim, dropout))
                ch = base_channels * mult
            self.up.append(blocks)
            if level > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
        self.out_norm = _norm(ch)
        self.out = nn.Conv2d(ch, in_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def _body(self, z, t, y):
        emb = self.time_mlp(timestep_embedding(t, self.base_channels))
        if self.num_classes > 0 and y is not None:
            emb = emb + self.label_emb(y)
        h = self.stem(z)
        hs = [h]
        for level, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, emb)
                hs.append(h)
            if level < len(self.downsample):
                h = self.downsample[level](h)
                hs.append(h)
        for block in self.mid:
            h = block(h, emb)
        for level, blocks in enumerate(self.up):
            for block in blocks:
                h = block(torch.cat([h, hs.pop()], dim=1), emb)
            if level < len(self.upsample):
                h = self.upsample[level](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))

    def forward(self, z: torch.Tensor, t: torch.Tensor, y: Optional[torch.Tensor] = None) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        v = self._body(z, t, y)
        shape = (-1,) + (1,) * (z.ndim - 1)
        alpha = self.schedule.alpha(t).reshape(shape)
        sigma = self.schedule.sigma(t).reshape(shape)
        return alpha * z - sigma * v


class ConvClassifier(nn.Module):
    """Small convolutional classifier: conv trunk, global average pool, linear head.

    ``trunk(x)`` is the last convolutional feature map used for relational
    distillation; its spatial mean feeds the linear layer.
    """

    def __init__(self, in_channels: int = 1, widths: Sequence[int] = (16, 32, 64),
                 num_classes: int = 10, image_size: int = 16):
        super().__init__()
        self.spec = dict(in_channels=in_channels, widths=list(widths),
                         num_classes=num_classes, image_size=image_size)
        self.in_channels = in_channels
        self.image_size = image_size
        layers: list[nn.Module] = []
        ch = in_channels
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            layers += [nn.Conv2d(ch, w, 3, stride=stride, padding=1), nn.ReLU(),
                       nn.Conv2d(w, w, 3, padding=1), nn.ReLU()]
            ch = w
        self.trunk = nn.Sequential(*layers)
        self.fc = nn.Linear(ch, num_classes)
        self.feature_dim = ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.trunk(x).mean(dim=(2, 3)))


def build_model(kind: str, spec: dict) -> nn.Module:
    if kind == "unet":
        return UNet(**spec)
    if kind == "classifier":
        return ConvClassifier(**spec)
    raise ValueError(f"unknown model kind: {kind!r}")
