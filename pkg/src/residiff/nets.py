"""Small encoder-decoder conv nets shared by the segmentation and noise models."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def _norm(channels: int) -> nn.Module:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = t.float().reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb.to(t.device)


class DoubleConv(nn.Module):
    """Two 3x3 conv + norm + SiLU stages, with an optional additive time bias."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.act = nn.SiLU()
        self.time_proj = nn.Linear(temb_dim, out_ch) if temb_dim is not None else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(temb)[:, :, None, None]
        return self.act(self.norm2(self.conv2(h)))


class EncoderDecoder(nn.Module):
    """U-shaped trunk: `depth` encoder stages, a bottleneck, mirrored decoder.

    Each encoder stage halves the spatial extent, so inputs must have
    height and width divisible by 2**depth.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        depth: int,
        base_width: int,
        temb_dim: int | None = None,
    ):
        super().__init__()
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        if base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {base_width}")
        widths = [base_width * (2 ** i) for i in range(depth)]

        self.depth = depth
        self.enc = nn.ModuleList()
        ch = in_channels
        for w in widths:
            self.enc.append(DoubleConv(ch, w, temb_dim))
            ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = DoubleConv(widths[-1], widths[-1] * 2, temb_dim)

        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        ch = widths[-1] * 2
        for w in reversed(widths):
            self.up.append(
                nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, w, 3, padding=1))
            )
            self.dec.append(DoubleConv(2 * w, w, temb_dim))
            ch = w
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h, w = x.shape[-2], x.shape[-1]
        factor = 2 ** self.depth
        if h % factor or w % factor or h < factor or w < factor:
            raise ValueError(
                f"input extent {h}x{w} incompatible with depth {self.depth}: "
                f"needs multiples of {factor}"
            )
        skips = []
        for block in self.enc:
            x = block(x, temb)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x, temb)
        for lift, block, skip in zip(self.up, self.dec, reversed(skips)):
            x = lift(x)
            x = block(torch.cat([x, skip], dim=1), temb)
        return self.head(x)
