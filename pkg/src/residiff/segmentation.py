"""Baseline segmentation network, the hybrid Dice-CE loss, and epoch training."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import NumericalError
from .nets import EncoderDecoder

CLAMP_EPS = 1e-7
DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class SegConfig:
    in_channels: int = 2
    out_channels: int = 1
    depth: int = 3
    base_width: int = 16
    hw: int | None = None  # when known, depth is validated against it at build time

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.hw is not None:
            factor = 2 ** self.depth
            if self.hw % factor or self.hw < factor:
                raise ValueError(
                    f"depth {self.depth} exhausts a {self.hw}x{self.hw} input "
                    f"(needs multiples of {factor})"
                )


class SegmentationModel(nn.Module):
    """Encoder-decoder with a sigmoid head producing per-pixel probabilities."""

    def __init__(self, config: SegConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.net = EncoderDecoder(config.in_channels, config.out_channels, config.depth, config.base_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        out = torch.sigmoid(self.net(x))
        return out.squeeze(0) if squeeze else out


def build_model(config: SegConfig, seed: int) -> SegmentationModel:
    """Construct a model with parameters deterministically initialized from the seed."""
    torch.manual_seed(seed)
    model = SegmentationModel(config)
    model.eval()
    return model


def predict(model: SegmentationModel, x: torch.Tensor) -> torch.Tensor:
    """Probabilities in [0, 1] with the input's spatial extent; pure inference."""
    model.eval()
    with torch.no_grad():
        return model(x)


def _flat_per_channel(x: torch.Tensor) -> torch.Tensor:
    # (C,H,W) or (N,C,H,W) -> (N*C, H*W)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    n, c = x.shape[0], x.shape[1]
    return x.reshape(n * c, -1)


def dice_ce_loss(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Soft Dice (squared denominator) plus binary cross-entropy.

    The Dice ratio is computed per channel and averaged; cross-entropy is
    averaged over all elements.  Predictions are clamped away from {0, 1}
    before the logs.  Multi-channel masks are treated as independent
    regions.
    """
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    if not torch.all((g == 0) | (g == 1)):
        raise ValueError("ground-truth mask must be exactly binary")

    p = torch.clamp(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pf = _flat_per_channel(p)
    gf = _flat_per_channel(g)

    inter = (pf * gf).sum(dim=1)
    denom = (pf * pf).sum(dim=1) + (gf * gf).sum(dim=1)
    dice_term = 1.0 - ((2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)).mean()

    ce_term = -(gf * torch.log(pf) + (1.0 - gf) * torch.log(1.0 - pf)).mean()
    return dice_term + ce_term


def total_loss(l_seg: float, l_diff: float, lambda_weight: float) -> float:
    """Combined objective l_seg + lambda * l_diff."""
    if lambda_weight < 0:
        raise ValueError(f"lambda_weight must be >= 0, got {lambda_weight}")
    return l_seg + lambda_weight * l_diff


def train_epoch(
    model: SegmentationModel,
    volumes: torch.Tensor,
    masks: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    batch_size: int,
    rng: torch.Generator,
    lr: float | None = None,
) -> float:
    """One pass of shuffled mini-batch gradient steps; returns the mean batch loss."""
    n = volumes.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr

    model.train()
    order = torch.randperm(n, generator=rng)
    losses = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        optimizer.zero_grad()
        loss = dice_ce_loss(model(volumes[idx]), masks[idx])
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite segmentation loss at batch {start // batch_size}")
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    model.eval()
    return sum(losses) / len(losses)
