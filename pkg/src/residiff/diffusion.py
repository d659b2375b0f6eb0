"""Residual diffusion: forward noising, noise-prediction loss, ancestral sampling.

The diffusion data domain is the residual between a ground-truth mask and
a baseline prediction, with values in [-1, 1].  The noise model is
conditioned on the input image and the baseline mask, concatenated as
extra input channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .nets import EncoderDecoder, timestep_embedding
from .schedule import NoiseSchedule, alpha_bar_at, posterior_variance_at

MEAN_FORMS = ("standard", "literal")


@dataclass
class ConditioningBundle:
    """Conditioning inputs for the noise model: image and baseline mask.

    Tensors are (C, H, W) or batched (N, C, H, W); spatial extents must
    match and the mask must hold probabilities.
    """

    image: torch.Tensor
    initial_mask: torch.Tensor

    def __post_init__(self):
        if self.image.shape[-2:] != self.initial_mask.shape[-2:]:
            raise ValueError(
                f"spatial mismatch: image {tuple(self.image.shape)} vs "
                f"mask {tuple(self.initial_mask.shape)}"
            )
        if self.initial_mask.min() < 0 or self.initial_mask.max() > 1:
            raise ValueError("initial_mask entries must lie in [0, 1]")


@dataclass(frozen=True)
class PredictorConfig:
    mask_channels: int = 1
    image_channels: int = 2
    depth: int = 3
    base_width: int = 16
    condition_on_image: bool = True
    condition_on_mask: bool = True
    hw: int | None = None

    def validate(self) -> None:
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be >= 1")
        if self.mask_channels < 1 or self.image_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.hw is not None:
            factor = 2 ** self.depth
            if self.hw % factor or self.hw < factor:
                raise ValueError(
                    f"depth {self.depth} exhausts a {self.hw}x{self.hw} input "
                    f"(needs multiples of {factor})"
                )

    @property
    def in_channels(self) -> int:
        ch = self.mask_channels
        if self.condition_on_image:
            ch += self.image_channels
        if self.condition_on_mask:
            ch += self.mask_channels
        return ch


class NoisePredictor(nn.Module):
    """Conditional noise model: (e_t, t, conditioning) -> predicted noise.

    Output always has e_t's shape; deterministic given parameters and inputs.
    """

    def __init__(self, config: PredictorConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.temb_dim = 4 * config.base_width
        self.time_mlp = nn.Sequential(
            nn.Linear(self.temb_dim, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim)
        )
        self.net = EncoderDecoder(
            config.in_channels, config.mask_channels, config.depth, config.base_width, temb_dim=self.temb_dim
        )

    def forward(self, e_t: torch.Tensor, t, cond: ConditioningBundle) -> torch.Tensor:
        squeeze = e_t.dim() == 3
        if squeeze:
            e_t = e_t.unsqueeze(0)
        parts = [e_t]
        if self.config.condition_on_image:
            image = cond.image if cond.image.dim() == 4 else cond.image.unsqueeze(0)
            parts.append(image.expand(e_t.shape[0], -1, -1, -1).to(e_t.dtype))
        if self.config.condition_on_mask:
            mask = cond.initial_mask if cond.initial_mask.dim() == 4 else cond.initial_mask.unsqueeze(0)
            parts.append(mask.expand(e_t.shape[0], -1, -1, -1).to(e_t.dtype))
        x = torch.cat(parts, dim=1)

        if isinstance(t, (int, np.integer)):
            t = torch.full((e_t.shape[0],), int(t), dtype=torch.long)
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(e_t.dtype))
        out = self.net(x, temb)
        return out.squeeze(0) if squeeze else out


def build_predictor(config: PredictorConfig, seed: int) -> NoisePredictor:
    """Construct a noise model with seed-determined parameters."""
    torch.manual_seed(seed)
    model = NoisePredictor(config)
    model.eval()
    return model


def compute_residual(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Elementwise difference ground truth minus prediction, in [-1, 1]."""
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    for name, m in (("y", y), ("y_hat", y_hat)):
        if m.min() < 0 or m.max() > 1:
            raise ValueError(f"{name} entries must lie in [0, 1]")
    return y - y_hat


def forward_diffuse(e0: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal sqrt(abar_t) * e0 + sqrt(1 - abar_t) * noise."""
    if noise.shape != e0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != residual shape {tuple(e0.shape)}")
    abar = alpha_bar_at(schedule, t)
    return np.sqrt(abar) * e0 + np.sqrt(1.0 - abar) * noise


def diffusion_loss(
    predictor,
    e0: torch.Tensor,
    cond: ConditioningBundle,
    schedule: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction MSE for one uniformly drawn (t, noise) pair.

    The expectation over timesteps and noise is realized by averaging
    across calls (batches and steps).
    """
    t = int(torch.randint(1, schedule.T + 1, (1,), generator=rng).item())
    noise = torch.randn(e0.shape, generator=rng, dtype=e0.dtype)
    e_t = forward_diffuse(e0, t, noise, schedule)
    pred = predictor(e_t, t, cond)
    if pred.shape != e0.shape:
        raise ValueError(f"predictor output shape {tuple(pred.shape)} != residual shape {tuple(e0.shape)}")
    return ((noise - pred) ** 2).mean()


def diffusion_loss_batch(
    predictor,
    e0: torch.Tensor,
    cond: ConditioningBundle,
    schedule: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """Batched noise-prediction MSE with an independent timestep per sample."""
    n = e0.shape[0]
    t = torch.randint(1, schedule.T + 1, (n,), generator=rng)
    noise = torch.randn(e0.shape, generator=rng, dtype=e0.dtype)
    abar = torch.from_numpy(schedule.alpha_bars[(t - 1).numpy()]).to(e0.dtype)
    abar = abar.reshape(n, 1, 1, 1)
    e_t = torch.sqrt(abar) * e0 + torch.sqrt(1.0 - abar) * noise
    pred = predictor(e_t, t, cond)
    return ((noise - pred) ** 2).mean()


def denoise_step(
    e_t: torch.Tensor,
    t: int,
    predictor,
    cond: ConditioningBundle,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    mean_form: str = "standard",
) -> torch.Tensor:
    """One ancestral sampling step from e_t to e_{t-1}.

    The mean uses the predicted noise scaled by beta_t / sqrt(1 - abar_t)
    ("standard") or by beta_t alone ("literal"); both share the 1/sqrt(alpha_t)
    prefactor.  Gaussian noise with the posterior variance is added except
    at t = 1, where the step is deterministic.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")
    if mean_form not in MEAN_FORMS:
        raise ValueError(f"mean_form must be one of {MEAN_FORMS}, got {mean_form!r}")

    beta = float(schedule.betas[t - 1])
    alpha = float(schedule.alphas[t - 1])
    abar = alpha_bar_at(schedule, t)
    eps_hat = predictor(e_t, t, cond)

    if mean_form == "standard":
        coeff = beta / np.sqrt(1.0 - abar)
    else:
        coeff = beta
    mean = (e_t - coeff * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    z = torch.randn(e_t.shape, generator=rng, dtype=e_t.dtype)
    return mean + np.sqrt(posterior_variance_at(schedule, t)) * z


def strided_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending timestep subsequence of 1..T with `steps` entries, evenly strided."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    ts = np.rint(np.linspace(1, T, steps)).astype(np.int64)
    return ts[::-1].copy()


def refine(
    y_hat0: torch.Tensor,
    x: torch.Tensor,
    predictor,
    schedule: NoiseSchedule,
    steps: int,
    rng: torch.Generator,
    mean_form: str = "standard",
) -> torch.Tensor:
    """Sample a residual estimate by reverse diffusion and add it to the baseline.

    Starts from standard-normal noise and denoises along an evenly strided
    timestep subsequence (the full 1..T when steps == T).  steps = 0 returns
    the baseline unchanged.  The result is clipped to [0, 1].
    """
    if steps < 0 or steps > schedule.T:
        raise ValueError(f"steps must lie in [0, {schedule.T}], got {steps}")
    if y_hat0.min() < 0 or y_hat0.max() > 1:
        raise ValueError("y_hat0 entries must lie in [0, 1]")
    if steps == 0:
        return y_hat0.clone()

    cond = ConditioningBundle(image=x, initial_mask=y_hat0)
    with torch.no_grad():
        e = torch.randn(y_hat0.shape, generator=rng, dtype=y_hat0.dtype)
        for t in strided_timesteps(schedule.T, steps):
            e = denoise_step(e, int(t), predictor, cond, schedule, rng, mean_form)
        return torch.clamp(y_hat0 + e, 0.0, 1.0)
