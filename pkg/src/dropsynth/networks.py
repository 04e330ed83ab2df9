"""Progressively growing generator and critic.

Both networks are built stage by stage along the resolution ladder
(stage i produces / consumes 2**(i+1) px images). During growth the new
block is blended in linearly with weight alpha: at alpha=0 the network is
exactly the previous stage seen through up/down-sampling, at alpha=1 the
new block has fully taken over.

Convolutions use runtime weight scaling (equalized learning rate): weights
are initialized N(0, 1) and multiplied by sqrt(2 / fan_in) on every forward
pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .data import MAX_STAGE, stage_resolution

DEFAULT_CHANNELS = (512, 512, 512, 512, 256, 128, 64, 32, 16)


def pixel_norm(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Normalize each spatial position's channel vector to unit RMS."""
    return x / torch.sqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class PixelNorm(nn.Module):
    def __init__(self, eps: float = 1e-8):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return pixel_norm(x, self.eps)


class EqualizedConv2d(nn.Module):
    """Conv2d with N(0,1) weights scaled by sqrt(2 / fan_in) at runtime."""

    def __init__(self, in_ch, out_ch, kernel_size, padding=0, gain=2.0):
        super().__init__()
        self.weight = nn.Parameter(
            torch.randn(out_ch, in_ch, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.zeros(out_ch))
        fan_in = in_ch * kernel_size * kernel_size
        self.scale = (gain / fan_in) ** 0.5
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class EqualizedLinear(nn.Module):
    def __init__(self, in_features, out_features, gain=2.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.scale = (gain / in_features) ** 0.5

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


def minibatch_stddev(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Append one channel holding the batch-wide feature stddev mean."""
    std = torch.sqrt(x.var(dim=0, unbiased=False) + eps).mean()
    feat = std.expand(x.shape[0], 1, x.shape[2], x.shape[3])
    return torch.cat([x, feat], dim=1)


@dataclass
class GanConfig:
    """Architecture hyperparameters shared by generator and critic."""

    latent_dim: int = 512
    img_channels: int = 1
    max_stage: int = MAX_STAGE
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    use_minibatch_stddev: bool = True
    leaky_slope: float = 0.2
    pixelnorm_eps: float = 1e-8

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if not 1 <= self.max_stage <= MAX_STAGE:
            raise ValueError(f"max_stage must be in [1, {MAX_STAGE}]")
        if len(self.channels) < self.max_stage:
            raise ValueError("channel schedule shorter than max_stage")
        if any(a < b for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError("channel schedule must be non-increasing")

    def channels_at(self, stage: int) -> int:
        return self.channels[stage - 1]

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "img_channels": self.img_channels,
            "max_stage": self.max_stage,
            "channels": list(self.channels),
            "use_minibatch_stddev": self.use_minibatch_stddev,
            "leaky_slope": self.leaky_slope,
            "pixelnorm_eps": self.pixelnorm_eps,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GanConfig":
        return cls(**{**doc, "channels": tuple(doc["channels"])})


class _GenInitialBlock(nn.Module):
    """latent -> c1 x 4 x 4 features."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        c1 = cfg.channels_at(1)
        self.fc = EqualizedLinear(cfg.latent_dim, c1 * 16)
        self.conv = EqualizedConv2d(c1, c1, 3, padding=1)
        self.slope = cfg.leaky_slope
        self.eps = cfg.pixelnorm_eps

    def forward(self, z):
        x = pixel_norm(z.unsqueeze(-1).unsqueeze(-1), self.eps).squeeze(-1).squeeze(-1)
        x = self.fc(x).view(z.shape[0], -1, 4, 4)
        x = pixel_norm(F.leaky_relu(x, self.slope), self.eps)
        x = pixel_norm(F.leaky_relu(self.conv(x), self.slope), self.eps)
        return x


class _GenBlock(nn.Module):
    """2x nearest upsample followed by two 3x3 convolutions."""

    def __init__(self, in_ch, out_ch, cfg: GanConfig):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = EqualizedConv2d(out_ch, out_ch, 3, padding=1)
        self.slope = cfg.leaky_slope
        self.eps = cfg.pixelnorm_eps

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = pixel_norm(F.leaky_relu(self.conv1(x), self.slope), self.eps)
        x = pixel_norm(F.leaky_relu(self.conv2(x), self.slope), self.eps)
        return x


class Generator(nn.Module):
    """Latent vector to image at the active stage's resolution.

    Output is linear (unclamped); clamping to [-1, 1] happens only on
    image export.
    """

    def __init__(self, cfg: GanConfig, active_stage: int = 1):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList([_GenInitialBlock(cfg)])
        self.to_rgb = nn.ModuleList(
            [EqualizedConv2d(cfg.channels_at(1), cfg.img_channels, 1, gain=1.0)]
        )
        self.active_stage = 1
        while self.active_stage < active_stage:
            self.grow()

    def grow(self) -> None:
        """Append the next stage's block; previous parameters are untouched."""
        new_stage = self.active_stage + 1
        if new_stage > self.cfg.max_stage:
            raise ValueError(
                f"cannot grow beyond max stage {self.cfg.max_stage}"
            )
        in_ch = self.cfg.channels_at(self.active_stage)
        out_ch = self.cfg.channels_at(new_stage)
        self.blocks.append(_GenBlock(in_ch, out_ch, self.cfg))
        self.to_rgb.append(
            EqualizedConv2d(out_ch, self.cfg.img_channels, 1, gain=1.0)
        )
        self.active_stage = new_stage

    def forward(self, z: torch.Tensor, stage: int | None = None, alpha: float = 1.0):
        stage = self.active_stage if stage is None else stage
        if stage > self.active_stage:
            raise ValueError(f"stage {stage} beyond trained depth {self.active_stage}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha {alpha} outside [0, 1]")
        x = self.blocks[0](z)
        for s in range(2, stage + 1):
            prev = x
            x = self.blocks[s - 1](x)
        out = self.to_rgb[stage - 1](x)
        if stage > 1 and alpha < 1.0:
            skip = F.interpolate(
                self.to_rgb[stage - 2](prev), scale_factor=2, mode="nearest"
            )
            out = alpha * out + (1.0 - alpha) * skip
        return out


class _DiscBlock(nn.Module):
    """Two 3x3 convolutions followed by 2x average-pool downsampling."""

    def __init__(self, in_ch, out_ch, cfg: GanConfig):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = EqualizedConv2d(in_ch, out_ch, 3, padding=1)
        self.slope = cfg.leaky_slope

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), self.slope)
        x = F.leaky_relu(self.conv2(x), self.slope)
        return F.avg_pool2d(x, 2)


class _DiscFinalBlock(nn.Module):
    """4x4 stage head: 3x3 conv, 4x4 conv, fully connected score."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        c1 = cfg.channels_at(1)
        extra = 1 if cfg.use_minibatch_stddev else 0
        self.conv1 = EqualizedConv2d(c1 + extra, c1, 3, padding=1)
        self.conv2 = EqualizedConv2d(c1, c1, 4)
        self.fc = EqualizedLinear(c1, 1, gain=1.0)
        self.slope = cfg.leaky_slope
        self.use_stddev = cfg.use_minibatch_stddev

    def forward(self, x):
        if self.use_stddev:
            x = minibatch_stddev(x)
        x = F.leaky_relu(self.conv1(x), self.slope)
        x = F.leaky_relu(self.conv2(x), self.slope)
        return self.fc(x.flatten(1)).squeeze(1)


class Discriminator(nn.Module):
    """Image at the active stage's resolution to an unbounded critic score."""

    def __init__(self, cfg: GanConfig, active_stage: int = 1):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList([_DiscFinalBlock(cfg)])
        self.from_rgb = nn.ModuleList(
            [EqualizedConv2d(cfg.img_channels, cfg.channels_at(1), 1)]
        )
        self.active_stage = 1
        while self.active_stage < active_stage:
            self.grow()

    def grow(self) -> None:
        new_stage = self.active_stage + 1
        if new_stage > self.cfg.max_stage:
            raise ValueError(f"cannot grow beyond max stage {self.cfg.max_stage}")
        in_ch = self.cfg.channels_at(new_stage)
        out_ch = self.cfg.channels_at(self.active_stage)
        self.blocks.append(_DiscBlock(in_ch, out_ch, self.cfg))
        self.from_rgb.append(EqualizedConv2d(self.cfg.img_channels, in_ch, 1))
        self.active_stage = new_stage

    def forward(self, images: torch.Tensor, stage: int | None = None, alpha: float = 1.0):
        stage = self.active_stage if stage is None else stage
        if stage > self.active_stage:
            raise ValueError(f"stage {stage} beyond trained depth {self.active_stage}")
        res = stage_resolution(stage)
        if images.shape[-1] != res or images.shape[-2] != res:
            raise ValueError(
                f"expected {res}x{res} input at stage {stage}, "
                f"got {images.shape[-2]}x{images.shape[-1]}"
            )
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha {alpha} outside [0, 1]")
        x = F.leaky_relu(self.from_rgb[stage - 1](images), self.cfg.leaky_slope)
        if stage > 1:
            x = self.blocks[stage - 1](x)
            if alpha < 1.0:
                down = F.avg_pool2d(images, 2)
                skip = F.leaky_relu(
                    self.from_rgb[stage - 2](down), self.cfg.leaky_slope
                )
                x = alpha * x + (1.0 - alpha) * skip
            for s in range(stage - 1, 1, -1):
                x = self.blocks[s - 1](x)
        return self.blocks[0](x)
