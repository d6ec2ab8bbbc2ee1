"""The four networks of the auto-encoding WGAN: generator, image critic,
encoder and code critic.

Image critic and encoder share one topology: four 4x4x4 stride-2 convolutions
halve the volume down to V/16, then a stride-1 convolution covering the whole
remaining V/16 grid (4x4x4 at V=64) collapses it to 1x1x1. Batch norm sits
on layers 2-4 only. The generator mirrors this with resize-convolutions
(nearest-neighbour 2x upscale followed by a 3x3x3 convolution).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig

INIT_STD = 0.02


class VolumeCritic(nn.Module):
    """Five-layer 3D convolutional critic; ``out_features`` = 1 for the image
    discriminator, ``latent_size`` for the encoder."""

    def __init__(self, volume_size: int, channels=(64, 128, 256, 512),
                 out_features: int = 1, leaky_slope: float = 0.2):
        super().__init__()
        self.volume_size = volume_size
        self.out_features = out_features
        c = [1, *channels]
        self.convs = nn.ModuleList(nn.Conv3d(c[i], c[i + 1], 4, stride=2, padding=1)
                                   for i in range(4))
        self.norms = nn.ModuleList([nn.Identity()] + [nn.BatchNorm3d(ch) for ch in channels[1:]])
        self.head = nn.Conv3d(channels[-1], out_features, volume_size // 16, stride=1, padding=0)
        self.leaky_slope = leaky_slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x.unsqueeze(1)
        if tuple(x.shape[-3:]) != (self.volume_size,) * 3:
            raise ValueError(f"expected {self.volume_size}^3 volumes, got {tuple(x.shape[-3:])}")
        for conv, norm in zip(self.convs, self.norms):
            x = F.leaky_relu(norm(conv(x)), self.leaky_slope)
        out = self.head(x).flatten(1)
        return out[:, 0] if self.out_features == 1 else out


class Discriminator(VolumeCritic):
    def __init__(self, volume_size: int, channels=(64, 128, 256, 512), leaky_slope: float = 0.2):
        super().__init__(volume_size, channels, 1, leaky_slope)


class Encoder(VolumeCritic):
    def __init__(self, volume_size: int, latent_size: int, channels=(64, 128, 256, 512),
                 leaky_slope: float = 0.2):
        super().__init__(volume_size, channels, latent_size, leaky_slope)


def upsample_nearest(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="nearest")


class Generator(nn.Module):
    def __init__(self, volume_size: int, latent_size: int, base_channels: int = 512,
                 stage_channels=(512, 256, 128, 64)):
        super().__init__()
        self.volume_size = volume_size
        self.latent_size = latent_size
        self.base_channels = base_channels
        self.base_edge = volume_size // 16
        self.project = nn.Linear(latent_size, base_channels * self.base_edge ** 3)
        c = [base_channels, *stage_channels]
        self.convs = nn.ModuleList(nn.Conv3d(c[i], c[i + 1], 3, stride=1, padding=1)
                                   for i in range(4))
        self.norms = nn.ModuleList(nn.BatchNorm3d(ch) for ch in stage_channels)
        self.out = nn.Conv3d(stage_channels[-1], 1, 3, stride=1, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_size:
            raise ValueError(f"expected latent codes of size {self.latent_size}, got {tuple(z.shape)}")
        e = self.base_edge
        x = self.project(z).view(-1, self.base_channels, e, e, e)
        for conv, norm in zip(self.convs, self.norms):
            x = F.relu(norm(conv(upsample_nearest(x))))
        return torch.tanh(self.out(x))


class CodeDiscriminator(nn.Module):
    def __init__(self, latent_size: int, hidden: int = 4096, leaky_slope: float = 0.2):
        super().__init__()
        self.latent_size = latent_size
        self.fc1 = nn.Linear(latent_size, hidden)
        self.bn1 = nn.BatchNorm1d(hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.bn2 = nn.BatchNorm1d(hidden)
        self.fc3 = nn.Linear(hidden, 1)
        self.leaky_slope = leaky_slope

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_size:
            raise ValueError(f"expected latent codes of size {self.latent_size}, got {tuple(z.shape)}")
        h = F.leaky_relu(self.bn1(self.fc1(z)), self.leaky_slope)
        h = F.leaky_relu(self.bn2(self.fc2(h)), self.leaky_slope)
        return self.fc3(h)[:, 0]


class AlphaGAN(nn.Module):
    """Container for the four parameter collections."""

    NAMES = ("generator", "discriminator", "encoder", "code_discriminator")

    def __init__(self, mc: ModelConfig, tc: TrainConfig):
        super().__init__()
        V, L = tc.volume_size, tc.latent_size
        self.generator = Generator(V, L, mc.generator_channels, mc.generator_stage_channels)
        self.discriminator = Discriminator(V, mc.critic_channels, mc.leaky_slope)
        self.encoder = Encoder(V, L, mc.critic_channels, mc.leaky_slope)
        self.code_discriminator = CodeDiscriminator(L, mc.code_hidden, mc.leaky_slope)

    def nets(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in self.NAMES}


def reset_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Kernels/weights ~ N(0, 0.02^2), biases 0, batch-norm scale 1 and shift 0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=generator)
                m.bias.zero_()
        elif isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.reset_parameters()


def init_params(mc: ModelConfig, tc: TrainConfig, seed: int | None = None) -> AlphaGAN:
    model = AlphaGAN(mc, tc)
    gen = torch.Generator().manual_seed(tc.seed if seed is None else seed)
    for name in AlphaGAN.NAMES:
        reset_parameters(getattr(model, name), gen)
    return model
