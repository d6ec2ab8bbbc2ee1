"""Adversarial objectives for the auto-encoding WGAN and its ablations.

All functions take critic scores as 1-D tensors (one scalar per sample) and
return scalar tensors that stay on the autograd graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

PROB_CLAMP = 1e-7


class DivergenceError(FloatingPointError):
    """A loss term became non-finite."""

    def __init__(self, term: str, step: int | None = None):
        self.term = term
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {term}{where}: training diverged")


@dataclass
class LossBundle:
    l_d: float = 0.0
    l_g: float = 0.0
    l_e: float = 0.0
    l_c: float = 0.0
    l_eg: float = 0.0
    gp_d: float = 0.0
    gp_c: float = 0.0
    recon_l1: float = 0.0

    def check_finite(self, step: int | None = None) -> None:
        for name, value in vars(self).items():
            if not math.isfinite(value):
                raise DivergenceError(name, step)


def interpolate(real: torch.Tensor, fake: torch.Tensor,
                generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """x_hat = eps * real + (1 - eps) * fake with one eps ~ U[0, 1] per sample."""
    if real.shape != fake.shape:
        raise ValueError(f"real/fake shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    eps = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=generator,
                     dtype=real.dtype, device=real.device)
    return eps * real + (1 - eps) * fake, eps.flatten()


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor,
                     fake: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean over samples of (||grad_x critic(x_hat)||_2 - 1)^2.

    The result is differentiable w.r.t. the critic's parameters (double backprop).
    """
    x_hat, _ = interpolate(real.detach(), fake.detach(), generator)
    x_hat.requires_grad_(True)
    scores = critic(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(2, dim=1)
    if not torch.isfinite(norms).all():
        raise DivergenceError("gradient penalty input gradient")
    return ((norms - 1) ** 2).mean()


def loss_discriminator(d_real, d_fake_rand, d_fake_rec, gp, lambda1: float):
    return d_fake_rec.mean() + d_fake_rand.mean() - 2 * d_real.mean() + lambda1 * gp


def reconstruction_l1(x_real: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    if x_real.shape != x_rec.shape:
        raise ValueError(f"reconstruction shape mismatch: {tuple(x_real.shape)} vs {tuple(x_rec.shape)}")
    return (x_real - x_rec).abs().mean()


def loss_generator(d_fake_rand, d_fake_rec, x_real, x_rec, lambda2: float):
    return -d_fake_rec.mean() - d_fake_rand.mean() + lambda2 * reconstruction_l1(x_real, x_rec)


def loss_code_discriminator(c_fake, c_real, gp, lambda1: float):
    # encoder codes are "fake", prior draws are "real"
    return c_fake.mean() - c_real.mean() + lambda1 * gp


def loss_encoder(c_fake):
    return -c_fake.mean()


def loss_vanilla_gan(d_real, d_fake):
    """Cross-entropy GAN pair on probability scores: (critic loss, generator loss)."""
    d_real = d_real.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    d_fake = d_fake.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    l_d = -(torch.log(d_real).mean() + torch.log1p(-d_fake).mean())
    return l_d, vanilla_generator_loss(d_fake)


def vanilla_generator_loss(d_fake):
    """Non-saturating generator objective, -mean(log d_fake)."""
    return -torch.log(d_fake.clamp(PROB_CLAMP, 1 - PROB_CLAMP)).mean()


def loss_generator_wgan_only(d_fake_rand):
    """Plain WGAN generator objective (no encoder, no reconstruction)."""
    return -d_fake_rand.mean()


def loss_discriminator_wgan_only(d_real, d_fake_rand, gp, lambda1: float):
    return d_fake_rand.mean() - d_real.mean() + lambda1 * gp
