"""Conditional-GAN losses with the lambda-weighted L1 content term.

All adversarial terms are computed from logits with the stable
``binary_cross_entropy_with_logits`` formulation and averaged over patches.
Inputs may be numpy arrays or tensors; results are 0-d tensors so they can be
differentiated during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .colorspace import ContractError

DEFAULT_LAMBDA = 100.0


class NonFiniteError(FloatingPointError):
    pass


def _tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.array(x, dtype=np.float64))


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    adversarial: float
    content_l1: float
    lambda_weight: float = DEFAULT_LAMBDA


def discriminator_loss(real_logits, fake_logits) -> torch.Tensor:
    """0.5 * [BCE(real -> 1) + BCE(fake -> 0)], each averaged over patches."""
    real, fake = _tensor(real_logits), _tensor(fake_logits)
    _same_shape(real, fake, "discriminator_loss")
    _check_finite("real_logits", real)
    _check_finite("fake_logits", fake)
    loss_real = F.binary_cross_entropy_with_logits(real, torch.ones_like(real))
    loss_fake = F.binary_cross_entropy_with_logits(fake, torch.zeros_like(fake))
    return 0.5 * (loss_real + loss_fake)


def generator_adversarial_loss(fake_logits) -> torch.Tensor:
    """Non-saturating -log D(x, G(x)) averaged over patches."""
    fake = _tensor(fake_logits)
    _check_finite("fake_logits", fake)
    return F.binary_cross_entropy_with_logits(fake, torch.ones_like(fake))


def content_l1(pred, target) -> torch.Tensor:
    p, t = _tensor(pred), _tensor(target)
    _same_shape(p, t, "content_l1")
    return (p - t).abs().mean()


def generator_objective(
    fake_logits, pred, target, lambda_weight: float = DEFAULT_LAMBDA
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable (total, adversarial, l1) terms of the generator loss."""
    if lambda_weight < 0:
        raise ContractError(f"lambda_weight must be >= 0, got {lambda_weight}")
    adv = generator_adversarial_loss(fake_logits)
    l1 = content_l1(pred, target)
    return adv + lambda_weight * l1, adv, l1


def generator_loss(
    fake_logits, pred, target, lambda_weight: float = DEFAULT_LAMBDA
) -> LossBreakdown:
    _, adv, l1 = generator_objective(fake_logits, pred, target, lambda_weight)
    return breakdown(adv.item(), l1.item(), lambda_weight)


def breakdown(adv, l1, lambda_weight: float) -> LossBreakdown:
    # recombine in float64 so total == adversarial + lambda * l1 exactly
    adv_f, l1_f, lam = float(adv), float(l1), float(lambda_weight)
    return LossBreakdown(adv_f + lam * l1_f, adv_f, l1_f, lam)
