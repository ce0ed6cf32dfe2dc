"""Objective terms: Wasserstein critic loss with gradient penalty, the
code-recovery (mutual-information) losses, and their weighted totals.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class TrainingDivergence(RuntimeError):
    """A loss term became non-finite; the trainer decides how to recover."""


@dataclass
class LossWeights:
    lambda_gp: float = 10.0
    lambda1: float = 1.0   # categorical code-recovery weight
    lambda2: float = 1.0   # continuous code-recovery weight
    supervised_cat: bool = False

    def __post_init__(self):
        if min(self.lambda_gp, self.lambda1, self.lambda2) < 0:
            raise ValueError("loss weights must be non-negative")


def critic_loss(d_fake, d_real):
    """mean(D(fake)) - mean(D(real)); the penalty is added separately."""
    if d_fake.numel() == 0 or d_real.numel() == 0:
        raise ValueError("empty score batch")
    return d_fake.mean() - d_real.mean()


def generator_adv_loss(d_fake):
    if d_fake.numel() == 0:
        raise ValueError("empty score batch")
    return -d_fake.mean()


def gradient_penalty(critic_fn, real, fake, rng, lambda_gp=10.0):
    """lambda * mean((||grad_x D(x_hat)||_2 - 1)^2) on per-sample mixes
    x_hat = eps*real + (1-eps)*fake, eps ~ U[0,1].  Only the critic score is
    penalized."""
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch {tuple(real.shape)} vs {tuple(fake.shape)}")
    eps_shape = (real.shape[0],) + (1,) * (real.ndim - 1)
    eps = torch.rand(eps_shape, generator=rng, dtype=real.dtype)
    x_hat = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    scores = critic_fn(x_hat)
    (grad,) = torch.autograd.grad(
        scores.sum(), x_hat, create_graph=True, allow_unused=True
    )
    if grad is None:  # critic ignores its input; gradient is identically zero
        grad = torch.zeros_like(x_hat, requires_grad=True)
    norms = grad.flatten(1).norm(2, dim=1)
    return lambda_gp * ((norms - 1.0) ** 2).mean()


def categorical_loss(c_onehot, cat_logits):
    """Batch-mean cross entropy between a one-hot code and the recovered
    logits, computed via log-softmax for stability."""
    log_p = F.log_softmax(cat_logits, dim=1)
    return -(c_onehot * log_p).sum(dim=1).mean()


def continuous_loss(c_col, con_pred):
    """Mean squared error over the 3 color dims, batch-averaged."""
    return F.mse_loss(con_pred, c_col)


def total_generator_loss(adv, cat, con, weights: LossWeights):
    return adv + weights.lambda1 * cat + weights.lambda2 * con


def total_discriminator_loss(critic_part, gp, cat, con, weights: LossWeights,
                             supervised=None):
    total = critic_part + gp + weights.lambda1 * cat + weights.lambda2 * con
    if weights.supervised_cat:
        if supervised is None:
            raise ValueError("supervised_cat is on but no supervised term given")
        total = total + supervised
    return total


def ensure_finite(name, value):
    if not bool(torch.isfinite(value.detach())):
        raise TrainingDivergence(f"{name} is not finite ({value.item()})")
    return value
