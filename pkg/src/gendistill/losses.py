"""Adversarial-diffusion-distillation objectives.

All losses are batch-mean Monte Carlo estimates. Discriminator outputs are
``[N, K]`` tensors (one column per head) and are summed over heads inside
each sample before averaging over the batch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from .core import ImageBatch
from .diffusion import NoiseSchedule

DEFAULT_R1_GAMMA = 1e-5


class Weighting(str, enum.Enum):
    EXPONENTIAL = "exponential"
    SDS = "sds"


@dataclass(frozen=True)
class WeightingScheme:
    """Distillation weight ``c(t)``.

    ``exponential``: ``c(t) = alpha_t``.
    ``sds``: ``c(t) = w(t) * alpha_t**2 / (2 * sigma_t)`` with ``w(t) = sigma_t**2``,
    so that the gradient of ``c(t) * ||x - sg(x_teacher)||^2`` equals the score
    distillation gradient ``w(t) (eps_hat - eps) dx_t/dx``. ``params["scale"]``
    multiplies either weight.
    """

    kind: Weighting = Weighting.EXPONENTIAL
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", Weighting(self.kind))


@dataclass
class AddLossBundle:
    gen_adv: float
    disc: float
    distill: float
    r1: float
    per_head_means: list[float]
    s: int = -1
    t: int = -1

    def finite(self) -> bool:
        vals = [self.gen_adv, self.disc, self.distill, self.r1, *self.per_head_means]
        return all(math.isfinite(v) for v in vals)

    def as_row(self) -> dict:
        return {"gen_adv": self.gen_adv, "disc": self.disc, "distill": self.distill, "r1": self.r1}


def _heads(values: torch.Tensor, what: str) -> torch.Tensor:
    if not isinstance(values, torch.Tensor) or values.dim() != 2:
        raise ValueError(f"{what} must be an [N, K] tensor")
    if values.shape[0] == 0:
        raise ValueError(f"{what}: empty batch, expectation undefined")
    if values.shape[1] < 1:
        raise ValueError(f"{what}: need at least one head")
    if not torch.isfinite(values.detach()).all():
        raise ValueError(f"{what}: non-finite head outputs")
    return values


def generator_adversarial_loss(fake_heads: torch.Tensor) -> torch.Tensor:
    """``-mean_n sum_k D_k(F_k(x_hat_n))``."""
    v = _heads(fake_heads, "fake_heads")
    return -v.sum(dim=1).mean()


def r1_penalty(real_heads_fn: Callable[[torch.Tensor], torch.Tensor], x0) -> torch.Tensor:
    """Mean over samples of ``||grad_x sum_k D_k(F_k(x))||^2`` at real images.

    The returned value keeps its graph so it can be back-propagated into the
    discriminator parameters.
    """
    x = x0.data if isinstance(x0, ImageBatch) else x0
    if x.shape[0] == 0:
        raise ValueError("r1_penalty: empty batch")
    x = x.detach().requires_grad_(True)
    out = real_heads_fn(x)
    if not isinstance(out, torch.Tensor) or not out.is_floating_point():
        raise TypeError("discriminator map must return a floating-point tensor")
    if not out.requires_grad:
        raise ValueError("discriminator map is not differentiable (output carries no gradient)")
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        # output depends on parameters only, not on the input
        return out.sum() * 0.0
    return grad.reshape(grad.shape[0], -1).pow(2).sum(dim=1).mean()


def discriminator_hinge_loss(
    real_heads: torch.Tensor, fake_heads: torch.Tensor, r1, gamma: float
) -> torch.Tensor:
    """``mean sum_k relu(1 - D(real)) + gamma * r1 + mean sum_k relu(1 + D(fake))``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    r1_value = float(r1.detach()) if isinstance(r1, torch.Tensor) else float(r1)
    if r1_value < 0:
        raise ValueError("r1 must be >= 0")
    real = _heads(real_heads, "real_heads")
    fake = _heads(fake_heads, "fake_heads")
    real_term = torch.relu(1.0 - real).sum(dim=1).mean()
    fake_term = torch.relu(1.0 + fake).sum(dim=1).mean()
    return real_term + gamma * r1 + fake_term


def c_weight(t: int, scheme: WeightingScheme, schedule: NoiseSchedule) -> float:
    alpha, sigma = schedule.alpha(t), schedule.sigma(t)
    scale = float(scheme.params.get("scale", 1.0))
    if scheme.kind is Weighting.EXPONENTIAL:
        return scale * alpha
    if sigma <= 0:
        raise ValueError(f"sds weight undefined at t={t} (sigma_t = 0)")
    return scale * sigma**2 * alpha**2 / (2.0 * sigma)


def distillation_loss(student_out, teacher_out, t: int, scheme: WeightingScheme, schedule: NoiseSchedule) -> torch.Tensor:
    """``c(t) * mean((student - teacher)^2)``.

    The caller is responsible for building ``teacher_out`` from a
    stop-gradient copy of the student output.
    """
    a = student_out.data if isinstance(student_out, ImageBatch) else student_out
    b = teacher_out.data if isinstance(teacher_out, ImageBatch) else teacher_out
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    c = c_weight(t, scheme, schedule)
    return c * (a - b).pow(2).mean()
