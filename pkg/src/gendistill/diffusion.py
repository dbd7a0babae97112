"""Variance-preserving forward process shared by the losses, trainer and samplers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import ImageBatch


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal/noise coefficients ``alphas[t]``, ``sigmas[t]`` for ``t = 0..t_max``.

    ``alphas`` descend from ~1, ``sigmas`` ascend from ~0 and
    ``alphas**2 + sigmas**2 == 1``.
    """

    alphas: torch.Tensor
    sigmas: torch.Tensor

    def __post_init__(self):
        a = torch.as_tensor(self.alphas, dtype=torch.float64).reshape(-1)
        s = torch.as_tensor(self.sigmas, dtype=torch.float64).reshape(-1)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "sigmas", s)
        if a.numel() < 2 or a.shape != s.shape:
            raise ValueError("alphas and sigmas must be equal-length vectors of length >= 2")
        if not torch.allclose(a**2 + s**2, torch.ones_like(a), atol=1e-9):
            raise ValueError("schedule is not variance preserving")
        if not (torch.all(a[1:] < a[:-1]) and torch.all(s[1:] > s[:-1])):
            raise ValueError("alphas must strictly decrease and sigmas strictly increase")
        if abs(float(a[0]) - 1.0) > 1e-2 or float(s[0]) > 0.1:
            raise ValueError("schedule must start near alpha=1, sigma=0")
        if float(a[-1]) < 0 or float(s[-1]) > 1:
            raise ValueError("coefficients must lie in [0, 1]")

    @property
    def t_max(self) -> int:
        return self.alphas.numel() - 1

    def __len__(self) -> int:
        return self.alphas.numel()

    def check(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.t_max:
            raise ValueError(f"timestep {t} outside [0, {self.t_max}]")
        return t

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self.check(t)])

    @classmethod
    def from_alphas(cls, alphas: Sequence[float] | torch.Tensor) -> "NoiseSchedule":
        a = torch.as_tensor(alphas, dtype=torch.float64)
        return cls(a, torch.sqrt(torch.clamp(1.0 - a**2, min=0.0)))

    @classmethod
    def linear(cls, num_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        """DDPM linear-beta schedule, ``alpha_t = sqrt(prod_{i<=t} (1 - beta_i))``."""
        betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
        return cls.from_alphas(torch.sqrt(torch.cumprod(1.0 - betas, dim=0)))

    @classmethod
    def cosine(cls, num_timesteps: int = 1000, s: float = 0.008, max_angle: float = 0.995) -> "NoiseSchedule":
        """Cosine schedule with ``alpha_0 = 1`` exactly; the end angle is capped so ``alpha_T > 0``."""
        u = torch.linspace(0.0, 1.0, num_timesteps, dtype=torch.float64)
        f = torch.cos((u + s) / (1 + s) * torch.pi / 2)
        f0 = torch.cos(torch.tensor(s / (1 + s) * torch.pi / 2, dtype=torch.float64))
        angle = torch.arccos(torch.clamp(f / f0, 0.0, 1.0)) * max_angle
        return cls(torch.cos(angle), torch.sin(angle))

    def to_dict(self) -> dict:
        return {"alphas": self.alphas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls.from_alphas(d["alphas"])


def _coef(values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        c = values[t.long().cpu()].to(like.dtype).to(like.device)
        return c.view(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(float(values[int(t)]), dtype=like.dtype, device=like.device)


def add_noise(x0, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``alpha_t * x0 + sigma_t * eps``; ``t`` is an int or a per-sample index tensor."""
    x = x0.data if isinstance(x0, ImageBatch) else x0
    if eps.shape != x.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x.shape)}")
    ts = t.reshape(-1).tolist() if isinstance(t, torch.Tensor) else [t]
    for ti in ts:
        schedule.check(ti)
    return _coef(schedule.alphas, t, x) * x + _coef(schedule.sigmas, t, x) * eps


def predict_x0_from_eps(x_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    return (x_t - _coef(schedule.sigmas, t, x_t) * eps_hat) / _coef(schedule.alphas, t, x_t)


@dataclass(frozen=True)
class TimestepSet:
    """Student timesteps ``tau_1 < ... < tau_n``."""

    taus: tuple[int, ...]

    def __post_init__(self):
        taus = tuple(int(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        if not taus:
            raise ValueError("timestep set must be non-empty")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError(f"timesteps must be strictly increasing: {taus}")
        if taus[0] < 0:
            raise ValueError("timesteps must be >= 0")

    def validate(self, schedule: NoiseSchedule) -> None:
        if self.taus[-1] > schedule.t_max:
            raise ValueError(f"timestep {self.taus[-1]} exceeds schedule t_max={schedule.t_max}")

    def __len__(self) -> int:
        return len(self.taus)


def sample_student_timestep(tset: TimestepSet, rng: np.random.Generator) -> int:
    """Uniform draw from ``tset``."""
    return tset.taus[int(rng.integers(len(tset.taus)))]
