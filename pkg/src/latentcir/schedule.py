"""Cosine noise schedule and the closed-form forward process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray  # (T + 1,), alpha_bar[0] == 1

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1


def cosine_schedule(T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), per-step beta capped."""
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    ab = f / f[0]
    betas = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar)


def q_sample(z0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; works on numpy arrays and torch tensors."""
    ab = schedule.alpha_bar[np.asarray(t)]
    if isinstance(z0, torch.Tensor):
        ab = torch.as_tensor(ab, dtype=z0.dtype)
        if ab.ndim:
            ab = ab[:, None]
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
