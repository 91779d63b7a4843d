"""Diffusion noise schedule and the forward (noising) process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ScheduleError


@dataclass
class NoiseSchedule:
    """Per-timestep constants; timesteps are 1-indexed (1..T).

    beta, alpha_bar, and lambda_t (log SNR) are float64 arrays of length T;
    index t-1 holds the value for step t.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    lambda_t: np.ndarray

    def alpha_bar_at(self, t) -> np.ndarray:
        """alpha_bar for (possibly vectorized) 1-indexed t; t=0 means no noise."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule with cumulative products and log-SNR.

    alpha_bar_t = prod_{s<=t} (1 - beta_s); lambda_t = log(abar/(1-abar)).
    """
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    lambda_t = np.log(alpha_bar / (1.0 - alpha_bar))
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, lambda_t=lambda_t)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noised sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t is a 1-indexed int or a per-sample 1D tensor/array for batched x0.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t_arr = np.asarray(t if not isinstance(t, torch.Tensor) else t.numpy())
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"t must be within [1, {sched.T}]")
    abar = sched.alpha_bar[t_arr - 1]
    shape = (-1,) + (1,) * (x0.dim() - 1) if t_arr.ndim else ()
    abar_t = torch.as_tensor(abar, dtype=x0.dtype).reshape(shape)
    return torch.sqrt(abar_t) * x0 + torch.sqrt(1.0 - abar_t) * eps
