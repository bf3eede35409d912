"""
Noise Scheduler
Forward noising of action chunks and the two reverse samplers (DDPM ancestral
step, DDIM step) the policy uses at inference time.

The tables are float64 numpy arrays frozen after construction; the step
functions accept torch tensors of any float dtype and return the same dtype.
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .exceptions import InvalidRangeError

Timestep = Union[int, torch.Tensor]

SCHEDULE_KINDS = ("linear",)

# Index used for "the step before 0"; its alpha-bar is 1 (clean sample).
CLEAN_T = -1


@dataclass(frozen=True)
class NoiseSchedule:
    T_train: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at t, with alpha_bar(-1) = 1."""
        if t == CLEAN_T:
            return 1.0
        self.check_timestep(t)
        return float(self.alpha_bars[t])

    def check_timestep(self, t: Timestep) -> None:
        if isinstance(t, torch.Tensor):
            if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.T_train):
                raise InvalidRangeError(f"timestep out of range [0, {self.T_train})")
            return
        if not 0 <= int(t) < self.T_train:
            raise InvalidRangeError(f"timestep {t} out of range [0, {self.T_train})")

    def signal_to_noise(self) -> np.ndarray:
        return self.alpha_bars / (1.0 - self.alpha_bars)


@dataclass(frozen=True)
class DdimPlan:
    timesteps: tuple
    eta: float = 0.0

    def pairs(self):
        """Yield (t, t_prev) for every step; the last step lands on the clean sample."""
        for i, t in enumerate(self.timesteps):
            t_prev = self.timesteps[i + 1] if i + 1 < len(self.timesteps) else CLEAN_T
            yield t, t_prev


def make_noise_schedule(T_train: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02,
                        kind: str = "linear") -> NoiseSchedule:
    if kind not in SCHEDULE_KINDS:
        raise InvalidRangeError(f"unknown schedule kind: {kind}")
    if T_train < 2:
        raise InvalidRangeError(f"T_train must be >= 2, got {T_train}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRangeError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )

    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for table in (betas, alphas, alpha_bars):
        table.setflags(write=False)
    return NoiseSchedule(T_train=T_train, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _gather(table: np.ndarray, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """Look up table[t] shaped to broadcast against `like` (batch-first)."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        # Fancy indexing copies, so the frozen table never reaches torch.from_numpy.
        values = torch.from_numpy(table[t.detach().cpu().long().numpy()]).to(like.dtype)
        return values.view(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(float(table[int(t)]), dtype=like.dtype)


def forward_noise(schedule: NoiseSchedule, x0: torch.Tensor, t: Timestep,
                  eps: torch.Tensor) -> torch.Tensor:
    schedule.check_timestep(t)
    abar = _gather(schedule.alpha_bars, t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def predict_x0(schedule: NoiseSchedule, x_t: torch.Tensor, eps_hat: torch.Tensor,
               t: Timestep) -> torch.Tensor:
    schedule.check_timestep(t)
    abar = _gather(schedule.alpha_bars, t, x_t)
    return (x_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)


def ddpm_step(schedule: NoiseSchedule, x_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
              noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1}; the noise term is dropped at t = 0."""
    schedule.check_timestep(t)
    t = int(t)
    beta = float(schedule.betas[t])
    abar = float(schedule.alpha_bars[t])
    alpha_coef = 1.0 / np.sqrt(schedule.alphas[t])
    gamma_coef = beta / np.sqrt(1.0 - abar)
    mean = alpha_coef * (x_t - gamma_coef * eps_hat)
    if t == 0 or noise is None:
        return mean
    abar_prev = float(schedule.alpha_bars[t - 1])
    sigma = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
    return mean + sigma * noise


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    abar = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    return float(eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar)) * np.sqrt(1.0 - abar / abar_prev))


def ddim_step(schedule: NoiseSchedule, x_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
              t_prev: int, eta: float = 0.0, noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    schedule.check_timestep(t)
    if not CLEAN_T <= t_prev < t:
        raise InvalidRangeError(f"ddim step needs -1 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise InvalidRangeError(f"eta must lie in [0, 1], got {eta}")

    abar_prev = schedule.alpha_bar(t_prev)
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    x0_hat = predict_x0(schedule, x_t, eps_hat, t)
    direction = np.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0))
    out = np.sqrt(abar_prev) * x0_hat + direction * eps_hat
    if sigma > 0.0 and noise is not None:
        out = out + sigma * noise
    return out


def make_ddim_plan(T_train: int, T_eval: int, eta: float = 0.0) -> DdimPlan:
    if not 1 <= T_eval <= T_train:
        raise InvalidRangeError(f"need 1 <= T_eval <= T_train, got T_eval={T_eval}, T_train={T_train}")
    if not 0.0 <= eta <= 1.0:
        raise InvalidRangeError(f"eta must lie in [0, 1], got {eta}")
    stride = T_train // T_eval
    timesteps = tuple(int(i * stride) for i in reversed(range(T_eval)))
    return DdimPlan(timesteps=timesteps, eta=float(eta))
