"""Noise schedule, forward noising, and the deterministic reverse step.

The schedule holds cumulative signal fractions ``alpha_bar`` over the
training timesteps plus a strided map of training timesteps used at
inference. The reverse step is fully deterministic (no stochastic
term), so guided sampling runs are reproducible.

Inference step indices count denoising progress: index 0 is the pure
noise end, and "stop at step 15" means after 15 denoising steps ran.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["NoiseSchedule", "make_schedule", "add_noise", "predict_x0", "ddim_step"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable schedule; safe to share across threads."""

    alpha_bar: np.ndarray
    t_train: int
    inference_steps: int
    # Strictly decreasing training timesteps visited at inference,
    # ordered by denoising progress (index 0 = noisiest).
    timestep_map: tuple

    def training_timestep(self, step_index):
        """Training timestep for a given inference step index."""
        if not 0 <= step_index < self.inference_steps:
            raise ValueError(
                f"step index {step_index} outside [0, {self.inference_steps})"
            )
        return self.timestep_map[step_index]

    def alpha_bar_at(self, t):
        if not 0 <= t < self.t_train:
            raise ValueError(f"timestep {t} outside [0, {self.t_train})")
        return float(self.alpha_bar[t])


def make_schedule(t_train=1000, inference_steps=50, beta_range=(1e-4, 0.02)):
    """Build a linear-beta schedule with an evenly strided inference map.

    Args:
        t_train: number of training timesteps, >= inference_steps >= 1.
        inference_steps: number of reverse steps taken at sampling time.
        beta_range: (beta_min, beta_max), each in (0, 1).

    Returns:
        NoiseSchedule with ``alpha_bar[t] = prod_{s<=t}(1 - beta_s)``.
    """
    beta_min, beta_max = beta_range
    if not (t_train >= inference_steps >= 1):
        raise ValueError(
            f"need t_train >= inference_steps >= 1, got {t_train}, {inference_steps}"
        )
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_range}")

    betas = np.linspace(beta_min, beta_max, t_train, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    stride = t_train // inference_steps
    visited = np.arange(0, inference_steps) * stride
    timestep_map = tuple(int(t) for t in visited[::-1])
    return NoiseSchedule(
        alpha_bar=alpha_bar,
        t_train=int(t_train),
        inference_steps=int(inference_steps),
        timestep_map=timestep_map,
    )


def add_noise(x0, epsilon, t, schedule):
    """Noise a clean latent: sqrt(a_t) * x0 + sqrt(1 - a_t) * eps."""
    if getattr(x0, "shape", None) != getattr(epsilon, "shape", None):
        raise ValueError(
            f"latent/noise shape mismatch: {getattr(x0, 'shape', None)} vs "
            f"{getattr(epsilon, 'shape', None)}"
        )
    a = schedule.alpha_bar_at(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * epsilon


def predict_x0(x_t, eps_pred, t, schedule):
    """Recover the predicted clean latent from a noise prediction."""
    a = schedule.alpha_bar_at(t)
    if a <= 0:
        raise ValueError(f"alpha_bar[{t}] = {a}: clean latent is unrecoverable")
    return (x_t - math.sqrt(1.0 - a) * eps_pred) / math.sqrt(a)


def ddim_step(x_t, eps_pred, t, t_prev, schedule):
    """One deterministic reverse step from timestep t to t_prev.

    ``t_prev=None`` marks the terminal step and returns the predicted
    clean latent directly (unit signal scaling).
    """
    x0_pred = predict_x0(x_t, eps_pred, t, schedule)
    if t_prev is None:
        return x0_pred
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must precede t={t}")
    a_prev = schedule.alpha_bar_at(t_prev)
    return math.sqrt(a_prev) * x0_pred + math.sqrt(1.0 - a_prev) * eps_pred
