"""Diffusion noise schedules and the forward noising process.

A schedule is a triple (betas, alphas, alpha_bars) with alpha_bars the
exact running product of alphas, so the identity
alpha_bars[s] == alpha_bars[s-1] * alphas[s] holds bit-for-bit. Both the
future predictor and the action head own one; the constants live in each
checkpoint manifest so inference reconstructs the schedule exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Step s is 1-indexed in the math; arrays are 0-indexed by s-1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def constants(self) -> dict:
        """Manifest record sufficient to rebuild the schedule."""
        return {
            "kind": "linear",
            "steps": self.steps,
            "beta_min": float(self.betas[0]),
            "beta_max": float(self.betas[-1]),
        }


def make_schedule(kind: str, steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear interpolation of beta over `steps` points; exact running product
    for alpha_bar. Rejects non-positive or non-increasing bounds and any
    beta outside (0, 1)."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.linspace(beta_min, beta_max, steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.multiply.accumulate(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def from_constants(constants: dict) -> NoiseSchedule:
    return make_schedule(
        constants["kind"], constants["steps"], constants["beta_min"], constants["beta_max"]
    )


def _gather(values: np.ndarray, s, like):
    """alpha_bar values for step index s (1-based, scalar or per-batch),
    shaped to broadcast against `like`."""
    s_arr = np.asarray(s)
    if np.any(s_arr < 1) or np.any(s_arr > len(values)):
        raise ValueError(f"step index out of range [1, {len(values)}]")
    v = values[s_arr - 1]
    if isinstance(like, torch.Tensor):
        t = torch.as_tensor(v, dtype=like.dtype)
        while t.dim() < like.dim():
            t = t.unsqueeze(-1)
        return t
    v = np.asarray(v, dtype=np.float64)
    while v.ndim < np.ndim(like):
        v = v[..., None]
    return v


def forward_noise(schedule: NoiseSchedule, z0, s, eps):
    """sqrt(alpha_bar_s) * z0 + sqrt(1 - alpha_bar_s) * eps, elementwise.

    z0 and eps must share shape; s is a 1-based step index, either a scalar
    or one index per leading batch entry. Works on numpy arrays and torch
    tensors alike.
    """
    if isinstance(z0, torch.Tensor) != isinstance(eps, torch.Tensor):
        raise TypeError("z0 and eps must both be torch tensors or both numpy arrays")
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    abar = _gather(schedule.alpha_bars, s, z0)
    if isinstance(z0, torch.Tensor):
        return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def spaced_step_indices(total_steps: int, num_updates: int) -> list[int]:
    """Descending 1-based step indices for a spaced sampler: num_updates
    values from total_steps down toward 1, always starting at total_steps
    and ending at 1 (or the single value total_steps when num_updates=1
    jumps straight to clean)."""
    if num_updates < 1:
        raise ValueError(f"num_updates must be >= 1, got {num_updates}")
    if num_updates == 1:
        return [total_steps]
    raw = np.linspace(total_steps, 1, num_updates)
    steps = sorted({int(round(v)) for v in raw}, reverse=True)
    return steps
