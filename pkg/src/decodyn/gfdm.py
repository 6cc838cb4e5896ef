"""Future predictor: conditional denoising diffusion over latent sequences.

A temporal transformer denoiser predicts the noise added to a sequence of
H+1 latent frames, conditioned on the current frame's latent (concatenated
onto every token) and the instruction embedding (feature-wise modulation
per block). Inference draws a seeded Gaussian start and applies a small
number of spaced ancestral updates; the single-step default denoises pure
noise in one jump and reads out mid-layer activations as the sequence
features consumed downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from decodyn.config import GfdmConfig
from decodyn.nn import Block, seeded_linear, seeded_param, timestep_embedding
from decodyn.rng import stream
from decodyn.schedules import NoiseSchedule, forward_noise, spaced_step_indices


class GfdmDenoiser(nn.Module):
    """Noise predictor over (B, H+1, latent_dim) sequences.

    forward returns (eps_hat, mid_features) where mid_features are the
    activations after block ceil(L/2), the hand-off read by the sequence
    pooler during policy inference.
    """

    def __init__(self, cfg: GfdmConfig, latent_dim: int, text_dim: int, seed: int):
        super().__init__()
        self.cfg = cfg
        self.latent_dim = latent_dim
        g = stream(seed, "gfdm-init")
        w = cfg.width
        self.embed = seeded_linear(g, 2 * latent_dim, w)
        self.pos = seeded_param(g, cfg.horizon + 1, w, scale=0.02)
        self.cond_mlp = nn.Sequential(
            seeded_linear(g, w + text_dim, w), nn.GELU(), seeded_linear(g, w, w)
        )
        self.blocks = nn.ModuleList(
            Block(g, w, cfg.heads, cond_dim=w) for _ in range(cfg.layers)
        )
        self.mid_index = math.ceil(cfg.layers / 2)
        self.norm_out = nn.LayerNorm(w, dtype=torch.float64)
        self.head = seeded_linear(g, w, latent_dim, zero=True)

    def forward(
        self, z_noised: torch.Tensor, s: torch.Tensor, z_t: torch.Tensor, text: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, t, d = z_noised.shape
        if t != self.cfg.horizon + 1 or d != self.latent_dim:
            raise ValueError(f"expected (B, {self.cfg.horizon + 1}, {self.latent_dim}), got {z_noised.shape}")
        ctx = z_t[:, None, :].expand(b, t, d)
        x = self.embed(torch.cat([z_noised, ctx], dim=-1)) + self.pos[None]
        cond = self.cond_mlp(torch.cat([timestep_embedding(s, self.cfg.width), text], dim=-1))
        mid = None
        for i, block in enumerate(self.blocks):
            x = block(x, cond=cond)
            if i + 1 == self.mid_index:
                mid = x
        return self.head(self.norm_out(x)), mid


def diffusion_loss(
    model: GfdmDenoiser,
    schedule: NoiseSchedule,
    z0: torch.Tensor,
    z_t: torch.Tensor,
    text: torch.Tensor,
    *,
    s: np.ndarray | None = None,
    eps: torch.Tensor | None = None,
    g: np.random.Generator | None = None,
) -> torch.Tensor:
    """Noise-prediction objective on a batch of clean latent sequences.

    Per element the squared error is summed over every sequence entry, then
    averaged over the batch, so a zero-output network scores approximately
    the per-element dimensionality. Step indices and noise are sampled from
    `g` when not supplied explicitly (tests inject both). Gradients reach
    all trainable parameters through loss.backward().
    """
    b = z0.shape[0]
    if b == 0:
        raise ValueError("batch must be non-empty")
    if s is None:
        if g is None:
            raise ValueError("need either explicit s or a generator")
        s = g.integers(1, schedule.steps + 1, size=b)
    if eps is None:
        if g is None:
            raise ValueError("need either explicit eps or a generator")
        eps = torch.from_numpy(g.normal(0.0, 1.0, size=tuple(z0.shape)))
    z_s = forward_noise(schedule, z0, s, eps)
    eps_hat, _ = model(z_s, torch.as_tensor(np.asarray(s)), z_t, text)
    loss = ((eps - eps_hat) ** 2).sum(dim=(1, 2)).mean()
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite diffusion loss (value={loss.item()}, steps={np.asarray(s).tolist()})"
        )
    return loss


@dataclass(frozen=True)
class PredictedFuture:
    """Final denoised latent sequence plus the denoiser's mid-layer tokens."""

    latents: np.ndarray   # (H+1, C, h, w)
    features: np.ndarray  # (H+1, width)

    def latents_flat(self) -> np.ndarray:
        return self.latents.reshape(self.latents.shape[0], -1)


def sample_future_batch(
    model: GfdmDenoiser,
    schedule: NoiseSchedule,
    z_t: torch.Tensor,
    text: torch.Tensor,
    *,
    steps: int,
    g: np.random.Generator,
    source: str,
    build_graph: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Spaced ancestral sampling over a batch of contexts.

    The start state is pure Gaussian noise from `g`, or the current latent
    noised to the terminal level when source="noised_current". Each update
    denoises from one selected step to the next; the final update takes the
    posterior-mean jump to clean with no added noise, which for steps=1 is
    exactly the single-shot denoise of the start state. Returns (latents
    (B, H+1, D), mid-layer features (B, H+1, width) from the last model
    call). build_graph keeps autograd edges so coupled finetuning can train
    through the sampler.
    """
    if source not in ("pure_noise", "noised_current"):
        raise ValueError(f"unknown one-step source {source!r}")
    b = z_t.shape[0]
    h1 = model.cfg.horizon + 1
    d = model.latent_dim
    start_eps = torch.from_numpy(g.normal(0.0, 1.0, size=(b, h1, d)))
    if source == "pure_noise":
        z = start_eps
    else:
        tiled = z_t[:, None, :].expand(b, h1, d)
        z = forward_noise(schedule, tiled, schedule.steps, start_eps)

    indices = spaced_step_indices(schedule.steps, steps)
    abars = schedule.alpha_bars
    feats = None
    with torch.set_grad_enabled(build_graph):
        for j, s_idx in enumerate(indices):
            eps_hat, feats = model(z, torch.as_tensor([s_idx] * b), z_t, text)
            abar_s = abars[s_idx - 1]
            x0 = (z - math.sqrt(1.0 - abar_s) * eps_hat) / math.sqrt(abar_s)
            if j + 1 == len(indices):
                z = x0
            else:
                s_next = indices[j + 1]
                abar_prev = abars[s_next - 1]
                alpha_eff = abar_s / abar_prev
                beta_eff = 1.0 - alpha_eff
                mean = (
                    math.sqrt(abar_prev) * beta_eff / (1.0 - abar_s) * x0
                    + math.sqrt(alpha_eff) * (1.0 - abar_prev) / (1.0 - abar_s) * z
                )
                sigma = math.sqrt(beta_eff * (1.0 - abar_prev) / (1.0 - abar_s))
                noise = torch.from_numpy(g.normal(0.0, 1.0, size=(b, h1, d)))
                z = mean + sigma * noise
    return z, feats


def predict_future_features(
    model: GfdmDenoiser,
    schedule: NoiseSchedule,
    z_t: np.ndarray,
    text: np.ndarray,
    *,
    steps: int | None = None,
    seed: int = 0,
    latent_shape: tuple[int, int, int],
    source: str | None = None,
) -> PredictedFuture:
    """Single-context sampling, seeded from the "gfdm-sample" stream; a pure
    function of its arguments. See sample_future_batch for the update math.
    """
    cfg = model.cfg
    steps = cfg.infer_steps if steps is None else steps
    source = cfg.one_step_source if source is None else source
    h1 = cfg.horizon + 1
    d = model.latent_dim
    g = stream(seed, "gfdm-sample")
    z_t_t = torch.from_numpy(np.asarray(z_t, dtype=np.float64).reshape(1, d))
    text_t = torch.from_numpy(np.asarray(text, dtype=np.float64).reshape(1, -1))
    z, feats = sample_future_batch(
        model, schedule, z_t_t, text_t, steps=steps, g=g, source=source
    )
    latents = z[0].numpy().reshape(h1, *latent_shape)
    return PredictedFuture(latents=latents, features=feats[0].numpy())
