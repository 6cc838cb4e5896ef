"""Action head: a small denoising transformer over action chunks.

The adapter diffuses fixed-length action chunks and denoises them under
conditioning assembled from the quantized latent action, the fused future
features, and the instruction embedding. Conditioning enters twice: as a
pooled summary through per-block feature-wise modulation, and as an
unpooled token sequence the chunk tokens cross-attend into, so cues
carried by a single feature token survive (a mean over tokens buries
them). Sampling is seeded ancestral denoising with the output clipped to
the actuator bounds; execution follows a receding horizon (run the first
exec_stride actions, then re-plan).
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from decodyn.config import AdapterConfig
from decodyn.nn import Block, CrossAttention, seeded_linear, seeded_param, timestep_embedding
from decodyn.rng import stream
from decodyn.schedules import NoiseSchedule, forward_noise, spaced_step_indices

ACTION_DIM = 3


class AdapterDenoiser(nn.Module):
    """Noise predictor over (B, chunk_len, action_dim) chunks.

    Two conditioning paths. The pooled one concatenates the flattened
    quantized code, mean-pooled fused tokens, and the text embedding with
    the step embedding, and modulates every block feature-wise. The token
    one keeps the code tokens, fused tokens, and text unpooled; each block
    cross-attends into that sequence from the chunk tokens. With
    condition_on_fused off the fused tokens are zeroed in the pooled path
    and dropped from the token path.

    code_tokens declares how the flat code dimension splits into tokens
    (code_dim must be divisible by it); callers holding a single vector
    leave it at 1.
    """

    def __init__(
        self,
        cfg: AdapterConfig,
        code_dim: int,
        fused_dim: int,
        text_dim: int,
        seed: int,
        action_dim: int = ACTION_DIM,
        code_tokens: int = 1,
    ):
        super().__init__()
        if code_dim % code_tokens:
            raise ValueError(f"code_dim {code_dim} not divisible by code_tokens {code_tokens}")
        self.cfg = cfg
        self.code_dim = code_dim
        self.fused_dim = fused_dim
        self.action_dim = action_dim
        self.code_token_dim = code_dim // code_tokens
        g = stream(seed, "adapter-init")
        w = cfg.width
        self.embed = seeded_linear(g, action_dim, w)
        self.pos = seeded_param(g, cfg.chunk_len, w, scale=0.02)
        self.cond_mlp = nn.Sequential(
            seeded_linear(g, w + code_dim + fused_dim + text_dim, w),
            nn.GELU(),
            seeded_linear(g, w, w),
        )
        self.code_tok = seeded_linear(g, self.code_token_dim, w)
        self.fused_tok = seeded_linear(g, fused_dim, w)
        self.text_tok = seeded_linear(g, text_dim, w)
        self.type_tags = seeded_param(g, 3, w, scale=0.02)
        self.blocks = nn.ModuleList(Block(g, w, cfg.heads, cond_dim=w) for _ in range(cfg.layers))
        self.cross_norms = nn.ModuleList(
            nn.LayerNorm(w, dtype=torch.float64) for _ in range(cfg.layers)
        )
        self.cross = nn.ModuleList(CrossAttention(g, w, w, w, cfg.heads) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(w, dtype=torch.float64)
        self.head = seeded_linear(g, w, action_dim, zero=True)

    def _condition(
        self, code_flat: torch.Tensor, fused_pooled: torch.Tensor, text: torch.Tensor, s: torch.Tensor
    ) -> torch.Tensor:
        if not self.cfg.condition_on_fused:
            fused_pooled = torch.zeros_like(fused_pooled)
        return self.cond_mlp(
            torch.cat([timestep_embedding(s, self.cfg.width), code_flat, fused_pooled, text], dim=-1)
        )

    def _cond_tokens(self, code: torch.Tensor, fused: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        parts = [self.code_tok(code.reshape(code.shape[0], -1, self.code_token_dim)) + self.type_tags[0]]
        if self.cfg.condition_on_fused:
            parts.append(self.fused_tok(fused) + self.type_tags[1])
        parts.append(self.text_tok(text)[:, None, :] + self.type_tags[2])
        return torch.cat(parts, dim=1)

    def forward(
        self,
        chunk_noised: torch.Tensor,
        s: torch.Tensor,
        code: torch.Tensor,
        fused: torch.Tensor,
        text: torch.Tensor,
    ) -> torch.Tensor:
        b, t, a = chunk_noised.shape
        if t != self.cfg.chunk_len or a != self.action_dim:
            raise ValueError(
                f"expected (B, {self.cfg.chunk_len}, {self.action_dim}) chunk, got {chunk_noised.shape}"
            )
        cond = self._condition(code.reshape(b, -1), fused.mean(dim=1), text, s)
        kv = self._cond_tokens(code, fused, text)
        x = self.embed(chunk_noised) + self.pos[None]
        for block, cnorm, cross in zip(self.blocks, self.cross_norms, self.cross):
            x = block(x, cond=cond)
            x = x + cross(cnorm(x), kv)
        return self.head(self.norm(x))


def adapter_loss(
    model: AdapterDenoiser,
    schedule: NoiseSchedule,
    code_st: torch.Tensor,
    fused: torch.Tensor,
    text: torch.Tensor,
    chunk: torch.Tensor,
    *,
    s: np.ndarray | None = None,
    eps: torch.Tensor | None = None,
    g: np.random.Generator | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE on labeled chunks: squared error summed over the
    chunk entries, averaged over the batch (zero head scores the chunk
    dimensionality). Gradients flow into the conditioning inputs as well,
    which is how the inverse model trains end-to-end during adaptation."""
    b = chunk.shape[0]
    if b == 0:
        raise ValueError("batch must be non-empty")
    if s is None:
        if g is None:
            raise ValueError("need either explicit s or a generator")
        s = g.integers(1, schedule.steps + 1, size=b)
    if eps is None:
        if g is None:
            raise ValueError("need either explicit eps or a generator")
        eps = torch.from_numpy(g.normal(0.0, 1.0, size=tuple(chunk.shape)))
    noised = forward_noise(schedule, chunk, s, eps)
    eps_hat = model(noised, torch.as_tensor(np.asarray(s)), code_st, fused, text)
    loss = ((eps - eps_hat) ** 2).sum(dim=(1, 2)).mean()
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite adapter loss (value={loss.item()})")
    return loss


def sample_actions(
    model: AdapterDenoiser,
    schedule: NoiseSchedule,
    code_st: torch.Tensor,
    fused: torch.Tensor,
    text: torch.Tensor,
    *,
    steps: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Seeded ancestral sampling of one action chunk, clipped to [-1, 1].

    Deterministic in (params, conditioning, seed, steps); all noise comes
    from the "adapter-sample" stream. Returns (chunk_len, action_dim).
    """
    steps = model.cfg.sample_steps if steps is None else steps
    g = stream(seed, "adapter-sample")
    t, a = model.cfg.chunk_len, model.action_dim
    z = torch.from_numpy(g.normal(0.0, 1.0, size=(1, t, a)))
    indices = spaced_step_indices(schedule.steps, steps)
    abars = schedule.alpha_bars
    with torch.no_grad():
        for j, s_idx in enumerate(indices):
            eps_hat = model(z, torch.as_tensor([s_idx]), code_st, fused, text)
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
                z = mean + sigma * torch.from_numpy(g.normal(0.0, 1.0, size=(1, t, a)))
    return np.clip(z[0].numpy(), -1.0, 1.0)
