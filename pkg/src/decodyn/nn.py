"""Seeded torch building blocks shared by the three trainable models.

Every parameter is float64 and initialized from a caller-supplied numpy
generator, never from torch's global RNG, so model construction is a pure
function of the named stream that fed it. Blocks are pre-norm transformer
layers with optional additive attention masks and optional feature-wise
modulation from a conditioning vector.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def seeded_linear(g: np.random.Generator, in_dim: int, out_dim: int, zero: bool = False) -> nn.Linear:
    """Linear layer with weights drawn from `g` (or zeros for output heads).
    Draw order: weight matrix, then bias."""
    layer = nn.Linear(in_dim, out_dim, dtype=torch.float64)
    with torch.no_grad():
        if zero:
            layer.weight.zero_()
            layer.bias.zero_()
        else:
            w = g.normal(0.0, in_dim ** -0.5, size=(out_dim, in_dim))
            b = np.zeros(out_dim)
            layer.weight.copy_(torch.from_numpy(w))
            layer.bias.copy_(torch.from_numpy(b))
    return layer


def seeded_param(g: np.random.Generator, *shape: int, scale: float = 1.0) -> nn.Parameter:
    return nn.Parameter(torch.from_numpy(g.normal(0.0, scale, size=shape)))


def timestep_embedding(s: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal embedding of 1-based diffusion step indices, float64.
    s: (B,) integer tensor; returns (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = s.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class SelfAttention(nn.Module):
    """Multi-head self-attention with an optional additive float mask of
    shape (tokens, tokens); -inf entries forbid attention."""

    def __init__(self, g: np.random.Generator, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = seeded_linear(g, width, 3 * width)
        self.proj = seeded_linear(g, width, width)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, t, w = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)
        att = torch.einsum("bthd,bshd->bhts", q, k) / math.sqrt(self.head_dim)
        if mask is not None:
            att = att + mask[None, None, :, :]
        att = torch.softmax(att, dim=-1)
        out = torch.einsum("bhts,bshd->bthd", att, v).reshape(b, t, w)
        return self.proj(out)


class CrossAttention(nn.Module):
    """Learned-query cross-attention pooling over a key/value sequence."""

    def __init__(self, g: np.random.Generator, q_dim: int, kv_dim: int, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.q_map = seeded_linear(g, q_dim, width)
        self.k_map = seeded_linear(g, kv_dim, width)
        self.v_map = seeded_linear(g, kv_dim, width)
        self.proj = seeded_linear(g, width, width)

    def forward(self, queries: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        b, nq, _ = queries.shape
        t = kv.shape[1]
        q = self.q_map(queries).reshape(b, nq, self.heads, self.head_dim)
        k = self.k_map(kv).reshape(b, t, self.heads, self.head_dim)
        v = self.v_map(kv).reshape(b, t, self.heads, self.head_dim)
        att = torch.einsum("bqhd,bshd->bhqs", q, k) / math.sqrt(self.head_dim)
        att = torch.softmax(att, dim=-1)
        out = torch.einsum("bhqs,bshd->bqhd", att, v).reshape(b, nq, -1)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block. When cond_dim is given, the conditioning
    vector produces per-block scale/shift applied after the first norm."""

    def __init__(self, g: np.random.Generator, width: int, heads: int, cond_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, dtype=torch.float64)
        self.attn = SelfAttention(g, width, heads)
        self.norm2 = nn.LayerNorm(width, dtype=torch.float64)
        self.mlp = nn.Sequential(
            seeded_linear(g, width, 4 * width),
            nn.GELU(),
            seeded_linear(g, 4 * width, width),
        )
        self.film = seeded_linear(g, cond_dim, 2 * width, zero=True) if cond_dim else None

    def forward(
        self, x: torch.Tensor, mask: torch.Tensor | None = None, cond: torch.Tensor | None = None
    ) -> torch.Tensor:
        h = self.norm1(x)
        if self.film is not None and cond is not None:
            scale, shift = self.film(cond).chunk(2, dim=-1)
            h = h * (1.0 + scale[:, None, :]) + shift[:, None, :]
        x = x + self.attn(h, mask)
        x = x + self.mlp(self.norm2(x))
        return x


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def named_tensors(module: nn.Module) -> dict[str, np.ndarray]:
    """Parameters as float64 numpy arrays keyed by dotted name, for the
    checkpoint archive."""
    return {
        name: p.detach().cpu().numpy().astype(np.float64, copy=True)
        for name, p in module.state_dict().items()
    }


def load_tensors(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.asarray(v, dtype=np.float64)) for k, v in tensors.items()}
    module.load_state_dict(state)


def checksum_tensors(tensors: dict[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()
