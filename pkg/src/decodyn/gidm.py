"""Inverse dynamics model: action queries, VQ codebook, masked transformer.

The encoder ingests [instruction | frame-t tokens | future tokens | action
queries] with a causal temporal mask: frame-t tokens never attend to future
tokens or queries, so their outputs are provably independent of the future
input. Query outputs are projected to continuous latent actions, quantized
against a learned codebook (straight-through), and a small decoder
reconstructs the future feature map from frame-t plus the quantized code
alone; that decoder is the self-supervision scaffold and is dropped after
pretraining.

The future-token slot count is fixed at construction to num_patches plus
the pooled-sequence token count, so the same parameter set serves
pretraining (real future frames, first num_patches slots) and adaptation
(projected predicted frames plus pooled tokens, all slots).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from decodyn.config import GidmConfig
from decodyn.nn import Block, seeded_linear, seeded_param
from decodyn.rng import stream

NEG_INF = float("-inf")


@dataclass
class LatentActionCode:
    """Continuous and quantized latent actions for one batch.

    straight_through carries the quantized value on the forward pass and
    the continuous gradient on the backward pass; downstream consumers must
    read it (or quantized), never continuous.
    """

    continuous: torch.Tensor      # (B, N, d)
    quantized: torch.Tensor       # (B, N, d), rows of the codebook
    straight_through: torch.Tensor
    indices: np.ndarray           # (B, N) ints


def quantize(codebook: torch.Tensor, continuous: torch.Tensor) -> LatentActionCode:
    """Nearest codebook row per query vector, lowest index on ties.

    Distances are full squared differences accumulated in float64 (never the
    expanded dot-product form, which perturbs ties), and argmin runs in
    numpy, whose first-occurrence rule implements the documented tie-break.
    """
    cont = continuous.detach().cpu().numpy()
    entries = codebook.detach().cpu().numpy()
    d = ((cont[:, :, None, :] - entries[None, None, :, :]) ** 2).sum(axis=-1)
    indices = d.argmin(axis=-1)
    quantized = codebook[torch.from_numpy(indices)]
    st = continuous + (quantized - continuous).detach()
    return LatentActionCode(
        continuous=continuous, quantized=quantized, straight_through=st, indices=indices
    )


def vq_loss(code: LatentActionCode, beta_commit: float) -> torch.Tensor:
    """Codebook pull plus commitment, each a per-entry mean; zero when the
    continuous vectors already sit exactly on codebook rows."""
    codebook_term = ((code.continuous.detach() - code.quantized) ** 2).mean()
    commit_term = ((code.continuous - code.quantized.detach()) ** 2).mean()
    return codebook_term + beta_commit * commit_term


def codebook_utilization(indices, codebook_size: int) -> float:
    """Fraction of the vocabulary observed in an index stream."""
    arr = np.asarray(list(np.ravel(indices)))
    if arr.size == 0:
        raise ValueError("empty index stream")
    return len(np.unique(arr)) / codebook_size


class Gidm(nn.Module):
    def __init__(
        self,
        cfg: GidmConfig,
        feature_dim: int,
        text_dim: int,
        future_token_slots: int,
        num_patches: int,
        seed: int,
    ):
        super().__init__()
        if future_token_slots < num_patches:
            raise ValueError("future_token_slots must cover at least the patch tokens")
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.num_patches = num_patches
        self.future_token_slots = future_token_slots
        g = stream(seed, "gidm-init")
        w = cfg.width
        self.token_embed = seeded_linear(g, feature_dim, w)
        self.text_embed = seeded_linear(g, text_dim, w)
        self.queries = seeded_param(g, cfg.num_queries, w, scale=0.5)
        self.pos_patch = seeded_param(g, num_patches, w, scale=0.02)
        self.pos_future_extra = seeded_param(g, future_token_slots - num_patches, w, scale=0.02)
        self.group_instr = seeded_param(g, w, scale=0.02)
        self.group_t0 = seeded_param(g, w, scale=0.02)
        self.group_t1 = seeded_param(g, w, scale=0.02)
        # Patch-aligned future-minus-current tokens enter as their own
        # group: the change between the paired frames is the quantity the
        # code must carry, and handing it to the queries directly beats
        # hoping attention learns the subtraction.
        self.group_diff = seeded_param(g, w, scale=0.02)
        self.blocks = nn.ModuleList(Block(g, w, cfg.heads) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(w, dtype=torch.float64)
        self.out_proj = seeded_linear(g, w, cfg.latent_dim)
        self.codebook = seeded_param(g, cfg.codebook_size, cfg.latent_dim, scale=0.5)
        # Decoder: spatial transformer over [frame-t tokens | code tokens],
        # predicting the future map as frame-t plus a zero-initialized
        # residual. Unchanged patches then cost nothing and the full loss
        # falls on what moved. Dropped after pretraining; it has no input
        # slot for the true future.
        self.dec_code_embed = seeded_linear(g, cfg.latent_dim, w)
        self.dec_blocks = nn.ModuleList(Block(g, w, cfg.heads) for _ in range(cfg.decoder_layers))
        self.dec_norm = nn.LayerNorm(w, dtype=torch.float64)
        self.dec_head = seeded_linear(g, w, feature_dim, zero=True)
        # Soft-assignment temperature for the gaussian_mixture variant.
        self.gm_log_tau = nn.Parameter(torch.zeros((), dtype=torch.float64))

    # -- encoder ---------------------------------------------------------
    def _build_mask(self, n_instr: int, n_t1: int) -> torch.Tensor:
        p, q = self.num_patches, self.cfg.num_queries
        total = n_instr + p + n_t1 + q
        mask = torch.full((total, total), NEG_INF, dtype=torch.float64)
        i0, t0, t1, qs = 0, n_instr, n_instr + p, n_instr + p + n_t1
        if n_instr:
            mask[i0:t0, i0:t0] = 0.0
        mask[t0:t1, i0:t1] = 0.0
        mask[t1:qs, i0:qs] = 0.0
        mask[qs:, :] = 0.0
        return mask

    def encode_with_tokens(
        self,
        e_t: torch.Tensor,
        e_future: torch.Tensor,
        text: torch.Tensor | None,
        use_positional: bool = True,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (continuous latent action (B, N, d), frame-t hidden states
        (B, P, w) after the final block). The mask guarantees the latter are
        independent of e_future and the queries."""
        b, p, f = e_t.shape
        if p != self.num_patches or f != self.feature_dim:
            raise ValueError(f"e_t expected (B, {self.num_patches}, {self.feature_dim}), got {e_t.shape}")
        n_t1 = e_future.shape[1]
        if e_future.shape[0] != b or e_future.shape[2] != f or n_t1 > self.future_token_slots:
            raise ValueError(
                f"e_future expected (B, <= {self.future_token_slots}, {f}), got {e_future.shape}"
            )
        use_instr = self.cfg.use_instruction and text is not None
        t0_tok = self.token_embed(e_t) + self.group_t0
        t1_tok = self.token_embed(e_future) + self.group_t1
        diff_tok = self.token_embed(e_future[:, :p] - e_t) + self.group_diff
        if use_positional:
            t0_tok = t0_tok + self.pos_patch[None]
            pos_t1 = torch.cat([self.pos_patch, self.pos_future_extra], dim=0)[:n_t1]
            t1_tok = t1_tok + pos_t1[None]
            diff_tok = diff_tok + self.pos_patch[None]
        parts = []
        if use_instr:
            parts.append((self.text_embed(text) + self.group_instr)[:, None, :])
        # Diff tokens sit inside the future block of the mask, so frame-t
        # hidden states stay independent of everything future-derived.
        parts.extend([t0_tok, t1_tok, diff_tok, self.queries[None].expand(b, -1, -1)])
        x = torch.cat(parts, dim=1)
        mask = self._build_mask(1 if use_instr else 0, n_t1 + p)
        for block in self.blocks:
            x = block(x, mask=mask)
        x = self.norm(x)
        n_instr = 1 if use_instr else 0
        frame_t_hidden = x[:, n_instr : n_instr + p]
        q_hidden = x[:, n_instr + p + n_t1 + p :]
        return self.out_proj(q_hidden), frame_t_hidden

    def encode_latent_action(
        self,
        e_t: torch.Tensor,
        e_future: torch.Tensor,
        text: torch.Tensor | None,
        use_positional: bool = True,
    ) -> torch.Tensor:
        return self.encode_with_tokens(e_t, e_future, text, use_positional)[0]

    # -- quantization variants -------------------------------------------
    def discretize(self, continuous: torch.Tensor, mode: str | None = None) -> LatentActionCode:
        """Apply the configured bottleneck. "vq" is the primary path; the
        others exist for the discretization study: per-dimension uniform
        binning (straight-through), responsibility-weighted soft assignment
        to the codebook rows, or no bottleneck at all."""
        mode = self.cfg.quantize_mode if mode is None else mode
        if mode == "vq":
            return quantize(self.codebook, continuous)
        if mode == "continuous":
            idx = np.zeros(continuous.shape[:2], dtype=np.int64)
            return LatentActionCode(continuous, continuous, continuous, idx)
        if mode == "binning":
            levels = self.cfg.codebook_size
            span = 2.0
            width = 2 * span / levels
            snapped = torch.clamp(
                (torch.floor((continuous.detach() + span) / width) + 0.5) * width - span,
                -span,
                span,
            )
            st = continuous + (snapped - continuous).detach()
            idx = np.zeros(continuous.shape[:2], dtype=np.int64)
            return LatentActionCode(continuous, snapped, st, idx)
        if mode == "gaussian_mixture":
            tau = torch.exp(self.gm_log_tau)
            d = ((continuous[:, :, None, :] - self.codebook[None, None]) ** 2).sum(-1)
            resp = torch.softmax(-d / tau, dim=-1)
            soft = torch.einsum("bnk,kd->bnd", resp, self.codebook)
            idx = d.detach().cpu().numpy().argmin(axis=-1)
            return LatentActionCode(continuous, soft, soft, idx)
        raise ValueError(f"unknown quantize mode {mode!r}")

    def bottleneck_loss(self, code: LatentActionCode) -> torch.Tensor:
        """Regularizer matching the active bottleneck; only VQ and binning
        carry one (codebook pull / commitment)."""
        mode = self.cfg.quantize_mode
        if mode == "vq":
            return vq_loss(code, self.cfg.beta_commit)
        if mode == "binning":
            return self.cfg.beta_commit * ((code.continuous - code.quantized.detach()) ** 2).mean()
        return torch.zeros((), dtype=torch.float64)

    # -- decoder ----------------------------------------------------------
    def decode_future(self, e_t: torch.Tensor, code: LatentActionCode) -> torch.Tensor:
        """Reconstruct the future feature map as frame-t plus a predicted
        residual. There is no future input: the quantized code is the sole
        channel, which is the information bottleneck."""
        b = e_t.shape[0]
        t0_tok = self.token_embed(e_t) + self.group_t0 + self.pos_patch[None]
        code_tok = self.dec_code_embed(code.straight_through) + self.group_t1
        x = torch.cat([t0_tok, code_tok], dim=1)
        for block in self.dec_blocks:
            x = block(x)
        x = self.dec_norm(x)
        return e_t + self.dec_head(x[:, : self.num_patches])

    # -- dead-code maintenance -------------------------------------------
    def reseed_dead_codes(
        self, unused_steps: np.ndarray, batch_continuous: torch.Tensor, g: np.random.Generator
    ) -> list[int]:
        """Re-seed entries unused for dead_code_steps consecutive steps to a
        random continuous vector from the batch; returns reseeded indices."""
        dead = [k for k in range(self.cfg.codebook_size) if unused_steps[k] >= self.cfg.dead_code_steps]
        if not dead:
            return []
        flat = batch_continuous.detach().reshape(-1, batch_continuous.shape[-1])
        with torch.no_grad():
            for k in dead:
                pick = int(g.integers(0, flat.shape[0]))
                self.codebook[k] = flat[pick]
        return dead


class MlpIdm(nn.Module):
    """Baseline head for the architecture study: mean-pooled frame features
    (current, future) plus the instruction, through a feed-forward net, to
    the same latent-action shape. Carries its own codebook so the bottleneck
    machinery is shared; no masked attention, no reconstruction decoder.
    """

    def __init__(
        self,
        cfg: GidmConfig,
        feature_dim: int,
        text_dim: int,
        future_token_slots: int,
        num_patches: int,
        seed: int,
    ):
        super().__init__()
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.num_patches = num_patches
        self.future_token_slots = future_token_slots
        g = stream(seed, "gidm-init")
        w = cfg.width * 2
        in_dim = 2 * feature_dim + text_dim
        self.net = nn.Sequential(
            seeded_linear(g, in_dim, w),
            nn.GELU(),
            seeded_linear(g, w, w),
            nn.GELU(),
            seeded_linear(g, w, cfg.num_queries * cfg.latent_dim),
        )
        self.codebook = seeded_param(g, cfg.codebook_size, cfg.latent_dim, scale=0.5)
        self.gm_log_tau = nn.Parameter(torch.zeros((), dtype=torch.float64))
        g_dec = stream(seed, "gidm-init", 1)
        self.dec = nn.Sequential(
            seeded_linear(g_dec, feature_dim + cfg.num_queries * cfg.latent_dim, w),
            nn.GELU(),
            seeded_linear(g_dec, w, num_patches * feature_dim),
        )

    def encode_latent_action(
        self, e_t: torch.Tensor, e_future: torch.Tensor, text: torch.Tensor | None, use_positional: bool = True
    ) -> torch.Tensor:
        b = e_t.shape[0]
        if text is None or not self.cfg.use_instruction:
            text_part = torch.zeros((b, self.net[0].in_features - 2 * self.feature_dim), dtype=torch.float64)
        else:
            text_part = text
        pooled = torch.cat([e_t.mean(dim=1), e_future.mean(dim=1), text_part], dim=-1)
        return self.net(pooled).reshape(b, self.cfg.num_queries, self.cfg.latent_dim)

    discretize = Gidm.discretize
    bottleneck_loss = Gidm.bottleneck_loss
    reseed_dead_codes = Gidm.reseed_dead_codes

    def decode_future(self, e_t: torch.Tensor, code: LatentActionCode) -> torch.Tensor:
        b = e_t.shape[0]
        flat = torch.cat([e_t.mean(dim=1), code.straight_through.reshape(b, -1)], dim=-1)
        return e_t + self.dec(flat).reshape(b, self.num_patches, self.feature_dim)


def gidm_loss(
    model, e_t: torch.Tensor, e_future: torch.Tensor, text: torch.Tensor | None
) -> tuple[torch.Tensor, dict, LatentActionCode]:
    """Self-supervised objective: reconstruction MSE of the future feature
    map plus the bottleneck term. The reconstruction term is normalized by
    the batch copy-residual energy mean((e_future - e_t)^2): frames a step
    apart differ in a handful of patches, so the raw MSE would sit orders
    of magnitude below the commitment terms and the code would never feel
    any pressure to explain the change. A decoder that returns e_t verbatim
    scores 1; a perfect one scores 0. Returns (total, detached parts, code)
    so the trainer can track utilization without re-encoding."""
    continuous = model.encode_latent_action(e_t, e_future, text)
    code = model.discretize(continuous)
    pred = model.decode_future(e_t, code)
    denom = ((e_future - e_t) ** 2).mean().detach() + 1e-12
    l_pred = ((pred - e_future) ** 2).mean() / denom
    l_vq = model.bottleneck_loss(code)
    total = l_pred + l_vq
    if not torch.isfinite(total):
        raise RuntimeError(
            f"non-finite inverse-model loss (pred={l_pred.item()}, vq={l_vq.item()})"
        )
    parts = {"loss_pred": float(l_pred.detach()), "loss_vq": float(l_vq.detach())}
    return total, parts, code
