"""Frozen deterministic encoders for frames and instructions.

Three fixed seeded maps stand in for large pretrained backbones: a pooled
linear latent encoder (consumed by the future predictor), a random-projection
patch encoder with per-token normalization (consumed by the inverse model),
and an embedding-table instruction encoder shared by both. None of them
exposes trainable parameters; their weights are derived once from the
configured seed and checksummed so checkpoints can assert they never drift.
"""

from __future__ import annotations

import hashlib

import numpy as np

from decodyn.config import EncoderConfig
from decodyn.rng import stream
from decodyn.synthworld.env import Instruction, TASK_NAMES

NUM_COLORS = 4
NUM_REGIONS = 4


class FrozenEncoders:
    """Weight container plus the three encoding operations.

    All arrays are float64 and never mutated after construction. Inputs are
    float images in [0, 1] shaped (S, S, 3) or batched (B, S, S, 3).
    """

    def __init__(self, cfg: EncoderConfig, image_size: int):
        self.cfg = cfg
        self.image_size = image_size
        if image_size % cfg.latent_grid != 0:
            raise ValueError("latent_grid must divide image_size")
        patch_grid = int(round(cfg.num_patches ** 0.5))
        if patch_grid * patch_grid != cfg.num_patches:
            raise ValueError("num_patches must be a perfect square")
        if image_size % patch_grid != 0:
            raise ValueError("patch grid must divide image_size")
        self.patch_grid = patch_grid
        self.patch_size = image_size // patch_grid
        self.pool = image_size // cfg.latent_grid

        g = stream(cfg.weights_seed, "latent-enc")
        self.w_latent = g.normal(0.0, 3 ** -0.5, size=(cfg.latent_channels, 3))
        self.b_latent = 0.1 * g.normal(0.0, 1.0, size=cfg.latent_channels)

        g = stream(cfg.weights_seed, "feature-enc")
        in_dim = self.patch_size * self.patch_size * 3
        self.w_feat = g.normal(0.0, in_dim ** -0.5, size=(cfg.feature_dim, in_dim))
        self.b_feat = 0.1 * g.normal(0.0, 1.0, size=cfg.feature_dim)

        g = stream(cfg.weights_seed, "text-emb")
        self.task_table = g.normal(0.0, 1.0, size=(len(TASK_NAMES), cfg.text_task_dim))
        self.color_table = g.normal(0.0, 1.0, size=(NUM_COLORS, cfg.text_color_dim))
        self.region_table = g.normal(0.0, 1.0, size=(NUM_REGIONS, cfg.text_region_dim))

    # -- shapes ---------------------------------------------------------
    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.cfg.latent_channels, self.cfg.latent_grid, self.cfg.latent_grid)

    @property
    def latent_dim(self) -> int:
        c, h, w = self.latent_shape
        return c * h * w

    @property
    def text_dim(self) -> int:
        return self.cfg.text_task_dim + self.cfg.text_color_dim + self.cfg.text_region_dim

    def checksum(self) -> str:
        """sha256 over all weight buffers in documented order."""
        h = hashlib.sha256()
        for arr in (
            self.w_latent,
            self.b_latent,
            self.w_feat,
            self.b_feat,
            self.task_table,
            self.color_table,
            self.region_table,
        ):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- operations -----------------------------------------------------
    def _check_image(self, obs: np.ndarray) -> tuple[np.ndarray, bool]:
        obs = np.asarray(obs)
        # raw u8 renders map onto the same [0, 1] scale as float frames, so
        # training and inference cannot diverge on input convention
        scale = 255.0 if obs.dtype == np.uint8 else 1.0
        obs = obs.astype(np.float64) / scale
        s = self.image_size
        if obs.ndim == 3:
            if obs.shape != (s, s, 3):
                raise ValueError(f"expected ({s}, {s}, 3) image, got {obs.shape}")
            return obs[None], True
        if obs.ndim == 4:
            if obs.shape[1:] != (s, s, 3):
                raise ValueError(f"expected (B, {s}, {s}, 3) batch, got {obs.shape}")
            return obs, False
        raise ValueError(f"expected rank-3 or rank-4 image array, got rank {obs.ndim}")

    def encode_latent(self, obs: np.ndarray) -> np.ndarray:
        """Average-pool each channel to the latent grid, then apply the fixed
        per-cell linear map over channels. All-zero input yields the bias at
        every cell. Output (C, h, w), batched (B, C, h, w)."""
        x, single = self._check_image(obs)
        b = x.shape[0]
        gz, p = self.cfg.latent_grid, self.pool
        pooled = x.reshape(b, gz, p, gz, p, 3).mean(axis=(2, 4))
        out = np.einsum("bhwc,kc->bkhw", pooled, self.w_latent) + self.b_latent[None, :, None, None]
        return out[0] if single else out

    def encode_features(self, obs: np.ndarray) -> np.ndarray:
        """Flatten non-overlapping patches (row-major grid), project with the
        fixed map, add bias, then L2-normalize each token. Output (P, d_e),
        batched (B, P, d_e)."""
        x, single = self._check_image(obs)
        b = x.shape[0]
        gp, ps = self.patch_grid, self.patch_size
        patches = (
            x.reshape(b, gp, ps, gp, ps, 3)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, gp * gp, ps * ps * 3)
        )
        tok = patches @ self.w_feat.T + self.b_feat
        norms = np.linalg.norm(tok, axis=-1, keepdims=True)
        tok = tok / np.maximum(norms, 1e-12)
        return tok[0] if single else tok

    def encode_instruction(self, instruction: Instruction) -> np.ndarray:
        """Concatenate the task, color, and region table rows. Instructions
        differing in one field differ exactly in that sub-block."""
        if not 0 <= instruction.task_id < len(TASK_NAMES):
            raise ValueError(f"unknown task_id {instruction.task_id}")
        if not 0 <= instruction.target_color < NUM_COLORS:
            raise ValueError(f"target_color {instruction.target_color} outside vocabulary")
        if not 0 <= instruction.target_region < NUM_REGIONS:
            raise ValueError(f"target_region {instruction.target_region} outside vocabulary")
        return np.concatenate(
            [
                self.task_table[instruction.task_id],
                self.color_table[instruction.target_color],
                self.region_table[instruction.target_region],
            ]
        )

    def weights(self) -> dict[str, np.ndarray]:
        """Named weight buffers, for checkpoint serialization (frozen)."""
        return {
            "w_latent": self.w_latent,
            "b_latent": self.b_latent,
            "w_feat": self.w_feat,
            "b_feat": self.b_feat,
            "task_table": self.task_table,
            "color_table": self.color_table,
            "region_table": self.region_table,
        }


def nearest_frame_index(latent: np.ndarray, candidates: np.ndarray) -> int:
    """Diagnostic decoder substitute: index of the candidate latent closest
    in L2 to the query. Ties resolve to the lowest index via argmin."""
    q = latent.reshape(-1)
    flat = candidates.reshape(candidates.shape[0], -1)
    d = np.sum((flat - q[None, :]) ** 2, axis=1)
    return int(np.argmin(d))
