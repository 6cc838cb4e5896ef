"""Two-stage training orchestration and the inference-time policy.

Stage I pretrains the future predictor and the inverse model separately on
mixed-embodiment observation data; neither stage reads action records, and
the loaders are built so that touching them is impossible rather than merely
avoided. Stage II loads both checkpoints, freezes the future predictor
(unless the variant says otherwise), and trains the projection, the pooled
cross-attention tokens, the inverse-model encoder, and the action head
end-to-end on labeled episodes. The inverse model's "future" input during
coupled training is the predicted future, not the ground truth, matching
what the policy sees at inference; a teacher-forcing flag exists for
diagnostics only.

Checkpoint config hashes are scoped to the sections that determine the
artifact, so downstream sweeps (finetuning budget, data fraction) can share
Stage-I checkpoints while genuine mismatches still fail loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from decodyn.adapter import AdapterDenoiser, adapter_loss, sample_actions
from decodyn.checkpoint import Checkpoint, file_checksum, load_checkpoint, save_checkpoint
from decodyn.config import ExperimentConfig, config_from_dict, config_to_dict
from decodyn.encoders import FrozenEncoders
from decodyn.gfdm import GfdmDenoiser, diffusion_loss, sample_future_batch
from decodyn.gidm import Gidm, MlpIdm, codebook_utilization, gidm_loss
from decodyn.metrics import MetricsLogger
from decodyn.nn import Block, CrossAttention, checksum_tensors, load_tensors, named_tensors, seeded_linear, seeded_param
from decodyn.rng import stream
from decodyn.schedules import NoiseSchedule, from_constants, make_schedule
from decodyn.synthworld import Instruction

ACTION_DIM = 3

_STAGE_SCOPES = {
    "gfdm": ("seed", "env", "encoders", "gfdm", "_pretrain_data", "_gfdm_budget"),
    "gidm": ("seed", "env", "encoders", "gidm", "_pretrain_data", "_gidm_budget"),
    "policy": None,  # full config
}


def stage_config_hash(cfg: ExperimentConfig, stage: str) -> str:
    """Hash of the config subset that determines a stage's artifact.

    Stage-I hashes deliberately exclude finetuning knobs (variant, budget,
    data fraction) so Stage-II sweeps can share pretraining checkpoints.
    """
    if stage not in _STAGE_SCOPES:
        raise ValueError(f"unknown stage {stage!r}")
    full = config_to_dict(cfg)
    scope = _STAGE_SCOPES[stage]
    if scope is None:
        payload = full
    else:
        payload = {}
        for key in scope:
            if key == "_pretrain_data":
                payload["data"] = {
                    "pretrain_episodes": full["data"]["pretrain_episodes"],
                    "rho_human": full["data"]["rho_human"],
                }
            elif key == "_gfdm_budget":
                payload["budget"] = {
                    k: full["pipeline"][k]
                    for k in ("lr", "weight_decay", "batch_size", "gfdm_steps", "log_every")
                }
            elif key == "_gidm_budget":
                payload["budget"] = {
                    k: full["pipeline"][k]
                    for k in ("lr", "weight_decay", "batch_size", "gidm_steps", "log_every")
                }
            else:
                payload[key] = full[key]
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# -- Stage-I data views ----------------------------------------------------

@dataclass(frozen=True)
class ObservationSequence:
    """Action-free view of an episode: frames plus instruction, nothing else.
    Pretraining consumes only these, which is the loader-level guarantee
    that Stage I never reads action records."""

    frames: np.ndarray  # (T+1, S, S, 3) float32 in [0, 1]
    instruction: Instruction
    embodiment: str


def observation_view(episodes) -> list[ObservationSequence]:
    return [
        ObservationSequence(
            frames=ep.observations, instruction=ep.instruction, embodiment=ep.embodiment
        )
        for ep in episodes
    ]


def _embodiment_counts(views: list[ObservationSequence]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for v in views:
        counts[v.embodiment] = counts.get(v.embodiment, 0) + 1
    return counts


@dataclass
class StageResult:
    checkpoint_path: Path
    checksum: str
    final_loss: float
    extra: dict


def _pad_window(arr: np.ndarray, start: int, length: int) -> np.ndarray:
    """arr[start : start+length], repeating the final row past the end."""
    idx = np.minimum(np.arange(start, start + length), arr.shape[0] - 1)
    return arr[idx]


def compute_latent_norm(latents) -> dict:
    """Standardizing affine for the future predictor's latent space.

    Raw frame latents carry most of their energy in a constant offset and
    vary far less than the unit noise the denoiser must resolve, so the
    diffusion runs on (z - mean) / std instead. The mean is per-dimension;
    the std is a single scalar so near-constant dimensions are not blown up.
    Stored in the predictor's checkpoint and applied by every consumer.
    """
    z = np.concatenate([np.asarray(l, dtype=np.float64) for l in latents], axis=0)
    mean = z.mean(axis=0)
    std = float(np.sqrt(max(float(((z - mean) ** 2).mean()), 1e-12)))
    return {"mean": mean.tolist(), "std": std}


def identity_latent_norm(latent_dim: int) -> dict:
    return {"mean": [0.0] * latent_dim, "std": 1.0}


def normalize_latents(norm: dict, z: np.ndarray) -> np.ndarray:
    mean = np.asarray(norm["mean"], dtype=np.float64)
    return (np.asarray(z, dtype=np.float64) - mean) / norm["std"]


def compute_feature_norm(features) -> dict:
    """Standardizing affine for the patch-feature space, same rationale as
    compute_latent_norm: nearly all token energy is static scene content
    shared across frames, and the consumers (inverse-model attention,
    adapter conditioning) need the few-percent dynamic remainder. The mean
    is per patch position and dimension; the std is one scalar. Computed
    during inverse-model pretraining, stored in its checkpoint, applied by
    every downstream feature consumer.
    """
    f = np.concatenate([np.asarray(x, dtype=np.float64) for x in features], axis=0)
    mean = f.mean(axis=0)
    std = float(np.sqrt(max(float(((f - mean) ** 2).mean()), 1e-12)))
    return {"mean": mean.tolist(), "std": std}


def identity_feature_norm(num_patches: int, feature_dim: int) -> dict:
    return {"mean": [[0.0] * feature_dim for _ in range(num_patches)], "std": 1.0}


def normalize_features(norm: dict, e: np.ndarray) -> np.ndarray:
    mean = np.asarray(norm["mean"], dtype=np.float64)
    return (np.asarray(e, dtype=np.float64) - mean) / norm["std"]


# -- Stage I: future predictor ----------------------------------------------

def pretrain_gfdm(cfg: ExperimentConfig, episodes, run_dir: str | Path) -> StageResult:
    """Train the latent future predictor on mixed-embodiment observations;
    deterministic in cfg.seed. Writes metrics.jsonl and gfdm.dck under
    run_dir and returns the checkpoint checksum."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    views = observation_view(episodes)
    if not views:
        raise ValueError("pretraining needs at least one episode")
    enc = FrozenEncoders(cfg.encoders, cfg.env.image_size)
    schedule = make_schedule(
        cfg.gfdm.schedule_kind, cfg.gfdm.schedule_steps, cfg.gfdm.beta_min, cfg.gfdm.beta_max
    )
    model = GfdmDenoiser(cfg.gfdm, enc.latent_dim, enc.text_dim, seed=cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.pipeline.lr, weight_decay=cfg.pipeline.weight_decay)

    latents = [enc.encode_latent(v.frames).reshape(v.frames.shape[0], -1) for v in views]
    latent_norm = compute_latent_norm(latents)
    latents = [normalize_latents(latent_norm, l) for l in latents]
    texts = [enc.encode_instruction(v.instruction) for v in views]
    h1 = cfg.gfdm.horizon + 1
    g = stream(cfg.seed, "gfdm-train")

    final_loss = float("nan")
    with MetricsLogger(run_dir / "metrics.jsonl", run_id="pretrain-gfdm") as log:
        for step in range(1, cfg.pipeline.gfdm_steps + 1):
            ep_ids = g.integers(0, len(views), size=cfg.pipeline.batch_size)
            z0 = np.empty((cfg.pipeline.batch_size, h1, enc.latent_dim))
            z_t = np.empty((cfg.pipeline.batch_size, enc.latent_dim))
            text = np.empty((cfg.pipeline.batch_size, enc.text_dim))
            for row, e in enumerate(ep_ids):
                t = int(g.integers(0, latents[e].shape[0]))
                z0[row] = _pad_window(latents[e], t, h1)
                z_t[row] = latents[e][t]
                text[row] = texts[e]
            opt.zero_grad()
            loss = diffusion_loss(
                model, schedule,
                torch.from_numpy(z0), torch.from_numpy(z_t), torch.from_numpy(text), g=g,
            )
            loss.backward()
            opt.step()
            final_loss = float(loss.detach())
            if step % cfg.pipeline.log_every == 0 or step == 1:
                log.log(step, loss=final_loss)

    ckpt = Checkpoint(
        module="gfdm",
        config_hash=stage_config_hash(cfg, "gfdm"),
        tensors=named_tensors(model),
        schedules={"gfdm": schedule.constants()},
        extra={
            "seed": cfg.seed,
            "steps": cfg.pipeline.gfdm_steps,
            "final_loss": final_loss,
            "encoder_checksum": enc.checksum(),
            "embodiment_counts": _embodiment_counts(views),
            "latent_norm": latent_norm,
        },
    )
    path = run_dir / "gfdm.dck"
    checksum = save_checkpoint(path, ckpt)
    return StageResult(path, checksum, final_loss, ckpt.extra)


# -- Stage I: inverse model --------------------------------------------------

def build_gidm(cfg: ExperimentConfig, enc: FrozenEncoders):
    slots = cfg.encoders.num_patches + cfg.pipeline.videoformer_tokens
    cls = Gidm if cfg.gidm.arch == "st_transformer" else MlpIdm
    return cls(
        cfg.gidm, cfg.encoders.feature_dim, enc.text_dim, slots, cfg.encoders.num_patches,
        seed=cfg.seed,
    )


def pretrain_gidm(cfg: ExperimentConfig, episodes, run_dir: str | Path) -> StageResult:
    """Self-supervised latent-action pretraining on observation pairs
    separated by the configured frame gap. Tracks codebook utilization and
    reseeds entries unused for dead_code_steps consecutive steps."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    views = observation_view(episodes)
    if not views:
        raise ValueError("pretraining needs at least one episode")
    enc = FrozenEncoders(cfg.encoders, cfg.env.image_size)
    model = build_gidm(cfg, enc)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.pipeline.lr, weight_decay=cfg.pipeline.weight_decay)

    feats = [enc.encode_features(v.frames) for v in views]
    feature_norm = compute_feature_norm(feats)
    feats = [normalize_features(feature_norm, f) for f in feats]
    texts = [enc.encode_instruction(v.instruction) for v in views]
    gap = cfg.gidm.frame_gap
    p, fd = cfg.encoders.num_patches, cfg.encoders.feature_dim
    g = stream(cfg.seed, "gidm-train")
    unused = np.zeros(cfg.gidm.codebook_size, dtype=np.int64)
    reseed_events = 0
    recent_indices: list[np.ndarray] = []

    final_loss = float("nan")
    final_util = 0.0
    with MetricsLogger(run_dir / "metrics.jsonl", run_id="pretrain-gidm") as log:
        for step in range(1, cfg.pipeline.gidm_steps + 1):
            b = cfg.pipeline.batch_size
            e_t = np.empty((b, p, fd))
            e_f = np.empty((b, p, fd))
            text = np.empty((b, enc.text_dim))
            for row in range(b):
                e = int(g.integers(0, len(views)))
                t = int(g.integers(0, feats[e].shape[0]))
                e_t[row] = feats[e][t]
                e_f[row] = feats[e][min(t + gap, feats[e].shape[0] - 1)]
                text[row] = texts[e]
            opt.zero_grad()
            total, parts, code = gidm_loss(
                model, torch.from_numpy(e_t), torch.from_numpy(e_f), torch.from_numpy(text)
            )
            total.backward()
            opt.step()
            final_loss = float(total.detach())

            seen = np.unique(code.indices)
            unused += 1
            unused[seen] = 0
            if cfg.gidm.quantize_mode == "vq":
                dead = model.reseed_dead_codes(unused, code.continuous, g)
                if dead:
                    reseed_events += len(dead)
                    unused[dead] = 0
                    log.log(step, reseeded=float(len(dead)))
            recent_indices.append(code.indices.ravel())
            recent_indices = recent_indices[-50:]
            final_util = codebook_utilization(
                np.concatenate(recent_indices), cfg.gidm.codebook_size
            )
            if step % cfg.pipeline.log_every == 0 or step == 1:
                log.log(step, loss=final_loss, utilization=final_util, **parts)

    ckpt = Checkpoint(
        module="gidm",
        config_hash=stage_config_hash(cfg, "gidm"),
        tensors=named_tensors(model),
        extra={
            "seed": cfg.seed,
            "steps": cfg.pipeline.gidm_steps,
            "final_loss": final_loss,
            "utilization": final_util,
            "reseed_events": reseed_events,
            "arch": cfg.gidm.arch,
            "encoder_checksum": enc.checksum(),
            "embodiment_counts": _embodiment_counts(views),
            "feature_norm": feature_norm,
        },
    )
    path = run_dir / "gidm.dck"
    checksum = save_checkpoint(path, ckpt)
    return StageResult(path, checksum, final_loss, ckpt.extra)


def scratch_checkpoint(
    cfg: ExperimentConfig, module: str, run_dir: str | Path, episodes=None
) -> StageResult:
    """Checkpoint a freshly initialized Stage-I module with zero training.

    Ablation arms that skip pretraining still consume a Stage-I artifact;
    extra["steps"] == 0 records that it is untrained. The config hash is the
    same stage hash a trained checkpoint would carry, so loading stays
    uniform downstream. For the future predictor, passing the pretraining
    episodes calibrates the same latent normalization a trained checkpoint
    would carry, keeping ablation arms on identical input scaling.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    enc = FrozenEncoders(cfg.encoders, cfg.env.image_size)
    if module == "gfdm":
        model = GfdmDenoiser(cfg.gfdm, enc.latent_dim, enc.text_dim, seed=cfg.seed)
        schedule = make_schedule(
            cfg.gfdm.schedule_kind, cfg.gfdm.schedule_steps, cfg.gfdm.beta_min, cfg.gfdm.beta_max
        )
        schedules = {"gfdm": schedule.constants()}
        if episodes is not None:
            views = observation_view(episodes)
            norm = compute_latent_norm(
                [enc.encode_latent(v.frames).reshape(v.frames.shape[0], -1) for v in views]
            )
        else:
            norm = identity_latent_norm(enc.latent_dim)
        arch = {"latent_norm": norm}
    elif module == "gidm":
        model = build_gidm(cfg, enc)
        schedules = {}
        if episodes is not None:
            views = observation_view(episodes)
            fnorm = compute_feature_norm([enc.encode_features(v.frames) for v in views])
        else:
            fnorm = identity_feature_norm(cfg.encoders.num_patches, cfg.encoders.feature_dim)
        arch = {"arch": cfg.gidm.arch, "feature_norm": fnorm}
    else:
        raise ValueError(f"no scratch checkpoint for module {module!r}")
    ckpt = Checkpoint(
        module=module,
        config_hash=stage_config_hash(cfg, module),
        tensors=named_tensors(model),
        schedules=schedules,
        extra={"seed": cfg.seed, "steps": 0, "encoder_checksum": enc.checksum(), **arch},
    )
    path = run_dir / f"{module}.dck"
    checksum = save_checkpoint(path, ckpt)
    return StageResult(path, checksum, float("nan"), ckpt.extra)


# -- Stage II glue modules ----------------------------------------------------

class ProjectionHead(nn.Module):
    """Two-layer map from one predicted latent frame to patch-feature tokens."""

    def __init__(self, g: np.random.Generator, latent_dim: int, hidden: int, num_patches: int, feature_dim: int):
        super().__init__()
        self.num_patches = num_patches
        self.feature_dim = feature_dim
        self.net = nn.Sequential(
            seeded_linear(g, latent_dim, hidden),
            nn.GELU(),
            seeded_linear(g, hidden, num_patches * feature_dim),
        )

    def forward(self, latent_flat: torch.Tensor) -> torch.Tensor:
        b = latent_flat.shape[0]
        return self.net(latent_flat).reshape(b, self.num_patches, self.feature_dim)


class VideoFormer(nn.Module):
    """Learnable tokens cross-attending over the denoiser's mid-layer
    activations, pooling the whole predicted trajectory into M tokens."""

    def __init__(self, g: np.random.Generator, num_tokens: int, dim: int, kv_dim: int, heads: int):
        super().__init__()
        self.tokens = seeded_param(g, num_tokens, dim, scale=0.5)
        self.attn = CrossAttention(g, dim, kv_dim, dim, heads)
        self.norm = nn.LayerNorm(dim, dtype=torch.float64)
        self.block = Block(g, dim, heads)

    def forward(self, mid: torch.Tensor) -> torch.Tensor:
        b = mid.shape[0]
        x = self.tokens[None].expand(b, -1, -1)
        x = x + self.attn(x, mid)
        return self.norm(self.block(x))


VARIANT_TRAINS = {
    "adapter": frozenset({"adapter"}),
    "gfdm+adapter": frozenset({"gfdm", "adapter"}),
    "gidm+adapter": frozenset({"gidm", "adapter"}),
    "all": frozenset({"gfdm", "gidm", "adapter"}),
}


@dataclass
class PolicyBundle:
    """Everything the policy needs at inference, plus provenance."""

    cfg: ExperimentConfig
    gfdm: GfdmDenoiser
    gfdm_schedule: NoiseSchedule
    gidm: object
    projection: ProjectionHead
    video_former: VideoFormer
    adapter: AdapterDenoiser
    adapter_schedule: NoiseSchedule
    variant: str
    parents: dict
    encoder_checksum: str
    latent_norm: dict
    feature_norm: dict

    def frozen_flags(self) -> dict:
        trains = VARIANT_TRAINS[self.variant]
        return {"gfdm": "gfdm" not in trains, "gidm": "gidm" not in trains, "adapter": False}


def _bundle_tensors(bundle: PolicyBundle) -> dict[str, np.ndarray]:
    out = {}
    for prefix, module in (
        ("gfdm", bundle.gfdm),
        ("gidm", bundle.gidm),
        ("projection", bundle.projection),
        ("video_former", bundle.video_former),
        ("adapter", bundle.adapter),
    ):
        for name, arr in named_tensors(module).items():
            if prefix == "gidm" and name.startswith("dec"):
                continue  # reconstruction decoder is dropped after Stage I
            out[f"{prefix}.{name}"] = arr
    return out


def save_bundle(bundle: PolicyBundle, path: str | Path) -> str:
    ckpt = Checkpoint(
        module="policy",
        config_hash=stage_config_hash(bundle.cfg, "policy"),
        tensors=_bundle_tensors(bundle),
        parents=bundle.parents,
        frozen=bundle.frozen_flags(),
        schedules={
            "gfdm": bundle.gfdm_schedule.constants(),
            "adapter": bundle.adapter_schedule.constants(),
        },
        extra={
            "variant": bundle.variant,
            "encoder_checksum": bundle.encoder_checksum,
            "config": config_to_dict(bundle.cfg),
            "latent_norm": bundle.latent_norm,
            "feature_norm": bundle.feature_norm,
        },
    )
    return save_checkpoint(path, ckpt)


def _fresh_modules(cfg: ExperimentConfig, enc: FrozenEncoders):
    gfdm = GfdmDenoiser(cfg.gfdm, enc.latent_dim, enc.text_dim, seed=cfg.seed)
    gidm = build_gidm(cfg, enc)
    g_glue = stream(cfg.seed, "glue-init")
    projection = ProjectionHead(
        g_glue, enc.latent_dim, cfg.pipeline.projection_hidden,
        cfg.encoders.num_patches, cfg.encoders.feature_dim,
    )
    video_former = VideoFormer(
        g_glue, cfg.pipeline.videoformer_tokens, cfg.pipeline.videoformer_dim,
        cfg.gfdm.width, cfg.gidm.heads,
    )
    adapter = AdapterDenoiser(
        cfg.adapter, cfg.gidm.num_queries * cfg.gidm.latent_dim,
        cfg.encoders.feature_dim, enc.text_dim, seed=cfg.seed,
        code_tokens=cfg.gidm.num_queries,
    )
    return gfdm, gidm, projection, video_former, adapter


def load_bundle(path: str | Path) -> PolicyBundle:
    ckpt = load_checkpoint(path)
    if ckpt.module != "policy":
        raise ValueError(f"{path}: expected a policy bundle, found module {ckpt.module!r}")
    cfg = config_from_dict(ckpt.extra["config"]).validate()
    enc = FrozenEncoders(cfg.encoders, cfg.env.image_size)
    if enc.checksum() != ckpt.extra["encoder_checksum"]:
        raise ValueError("encoder weights implied by the config do not match the bundle")
    gfdm, gidm, projection, video_former, adapter = _fresh_modules(cfg, enc)
    for prefix, module in (
        ("gfdm", gfdm),
        ("gidm", gidm),
        ("projection", projection),
        ("video_former", video_former),
        ("adapter", adapter),
    ):
        stored = {
            name[len(prefix) + 1 :]: arr
            for name, arr in ckpt.tensors.items()
            if name.startswith(prefix + ".")
        }
        merged = named_tensors(module)
        merged.update(stored)
        load_tensors(module, merged)
    gfdm.requires_grad_(False)
    return PolicyBundle(
        cfg=cfg,
        gfdm=gfdm,
        gfdm_schedule=from_constants(ckpt.schedules["gfdm"]),
        gidm=gidm,
        projection=projection,
        video_former=video_former,
        adapter=adapter,
        adapter_schedule=from_constants(ckpt.schedules["adapter"]),
        variant=ckpt.extra["variant"],
        parents=ckpt.parents,
        encoder_checksum=ckpt.extra["encoder_checksum"],
        latent_norm=ckpt.extra["latent_norm"],
        feature_norm=ckpt.extra["feature_norm"],
    )


# -- Stage II: coupled finetuning ---------------------------------------------

def _fused_future(cfg, bundle_modules, latents, mid, gap: int):
    """Concatenate the projected predicted frame at the pairing offset with
    the pooled trajectory tokens: (B, num_patches + M, feature_dim)."""
    projection, video_former = bundle_modules
    frame = latents[:, gap]
    projected = projection(frame)
    pooled = video_former(mid)
    return torch.cat([projected, pooled], dim=1)


def finetune_coupled(
    cfg: ExperimentConfig,
    episodes,
    run_dir: str | Path,
    gfdm_ckpt: str | Path,
    gidm_ckpt: str | Path | None,
    allow_config_mismatch: bool = False,
) -> tuple[PolicyBundle, StageResult]:
    """Stage II: train projection, pooled tokens, inverse-model encoder, and
    the action head end-to-end on labeled robot episodes. The future
    predictor stays bit-frozen unless the variant includes it (asserted by
    checksum). gidm_ckpt=None trains the inverse model from scratch, the
    "no decoupled pretraining" ablation arm."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    variant = cfg.pipeline.finetune_variant
    trains = VARIANT_TRAINS[variant]

    for ep in episodes:
        if ep.embodiment != "robot" or ep.actions is None:
            raise ValueError("coupled finetuning requires labeled robot episodes")
    keep = max(1, round(cfg.data.finetune_fraction * len(episodes)))
    episodes = episodes[:keep]

    enc = FrozenEncoders(cfg.encoders, cfg.env.image_size)
    gfdm, gidm, projection, video_former, adapter = _fresh_modules(cfg, enc)

    gfdm_loaded = load_checkpoint(
        gfdm_ckpt,
        expected_config_hash=stage_config_hash(cfg, "gfdm"),
        allow_config_mismatch=allow_config_mismatch,
    )
    load_tensors(gfdm, gfdm_loaded.tensors)
    parents = {"gfdm": file_checksum(gfdm_ckpt)}
    if gidm_ckpt is not None:
        gidm_loaded = load_checkpoint(
            gidm_ckpt,
            expected_config_hash=stage_config_hash(cfg, "gidm"),
            allow_config_mismatch=allow_config_mismatch,
        )
        load_tensors(gidm, gidm_loaded.tensors)
        parents["gidm"] = file_checksum(gidm_ckpt)

    gfdm_schedule = from_constants(gfdm_loaded.schedules["gfdm"])
    latent_norm = gfdm_loaded.extra.get("latent_norm") or identity_latent_norm(enc.latent_dim)
    adapter_schedule = make_schedule(
        "linear", cfg.adapter.schedule_steps, cfg.adapter.beta_min, cfg.adapter.beta_max
    )
    feature_norm = None
    if gidm_ckpt is not None:
        feature_norm = gidm_loaded.extra.get("feature_norm")

    gfdm.requires_grad_("gfdm" in trains)
    gidm.requires_grad_("gidm" in trains)
    gfdm_before = checksum_tensors(named_tensors(gfdm))
    gidm_before = checksum_tensors(named_tensors(gidm))

    trainable: list[nn.Parameter] = list(projection.parameters()) + list(video_former.parameters())
    trainable += list(adapter.parameters())
    if "gfdm" in trains:
        trainable += list(gfdm.parameters())
    if "gidm" in trains:
        trainable += list(gidm.parameters())
    opt = torch.optim.AdamW(trainable, lr=cfg.pipeline.lr, weight_decay=cfg.pipeline.weight_decay)

    latents = [
        normalize_latents(latent_norm, enc.encode_latent(ep.observations).reshape(ep.frames.shape[0], -1))
        for ep in episodes
    ]
    feats = [enc.encode_features(ep.observations) for ep in episodes]
    if feature_norm is None:
        # No pretrained inverse model to inherit the calibration from:
        # compute it from the labeled episodes so the scratch arm runs in
        # the same standardized feature space.
        feature_norm = compute_feature_norm(feats)
    feats = [normalize_features(feature_norm, f) for f in feats]
    texts = [enc.encode_instruction(ep.instruction) for ep in episodes]
    actions = [np.asarray(ep.actions, dtype=np.float64) for ep in episodes]

    gap = cfg.gidm.frame_gap
    chunk_len = cfg.adapter.chunk_len
    g = stream(cfg.seed, "finetune-train")
    b = cfg.pipeline.batch_size

    final_loss = float("nan")
    with MetricsLogger(run_dir / "metrics.jsonl", run_id="finetune") as log:
        for step in range(1, cfg.pipeline.finetune_steps + 1):
            z_t = np.empty((b, enc.latent_dim))
            e_t = np.empty((b, cfg.encoders.num_patches, cfg.encoders.feature_dim))
            e_real_future = np.empty_like(e_t)
            text = np.empty((b, enc.text_dim))
            # Rows past the episode end hold the settle action (zero delta,
            # open request): exactly what the demonstrator emits once the
            # instruction is satisfied, so padding is a real continuation.
            chunk = np.zeros((b, chunk_len, ACTION_DIM))
            chunk[:, :, 2] = -1.0
            for row in range(b):
                e = int(g.integers(0, len(episodes)))
                t = int(g.integers(0, actions[e].shape[0]))
                z_t[row] = latents[e][t]
                e_t[row] = feats[e][t]
                e_real_future[row] = feats[e][min(t + gap, feats[e].shape[0] - 1)]
                text[row] = texts[e]
                avail = actions[e][t : t + chunk_len]
                chunk[row, : avail.shape[0]] = avail

            z_t_t = torch.from_numpy(z_t)
            text_t = torch.from_numpy(text)
            pred_latents, mid = sample_future_batch(
                gfdm, gfdm_schedule, z_t_t, text_t,
                steps=cfg.gfdm.infer_steps, g=g, source=cfg.gfdm.one_step_source,
                build_graph="gfdm" in trains,
            )
            fused = _fused_future(cfg, (projection, video_former), pred_latents, mid, gap)
            if cfg.pipeline.teacher_forcing:
                future_tokens = torch.from_numpy(e_real_future)
            else:
                future_tokens = fused
            cont = gidm.encode_latent_action(torch.from_numpy(e_t), future_tokens, text_t)
            code = gidm.discretize(cont)
            loss = adapter_loss(
                adapter, adapter_schedule, code.straight_through, fused, text_t,
                torch.from_numpy(chunk), g=g,
            )
            if "gidm" in trains:
                loss = loss + gidm.bottleneck_loss(code)
            opt.zero_grad()
            loss.backward()
            opt.step()
            final_loss = float(loss.detach())
            if step % cfg.pipeline.log_every == 0 or step == 1:
                log.log(step, loss=final_loss)

    if "gfdm" not in trains:
        after = checksum_tensors(named_tensors(gfdm))
        if after != gfdm_before:
            raise AssertionError("frozen future-predictor parameters changed during finetuning")
    if "gidm" not in trains:
        if checksum_tensors(named_tensors(gidm)) != gidm_before:
            raise AssertionError("frozen inverse-model parameters changed during finetuning")

    bundle = PolicyBundle(
        cfg=cfg,
        gfdm=gfdm,
        gfdm_schedule=gfdm_schedule,
        gidm=gidm,
        projection=projection,
        video_former=video_former,
        adapter=adapter,
        adapter_schedule=adapter_schedule,
        variant=variant,
        parents=parents,
        encoder_checksum=enc.checksum(),
        latent_norm=latent_norm,
        feature_norm=feature_norm,
    )
    path = run_dir / "policy.dck"
    checksum = save_bundle(bundle, path)
    result = StageResult(path, checksum, final_loss, {"variant": variant, "episodes": len(episodes)})
    return bundle, result


# -- Inference ---------------------------------------------------------------

def policy_act(
    bundle: PolicyBundle,
    obs: np.ndarray,
    instruction: Instruction,
    seed: int,
    timings: dict | None = None,
    future_noise_scale: float = 0.0,
) -> np.ndarray:
    """One policy step: observation and instruction in, action chunk out.

    Deterministic in (bundle, obs, instruction, seed). Per-stage wall-clock
    durations are appended to `timings` lists keyed "gfdm"/"gidm"/"adapter"
    when a dict is passed. future_noise_scale corrupts the predicted future
    features for the perturbation study; 0 leaves them untouched.
    """
    cfg = bundle.cfg
    enc = FrozenEncoders(cfg.encoders, cfg.env.image_size)

    t0 = time.perf_counter()
    z_t = torch.from_numpy(
        normalize_latents(bundle.latent_norm, enc.encode_latent(obs).reshape(-1))[None]
    )
    e_t = torch.from_numpy(normalize_features(bundle.feature_norm, enc.encode_features(obs))[None])
    text = torch.from_numpy(enc.encode_instruction(instruction)[None])
    g = stream(seed, "policy-act")
    with torch.no_grad():
        pred_latents, mid = sample_future_batch(
            bundle.gfdm, bundle.gfdm_schedule, z_t, text,
            steps=cfg.gfdm.infer_steps, g=g, source=cfg.gfdm.one_step_source,
        )
        if future_noise_scale > 0.0:
            pred_latents = pred_latents + torch.from_numpy(
                future_noise_scale * g.normal(size=tuple(pred_latents.shape))
            )
            mid = mid + torch.from_numpy(future_noise_scale * g.normal(size=tuple(mid.shape)))
        t1 = time.perf_counter()

        fused = _fused_future(
            cfg, (bundle.projection, bundle.video_former), pred_latents, mid, cfg.gidm.frame_gap
        )
        cont = bundle.gidm.encode_latent_action(e_t, fused, text)
        code = bundle.gidm.discretize(cont)
        t2 = time.perf_counter()

        chunk = sample_actions(
            bundle.adapter, bundle.adapter_schedule, code.straight_through, fused, text,
            steps=cfg.adapter.sample_steps, seed=int(g.integers(0, 2**63 - 1)),
        )
        t3 = time.perf_counter()

    if timings is not None:
        timings.setdefault("gfdm", []).append(t1 - t0)
        timings.setdefault("gidm", []).append(t2 - t1)
        timings.setdefault("adapter", []).append(t3 - t2)
    return chunk
