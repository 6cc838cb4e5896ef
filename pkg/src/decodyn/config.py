"""Experiment configuration: a versioned dataclass tree.

Config files are structured text (JSON or YAML). Parsing is strict:
unknown keys anywhere in the tree are rejected with the offending path,
because silent typos are the dominant way experiments get corrupted.
A resolved copy (all defaults filled in) is persisted beside every run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or schema mismatches."""


@dataclass
class EnvConfig:
    image_size: int = 32
    num_objects: int = 2
    num_colors: int = 4
    num_regions: int = 4
    gain_robot: float = 1.0
    gain_human: float = 1.5           # human-analog dynamics gain (1.5x robot)
    delta_max: float = 0.04           # max effector displacement per step; sized so
                                      # typical tasks span 15-30 steps, several action
                                      # chunks, rather than completing inside one
    pickup_radius: float = 0.08
    region_radius: float = 0.10
    stack_eps: float = 0.06
    drawer_open_thresh: float = 0.7   # open success: extent >= thresh (closed boundary)
    drawer_close_thresh: float = 0.3  # close success: extent <= thresh
    max_steps: int = 100


@dataclass
class DataConfig:
    pretrain_episodes: int = 240
    rho_human: float = 0.5            # fraction of pretraining episodes that are human-analog
    finetune_episodes: int = 64       # labeled robot episodes for coupled finetuning
    demo_jitter: float = 0.5          # per-step actuation noise in demonstrations; keeps
                                      # futures from being a function of the current frame
    demo_drift: float = 0.5           # per-episode delta bias, same purpose at low frequency
    finetune_fraction: float = 1.0    # data-efficiency sweeps scale this down


@dataclass
class EncoderConfig:
    latent_channels: int = 8          # latent frame is channels x grid x grid
    latent_grid: int = 8
    num_patches: int = 16             # patch-feature tokens per frame (4x4 grid)
    feature_dim: int = 64
    text_task_dim: int = 16           # instruction embedding = task | color | region blocks
    text_color_dim: int = 8
    text_region_dim: int = 8
    weights_seed: int = 1234          # frozen weights are a pure function of this


@dataclass
class GfdmConfig:
    horizon: int = 16                 # predicts frames t .. t+horizon (horizon+1 latents)
    schedule_kind: str = "linear"
    schedule_steps: int = 100
    beta_min: float = 1e-4
    # Terminal alpha_bar must be ~0 or the sampler's pure-noise start is a
    # regime the denoiser never trained on; 0.2 over 100 steps lands at 2e-5.
    beta_max: float = 0.2
    layers: int = 4
    width: int = 128
    heads: int = 4
    infer_steps: int = 1              # sampler updates at inference (single-step default)
    one_step_source: str = "pure_noise"  # or "noised_current"


@dataclass
class GidmConfig:
    num_queries: int = 4
    latent_dim: int = 64
    codebook_size: int = 32
    frame_gap: int = 4                # n: frames between the paired observations;
                                      # must sit well inside typical episode length or
                                      # the future frame saturates at the terminal one
                                      # and the pair loses its phase information
    beta_commit: float = 0.25
    layers: int = 4
    width: int = 64
    heads: int = 4
    decoder_layers: int = 2
    dead_code_steps: int = 200        # unused-entry reseed interval; guards collapse
    ema_codebook: bool = False        # gradient-based codebook learning by default
    use_instruction: bool = True
    arch: str = "st_transformer"      # or "mlp": pooled-feature baseline head
    quantize_mode: str = "vq"         # vq | binning | gaussian_mixture | continuous


@dataclass
class AdapterConfig:
    chunk_len: int = 8
    layers: int = 6
    width: int = 128
    heads: int = 4
    schedule_steps: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.4             # terminal alpha_bar ~8e-6, see GfdmConfig note
    sample_steps: int = 10
    exec_stride: int = 4              # receding horizon: execute this many, then re-plan
    condition_on_fused: bool = True   # adapter sees fused future features, not just codes


@dataclass
class PipelineConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    gfdm_steps: int = 500
    gidm_steps: int = 500
    finetune_steps: int = 400
    videoformer_tokens: int = 8
    videoformer_dim: int = 64
    projection_hidden: int = 256
    finetune_variant: str = "gidm+adapter"  # adapter | gfdm+adapter | gidm+adapter | all
    teacher_forcing: bool = False     # diagnostics only: feed ground-truth futures
    log_every: int = 10


@dataclass
class EvalConfig:
    chain_length: int = 5
    num_chains: int = 20
    max_steps_per_task: int = 100
    ablation_seeds: int = 3
    latency_trials: int = 5


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    gfdm: GfdmConfig = field(default_factory=GfdmConfig)
    gidm: GidmConfig = field(default_factory=GidmConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"config schema_version {self.schema_version} is not supported by this "
                f"build (expected {SCHEMA_VERSION}); migrate the config file explicitly"
            )
        if not (0.0 <= self.data.rho_human <= 1.0):
            raise ConfigError(f"data.rho_human must be in [0, 1], got {self.data.rho_human}")
        if not (0.0 < self.data.finetune_fraction <= 1.0):
            raise ConfigError("data.finetune_fraction must be in (0, 1]")
        if not (1 <= self.env.num_objects <= 4):
            raise ConfigError(f"env.num_objects must be in [1, 4], got {self.env.num_objects}")
        if self.gfdm.schedule_kind != "linear":
            raise ConfigError(f"unknown schedule kind {self.gfdm.schedule_kind!r}")
        if not (0.0 < self.gfdm.beta_min <= self.gfdm.beta_max < 1.0):
            raise ConfigError("gfdm beta bounds must satisfy 0 < beta_min <= beta_max < 1")
        for name, sc in (("gfdm", self.gfdm), ("adapter", self.adapter)):
            # Samplers start from N(0, I); training must reach that regime.
            log_abar = float(np.sum(np.log1p(-np.linspace(
                sc.beta_min, sc.beta_max, sc.schedule_steps))))
            if log_abar > np.log(1e-2):
                raise ConfigError(
                    f"{name} schedule keeps terminal alpha_bar at "
                    f"{np.exp(log_abar):.3g} > 1e-2; raise beta_max or steps so "
                    "forward noising actually reaches the sampler's pure-noise start"
                )
        if self.gfdm.one_step_source not in ("pure_noise", "noised_current"):
            raise ConfigError(f"unknown one_step_source {self.gfdm.one_step_source!r}")
        if self.gidm.codebook_size < 2:
            raise ConfigError("gidm.codebook_size must be >= 2")
        if self.gidm.frame_gap < 1:
            raise ConfigError("gidm.frame_gap must be >= 1")
        if self.gidm.arch not in ("st_transformer", "mlp"):
            raise ConfigError(f"unknown gidm.arch {self.gidm.arch!r}")
        if self.gidm.quantize_mode not in QUANTIZE_MODES:
            raise ConfigError(
                f"unknown gidm.quantize_mode {self.gidm.quantize_mode!r}; "
                f"expected one of {sorted(QUANTIZE_MODES)}"
            )
        if self.pipeline.finetune_variant not in FINETUNE_VARIANTS:
            raise ConfigError(
                f"unknown finetune_variant {self.pipeline.finetune_variant!r}; "
                f"expected one of {sorted(FINETUNE_VARIANTS)}"
            )
        if self.adapter.exec_stride < 1 or self.adapter.exec_stride > self.adapter.chunk_len:
            raise ConfigError("adapter.exec_stride must be in [1, chunk_len]")
        if self.eval.chain_length < 1:
            raise ConfigError("eval.chain_length must be >= 1")
        return self


FINETUNE_VARIANTS = ("adapter", "gfdm+adapter", "gidm+adapter", "all")
QUANTIZE_MODES = ("vq", "binning", "gaussian_mixture", "continuous")


def _from_dict(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        loc = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(loc + k for k in unknown))}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str) and f.type.endswith("Config")):
            sub_cls = _SECTION_TYPES[name]
            kwargs[name] = _from_dict(sub_cls, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "env": EnvConfig,
    "data": DataConfig,
    "encoders": EncoderConfig,
    "gfdm": GfdmConfig,
    "gidm": GidmConfig,
    "adapter": AdapterConfig,
    "pipeline": PipelineConfig,
    "eval": EvalConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data, "").validate()


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a JSON or YAML config file (JSON is a YAML subset)."""
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def save_resolved(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def config_hash(cfg_or_section: Any) -> str:
    """Stable hash of a config (sub)tree; used for checkpoint lineage."""
    if dataclasses.is_dataclass(cfg_or_section):
        payload = dataclasses.asdict(cfg_or_section)
    else:
        payload = cfg_or_section
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
