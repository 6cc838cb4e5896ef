"""Episode generation and the on-disk shard format.

A dataset is a directory holding one shard file per split plus a JSON
manifest with per-shard checksums. Robot splits carry actions; the
human-analog split is observation-only by construction. The full byte
layout is documented in docs/formats.md and mirrored in the reader below.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from decodyn.config import ExperimentConfig, config_hash
from decodyn.rng import derive_seed
from decodyn.synthworld.env import Instruction, init_env, render_u8
from decodyn.synthworld.expert import sample_task_chain, simulate_demo

SHARD_MAGIC = b"DDSH"
SHARD_VERSION = 1
ACTION_DIM = 3


@dataclass(frozen=True)
class Episode:
    """One demonstration. frames is (T+1, S, S, 3) u8; actions is (T, 3)
    float32 for robot episodes and None for the human analog."""

    frames: np.ndarray
    actions: np.ndarray | None
    instruction: Instruction
    embodiment: str
    seed: int

    def __post_init__(self) -> None:
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4:
            raise ValueError("frames must be a (T+1, S, S, 3) uint8 array")
        if self.embodiment == "human_analog":
            if self.actions is not None:
                raise ValueError("human-analog episodes carry no actions")
        elif self.actions is not None:
            if self.actions.shape != (self.frames.shape[0] - 1, ACTION_DIM):
                raise ValueError(
                    f"actions shape {self.actions.shape} inconsistent with "
                    f"{self.frames.shape[0]} frames"
                )

    def frames_float(self) -> np.ndarray:
        return self.frames.astype(np.float32) / np.float32(255.0)

    @property
    def observations(self) -> np.ndarray:
        """Frames as float32 in [0, 1], the convention consumers expect."""
        return self.frames_float()


def generate_episode(cfg: ExperimentConfig, seed: int, embodiment: str = "robot") -> Episode:
    """Roll the demonstrator on a fresh scene for one sampled instruction.

    The instruction comes from sample_task_chain with length 1, which
    pre-verifies noiseless expert success, so the recorded rollout (settled
    through the release) always ends in a satisfied instruction. The
    demonstrator adds actuation noise (data config); noise draws that blow
    the step budget are retried with derived seeds.
    """
    env_cfg = cfg.env
    state = init_env(env_cfg, seed)
    instr = sample_task_chain(state, 1, seed, env_cfg, embodiment)[0]
    rollout = None
    for attempt in range(8):
        rollout = simulate_demo(
            state, instr, env_cfg,
            seed=derive_seed(seed, "demo-try", attempt),
            embodiment=embodiment,
            jitter=cfg.data.demo_jitter,
            drift=cfg.data.demo_drift,
        )
        if rollout.succeeded:
            break
    if not rollout.succeeded:
        raise RuntimeError(f"demonstrator failed on a pre-verified instruction (seed={seed})")
    frames = np.stack([render_u8(s, env_cfg, embodiment) for s in rollout.states])
    if embodiment == "human_analog":
        actions = None
    else:
        actions = np.stack([a.as_vector() for a in rollout.actions]).astype(np.float32)
    return Episode(frames=frames, actions=actions, instruction=instr, embodiment=embodiment, seed=seed)


def _episode_record(ep: Episode) -> bytes:
    meta = {
        "task_id": ep.instruction.task_id,
        "target_color": ep.instruction.target_color,
        "target_region": ep.instruction.target_region,
        "embodiment": ep.embodiment,
        "seed": ep.seed,
        "num_frames": int(ep.frames.shape[0]),
        "image_size": int(ep.frames.shape[1]),
        "has_actions": ep.actions is not None,
        "action_dim": ACTION_DIM,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [len(meta_bytes).to_bytes(4, "little"), meta_bytes, ep.frames.tobytes()]
    if ep.actions is not None:
        parts.append(ep.actions.astype("<f4").tobytes())
    body = b"".join(parts)
    return len(body).to_bytes(4, "little") + body


def write_shard(path: Path, episodes: list[Episode], split: str, seed: int) -> str:
    """Write one split shard; returns the payload sha256 recorded in the header."""
    payload = b"".join(_episode_record(ep) for ep in episodes)
    digest = hashlib.sha256(payload).hexdigest()
    header = json.dumps(
        {"split": split, "count": len(episodes), "seed": seed, "payload_sha256": digest},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(SHARD_VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        fh.write(payload)
    return digest


def read_shard(path: Path) -> list[Episode]:
    """Parse a shard, verifying magic, version, and the payload checksum."""
    raw = Path(path).read_bytes()
    if raw[:4] != SHARD_MAGIC:
        raise ValueError(f"{path}: not a shard file (bad magic)")
    version = int.from_bytes(raw[4:8], "little")
    if version != SHARD_VERSION:
        raise ValueError(f"{path}: unsupported shard version {version}")
    header_len = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    payload = raw[12 + header_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise ValueError(f"{path}: payload checksum mismatch")
    episodes: list[Episode] = []
    off = 0
    for _ in range(header["count"]):
        body_len = int.from_bytes(payload[off : off + 4], "little")
        body = payload[off + 4 : off + 4 + body_len]
        off += 4 + body_len
        meta_len = int.from_bytes(body[:4], "little")
        meta = json.loads(body[4 : 4 + meta_len].decode("utf-8"))
        pos = 4 + meta_len
        t1, size = meta["num_frames"], meta["image_size"]
        n_img = t1 * size * size * 3
        frames = np.frombuffer(body[pos : pos + n_img], dtype=np.uint8).reshape(t1, size, size, 3)
        pos += n_img
        actions = None
        if meta["has_actions"]:
            n_act = (t1 - 1) * meta["action_dim"]
            actions = np.frombuffer(body[pos : pos + 4 * n_act], dtype="<f4").reshape(
                t1 - 1, meta["action_dim"]
            )
        episodes.append(
            Episode(
                frames=frames.copy(),
                actions=None if actions is None else actions.copy(),
                instruction=Instruction(meta["task_id"], meta["target_color"], meta["target_region"]),
                embodiment=meta["embodiment"],
                seed=meta["seed"],
            )
        )
    return episodes


@dataclass(frozen=True)
class DatasetManifest:
    path: Path
    splits: dict

    @property
    def counts(self) -> dict:
        return {name: info["count"] for name, info in self.splits.items()}


def generate_dataset(cfg: ExperimentConfig, seed: int, out_dir: Path) -> DatasetManifest:
    """Generate all splits and write shards plus dataset_manifest.json.

    Splits:
      robot     pretraining demonstrations with actions
      human     human-analog pretraining clips, observation-only
      finetune  labeled robot demonstrations for the adaptation stage

    The human count is round(pretrain_episodes * rho_human); the robot
    split takes the remainder. Episode seeds derive from the dataset seed
    via derive_seed(seed, "ep-<split>", index), so regenerating with the
    same config and seed reproduces byte-identical shards.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_human = int(round(cfg.data.pretrain_episodes * cfg.data.rho_human))
    n_robot = cfg.data.pretrain_episodes - n_human
    plan = (
        ("robot", "robot", n_robot),
        ("human", "human_analog", n_human),
        ("finetune", "robot", cfg.data.finetune_episodes),
    )
    splits = {}
    for split, embodiment, count in plan:
        episodes = [
            generate_episode(cfg, derive_seed(seed, f"ep-{split}", i), embodiment)
            for i in range(count)
        ]
        path = out_dir / f"{split}.shard"
        digest = write_shard(path, episodes, split, seed)
        splits[split] = {
            "path": path.name,
            "count": count,
            "embodiment": embodiment,
            "actions": embodiment != "human_analog",
            "sha256": digest,
        }
    manifest = {
        "version": SHARD_VERSION,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "splits": splits,
    }
    manifest_path = out_dir / "dataset_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return DatasetManifest(path=manifest_path, splits=splits)


def load_manifest(out_dir: Path) -> DatasetManifest:
    path = Path(out_dir) / "dataset_manifest.json"
    data = json.loads(path.read_text())
    return DatasetManifest(path=path, splits=data["splits"])


def load_split(out_dir: Path, split: str) -> list[Episode]:
    manifest = load_manifest(out_dir)
    if split not in manifest.splits:
        raise KeyError(f"split {split!r} not in manifest ({sorted(manifest.splits)})")
    return read_shard(Path(out_dir) / manifest.splits[split]["path"])
