"""Chained-rollout evaluation, the linear-dynamics probe, latency
measurement, and the ablation experiment runner.

Rollouts use a receding-horizon protocol: the actor emits an action chunk,
the first EXEC_STRIDE actions run in the environment, then the actor
replans. A chain advances to the next instruction on success and stops at
the first instruction that exhausts its per-task step budget. The headline
metric is the mean number of instructions completed in a row.

The linear fixture replaces world dynamics with s' = s + G a while keeping
the real renderer and the full policy stack, so an analytic inverse
G^-1 (s' - s) grades the learned policy's actions against exact targets.

Ablation suites train arms under matched budgets and seeds (asserted from
the stored checkpoint manifests) and report per-seed chained lengths, means,
and paired sign tests for each documented directional comparison.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import binomtest

from decodyn.adapter import sample_actions
from decodyn.checkpoint import load_checkpoint
from decodyn.config import ExperimentConfig, config_to_dict
from decodyn.encoders import FrozenEncoders
from decodyn.gfdm import sample_future_batch
from decodyn.pipeline import (
    ACTION_DIM,
    PolicyBundle,
    StageResult,
    _fused_future,
    finetune_coupled,
    normalize_features,
    normalize_latents,
    policy_act,
    pretrain_gfdm,
    pretrain_gidm,
    scratch_checkpoint,
    stage_config_hash,
)
from decodyn.rng import derive_seed, stream
from decodyn.synthworld import (
    EnvState,
    Instruction,
    SceneObject,
    action_from_vector,
    init_env,
    render_u8,
    sample_task_chain,
    scripted_expert,
    step,
    success,
)
from decodyn.synthworld.dataset import Episode, generate_dataset, load_split

EXEC_STRIDE = 4  # actions executed per replan; the rest of the chunk is dropped


# -- Rollouts ------------------------------------------------------------------

@dataclass(frozen=True)
class RolloutResult:
    """Outcome of one chained rollout.

    per_task_success has one flag per instruction in the chain; everything
    after the first failure is False because the rollout stops there.
    """

    per_task_success: tuple[bool, ...]
    steps_used: int
    env_seed: int

    @property
    def chain_len_completed(self) -> int:
        n = 0
        for ok in self.per_task_success:
            if not ok:
                break
            n += 1
        return n


class PolicyActor:
    """Adapts a trained policy bundle to the rollout actor protocol."""

    def __init__(self, bundle: PolicyBundle, future_noise_scale: float = 0.0):
        self.bundle = bundle
        self.future_noise_scale = future_noise_scale

    def __call__(self, obs, state, instruction, seed):
        return policy_act(
            self.bundle, obs, instruction, seed, future_noise_scale=self.future_noise_scale
        )


class ExpertActor:
    """Privileged scripted baseline; fills the chunk by simulating forward.

    The filled chunk replayed open-loop reproduces the closed-loop expert
    trajectory exactly because the environment is deterministic.
    """

    def __init__(self, env_cfg, chunk_len: int = EXEC_STRIDE):
        self.env_cfg = env_cfg
        self.chunk_len = chunk_len

    def __call__(self, obs, state, instruction, seed):
        sim = state
        out = []
        for _ in range(self.chunk_len):
            a = scripted_expert(sim, instruction, self.env_cfg)
            sim = step(sim, a, self.env_cfg)
            out.append(a.as_vector())
        return np.stack(out)


class RandomActor:
    """Uniform actions in [-1, 1]; the floor every learned policy must beat."""

    def __init__(self, seed: int = 0, chunk_len: int = EXEC_STRIDE):
        self.seed = seed
        self.chunk_len = chunk_len

    def __call__(self, obs, state, instruction, seed):
        g = stream(self.seed, "random-act", seed)
        return g.uniform(-1.0, 1.0, size=(self.chunk_len, ACTION_DIM))


def rollout_chain(
    cfg: ExperimentConfig,
    env_seed: int,
    actor,
    k: int | None = None,
    max_steps_per_task: int | None = None,
    policy_seed: int = 0,
) -> RolloutResult:
    """Execute one instruction chain with the given actor.

    The chain is sampled up front from the initial scene (each slot verified
    achievable by the scripted expert), so a perfect policy can complete all
    k instructions. The actor may be a PolicyBundle or any callable
    (obs, state, instruction, seed) -> (L, 3) action chunk.
    """
    if isinstance(actor, PolicyBundle):
        actor = PolicyActor(actor)
    k = cfg.eval.chain_length if k is None else k
    budget0 = cfg.eval.max_steps_per_task if max_steps_per_task is None else max_steps_per_task
    if k < 1:
        raise ValueError(f"chain length must be >= 1, got {k}")

    state = init_env(cfg.env, env_seed)
    chain = sample_task_chain(state, k, env_seed, cfg.env)
    per_task = []
    steps_used = 0
    calls = 0
    for instr in chain:
        done = success(state, instr, cfg.env)
        budget = budget0
        while not done and budget > 0:
            obs = render_u8(state, cfg.env)
            chunk = np.asarray(actor(obs, state, instr, derive_seed(policy_seed, "act", calls)))
            calls += 1
            for vec in chunk[:EXEC_STRIDE]:
                state = step(state, action_from_vector(np.clip(vec, -1.0, 1.0)), cfg.env)
                steps_used += 1
                budget -= 1
                done = success(state, instr, cfg.env)
                if done or budget <= 0:
                    break
        per_task.append(done)
        if not done:
            break
    per_task.extend([False] * (k - len(per_task)))
    return RolloutResult(tuple(per_task), steps_used, env_seed)


def avg_len(results) -> float:
    """Mean number of instructions completed in a row."""
    results = list(results)
    if not results:
        raise ValueError("avg_len needs at least one rollout")
    return float(np.mean([r.chain_len_completed for r in results]))


def completion_rates(results, k: int) -> list[float]:
    """Fraction of rollouts completing at least 1..k instructions in a row."""
    results = list(results)
    if not results:
        raise ValueError("completion_rates needs at least one rollout")
    lens = np.array([r.chain_len_completed for r in results])
    return [float(np.mean(lens >= i)) for i in range(1, k + 1)]


def render_report(rows: dict, k: int) -> str:
    """Plain-text summary: one row per variant, completion columns 1..k."""
    label_w = max(24, max((len(name) for name in rows), default=0) + 2)
    header = "Task completed in a row".ljust(label_w) + "".join(
        f"{i:>7d}" for i in range(1, k + 1)
    ) + f"{'Len.':>8}"
    lines = [header, "-" * len(header)]
    for name, results in rows.items():
        rates = completion_rates(results, k)
        lines.append(
            name.ljust(label_w)
            + "".join(f"{r:>7.2f}" for r in rates)
            + f"{avg_len(results):>8.2f}"
        )
    return "\n".join(lines) + "\n"


# -- Latency -------------------------------------------------------------------

def with_infer_steps(bundle: PolicyBundle, steps: int) -> PolicyBundle:
    """Same weights, different future-sampler step count at inference."""
    cfg = dataclasses.replace(bundle.cfg, gfdm=dataclasses.replace(bundle.cfg.gfdm, infer_steps=steps))
    return dataclasses.replace(bundle, cfg=cfg)


def measure_latency(
    bundle: PolicyBundle,
    trials: int | None = None,
    seed: int = 0,
    steps: int | None = None,
    env_seed: int = 0,
) -> dict:
    """Per-stage inference wall-clock, mean over exactly `trials` timed runs.

    Stages are timed in isolation on one fixed observation: future sampling,
    latent-action inference (fusion + encoder + quantizer), and action
    decoding. One untimed warmup run precedes the timed ones. Encoding the
    observation is shared setup and excluded; the future-sampler stage is
    the only one whose cost depends on `steps`.
    """
    cfg = bundle.cfg
    trials = cfg.eval.latency_trials if trials is None else trials
    if trials < 5:
        raise ValueError(f"latency needs >= 5 trials, got {trials}")
    steps = cfg.gfdm.infer_steps if steps is None else steps

    enc = FrozenEncoders(cfg.encoders, cfg.env.image_size)
    state = init_env(cfg.env, env_seed)
    obs = render_u8(state, cfg.env)
    instr = sample_task_chain(state, 1, env_seed, cfg.env)[0]
    z_t = torch.from_numpy(
        normalize_latents(bundle.latent_norm, enc.encode_latent(obs).reshape(-1))[None]
    )
    text = torch.from_numpy(enc.encode_instruction(instr)[None])
    e_t = torch.from_numpy(normalize_features(bundle.feature_norm, enc.encode_features(obs))[None])

    times: dict[str, list[float]] = {"gfdm": [], "gidm": [], "adapter": []}
    with torch.no_grad():
        for trial in range(trials + 1):  # first pass is warmup, not recorded
            g = stream(seed, "latency", trial)
            t0 = time.perf_counter()
            pred_latents, mid = sample_future_batch(
                bundle.gfdm, bundle.gfdm_schedule, z_t, text,
                steps=steps, g=g, source=cfg.gfdm.one_step_source,
            )
            t1 = time.perf_counter()
            fused = _fused_future(
                cfg, (bundle.projection, bundle.video_former), pred_latents, mid,
                cfg.gidm.frame_gap,
            )
            cont = bundle.gidm.encode_latent_action(e_t, fused, text)
            code = bundle.gidm.discretize(cont)
            t2 = time.perf_counter()
            sample_actions(
                bundle.adapter, bundle.adapter_schedule, code.straight_through, fused, text,
                steps=cfg.adapter.sample_steps, seed=trial,
            )
            t3 = time.perf_counter()
            if trial == 0:
                continue
            times["gfdm"].append(t1 - t0)
            times["gidm"].append(t2 - t1)
            times["adapter"].append(t3 - t2)

    record = {
        "stages": {
            name: {"mean_s": float(np.mean(ts)), "times_s": [float(t) for t in ts]}
            for name, ts in times.items()
        },
        "trials": trials,
        "gfdm_steps": steps,
        "machine": platform.platform() + " / " + platform.processor(),
    }
    record["total_mean_s"] = float(sum(s["mean_s"] for s in record["stages"].values()))
    return record


# -- Linear-dynamics probe ------------------------------------------------------

@dataclass(frozen=True)
class LinearFixture:
    """Degenerate world: state is the 2D effector, dynamics s' = s + G a.

    Frames come from the real renderer on a static scene, so the policy
    stack runs unchanged; only the transition rule is replaced. The demo
    policy pulls toward a fixed goal, a = pull * G^-1 (goal - s), clipped
    per component to the action box. Clipping keeps the analytic inverse
    exact: whatever action was executed, G^-1 (s' - s) recovers it.
    """

    cfg: ExperimentConfig
    gain: np.ndarray
    gain_inv: np.ndarray
    goal: np.ndarray
    pull: float
    instruction: Instruction = Instruction(0, 0, 0)


@dataclass(frozen=True)
class FixtureTransition:
    obs: np.ndarray        # rendered frame at s
    s: np.ndarray
    s_next: np.ndarray
    action: np.ndarray     # the executed demo action, float64


def make_linear_fixture(
    cfg: ExperimentConfig,
    gain=None,
    goal=(0.5, 0.5),
    pull: float = 0.9,
) -> LinearFixture:
    gain = np.eye(2) if gain is None else np.asarray(gain, dtype=np.float64)
    if gain.shape != (2, 2):
        raise ValueError(f"gain must be 2x2, got {gain.shape}")
    if abs(np.linalg.det(gain)) < 1e-6:
        raise ValueError("gain matrix is singular; the analytic inverse needs det(G) != 0")
    return LinearFixture(
        cfg, gain, np.linalg.inv(gain), np.asarray(goal, dtype=np.float64), float(pull)
    )


def fixture_step(fix: LinearFixture, s, a) -> np.ndarray:
    """s' = s + G a[:2]; no clamping, exact float64."""
    return np.asarray(s, dtype=np.float64) + fix.gain @ np.asarray(a, dtype=np.float64)[:2]


def oracle_action(fix: LinearFixture, s, s_next) -> np.ndarray:
    """Analytic inverse dynamics: the unique action taking s to s_next."""
    a = fix.gain_inv @ (np.asarray(s_next, np.float64) - np.asarray(s, np.float64))
    return np.array([a[0], a[1], 0.0])


def _fixture_state(fix: LinearFixture, s, t: int) -> EnvState:
    return EnvState(
        effector=np.asarray(s, dtype=np.float64),
        gripper_closed=False,
        objects=(SceneObject(pos=np.array([0.15, 0.15]), color_id=0),),
        drawer_extent=0.0,
        step_count=t,
    )


def _demo_action(fix: LinearFixture, s) -> np.ndarray:
    a = np.clip(fix.pull * (fix.gain_inv @ (fix.goal - s)), -1.0, 1.0)
    return np.array([a[0], a[1], 0.0])


def _demo_states(fix: LinearFixture, s0, length: int):
    states = [np.asarray(s0, dtype=np.float64)]
    actions = []
    for _ in range(length):
        a = _demo_action(fix, states[-1])
        actions.append(a)
        states.append(fixture_step(fix, states[-1], a))
    return states, actions


def fixture_episodes(fix: LinearFixture, count: int, seed: int, length: int = 5) -> list[Episode]:
    """Goal-seeking demonstrations with frames from the real renderer.

    The demo action is a deterministic function of the current state, so
    the mapping frame -> action is learnable from observations alone.
    """
    out = []
    for i in range(count):
        g = stream(seed, "fixture-demo", i)
        s0 = 0.12 + 0.76 * g.random(2)
        states, actions = _demo_states(fix, s0, length)
        frames = np.stack(
            [render_u8(_fixture_state(fix, s, t), fix.cfg.env) for t, s in enumerate(states)]
        )
        out.append(
            Episode(
                frames=frames,
                actions=np.stack(actions).astype(np.float32),
                instruction=fix.instruction,
                embodiment="robot",
                seed=derive_seed(seed, "fixture-demo", i),
            )
        )
    return out


def fixture_transitions(fix: LinearFixture, count: int, seed: int) -> list[FixtureTransition]:
    """Held-out probe transitions, drawn at episode starts where the demo
    action distribution has its full spread."""
    out = []
    for i in range(count):
        g = stream(seed, "fixture-probe", i)
        s0 = 0.12 + 0.76 * g.random(2)
        a = _demo_action(fix, s0)
        s1 = fixture_step(fix, s0, a)
        out.append(
            FixtureTransition(obs=render_u8(_fixture_state(fix, s0, 0), fix.cfg.env),
                              s=s0, s_next=s1, action=a)
        )
    return out


def first_action_mse(bundle: PolicyBundle, fix: LinearFixture, transitions, seed: int = 0) -> float:
    """Mean squared error of the policy's first action against the analytic
    inverse on held-out transitions."""
    errs = []
    for j, tr in enumerate(transitions):
        chunk = policy_act(bundle, tr.obs, fix.instruction, derive_seed(seed, "probe", j))
        target = oracle_action(fix, tr.s, tr.s_next)
        errs.append(float(np.mean((chunk[0] - target) ** 2)))
    return float(np.mean(errs))


def diagnose_failure(bundle: PolicyBundle, fix: LinearFixture, transitions, seed: int = 0) -> dict:
    """Heuristic stage attribution on the linear probe.

    For each transition, compare the future predictor's relative latent
    error against the action head's relative error (both normalized by the
    mean squared magnitude of their targets); whichever is larger is charged
    with the failure. A coarse diagnostic, not a claim about ground truth.
    """
    cfg = bundle.cfg
    enc = FrozenEncoders(cfg.encoders, cfg.env.image_size)
    gap = cfg.gidm.frame_gap
    fwd_errs, act_errs = [], []
    fwd_ref, act_ref = [], []
    with torch.no_grad():
        for j, tr in enumerate(transitions):
            states, _ = _demo_states(fix, tr.s, gap)
            future_obs = render_u8(_fixture_state(fix, states[-1], gap), cfg.env)
            z_true = normalize_latents(bundle.latent_norm, enc.encode_latent(future_obs).reshape(-1))
            z_t = torch.from_numpy(
                normalize_latents(bundle.latent_norm, enc.encode_latent(tr.obs).reshape(-1))[None]
            )
            text = torch.from_numpy(enc.encode_instruction(fix.instruction)[None])
            g = stream(seed, "diagnose", j)
            pred_latents, _ = sample_future_batch(
                bundle.gfdm, bundle.gfdm_schedule, z_t, text,
                steps=cfg.gfdm.infer_steps, g=g, source=cfg.gfdm.one_step_source,
            )
            z_pred = pred_latents[0, min(gap, pred_latents.shape[1] - 1)].numpy()
            fwd_errs.append(float(np.sum((z_pred - z_true) ** 2)))
            fwd_ref.append(float(np.sum(z_true**2)))

            chunk = policy_act(bundle, tr.obs, fix.instruction, derive_seed(seed, "diag-act", j))
            target = oracle_action(fix, tr.s, tr.s_next)
            act_errs.append(float(np.sum((chunk[0] - target) ** 2)))
            act_ref.append(float(np.sum(target**2)))

    fwd_rel = [e / max(r, 1e-12) for e, r in zip(fwd_errs, fwd_ref)]
    act_rel = [e / max(r, 1e-12) for e, r in zip(act_errs, act_ref)]
    n_fwd = sum(f > a for f, a in zip(fwd_rel, act_rel))
    return {
        "forward_rel_error": float(np.mean(fwd_rel)),
        "action_rel_error": float(np.mean(act_rel)),
        "forward_blamed_fraction": n_fwd / len(fwd_rel),
        "dominant": "forward-prediction" if 2 * n_fwd >= len(fwd_rel) else "action-decoding",
    }


# -- Ablation runner -------------------------------------------------------------

@dataclass(frozen=True)
class AblationArm:
    """One trained-and-evaluated variant inside a suite."""

    label: str
    cfg: ExperimentConfig
    pretrain_gfdm: bool = True
    pretrain_gidm: bool = True
    eval_infer_steps: int | None = None  # eval-time sampler override; weights shared


def _with(cfg: ExperimentConfig, section: str, **kw) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **kw)})


def _suite_pretraining(cfg):
    return [
        AblationArm("pretrained", cfg),
        AblationArm("gfdm-scratch", cfg, pretrain_gfdm=False),
        AblationArm("gidm-scratch", cfg, pretrain_gidm=False),
    ]


def _suite_human_data(cfg):
    rho = cfg.data.rho_human if cfg.data.rho_human > 0 else 0.5
    return [
        AblationArm(f"human-{rho:g}", _with(cfg, "data", rho_human=rho)),
        AblationArm("human-0", _with(cfg, "data", rho_human=0.0)),
    ]


def _suite_denoise_steps(cfg):
    return [
        AblationArm("steps-1", cfg, eval_infer_steps=1),
        AblationArm("steps-5", cfg, eval_infer_steps=5),
    ]


def _suite_idm_arch(cfg):
    return [
        AblationArm("vq-transformer", _with(cfg, "gidm", arch="st_transformer")),
        AblationArm("mlp", _with(cfg, "gidm", arch="mlp")),
    ]


def _suite_discretization(cfg):
    return [
        AblationArm(mode, _with(cfg, "gidm", quantize_mode=mode))
        for mode in ("vq", "binning", "gaussian_mixture", "continuous")
    ]


def _suite_finetune_parts(cfg):
    return [
        AblationArm(v, _with(cfg, "pipeline", finetune_variant=v))
        for v in ("adapter", "gfdm+adapter", "gidm+adapter", "all")
    ]


def _suite_data_efficiency(cfg):
    arms = [
        AblationArm(f"pretrained-{int(f * 100)}", _with(cfg, "data", finetune_fraction=f))
        for f in (0.1, 0.2, 0.5, 1.0)
    ]
    arms.append(
        AblationArm(
            "scratch-10",
            _with(cfg, "data", finetune_fraction=0.1),
            pretrain_gfdm=False,
            pretrain_gidm=False,
        )
    )
    return arms


def _suite_human_scaling(cfg):
    return [
        AblationArm(f"human-{rho:g}", _with(cfg, "data", rho_human=rho))
        for rho in (0.0, 0.25, 0.5)
    ]


SUITES = {
    "pretraining": _suite_pretraining,
    "human-data": _suite_human_data,
    "denoise-steps": _suite_denoise_steps,
    "idm-arch": _suite_idm_arch,
    "discretization": _suite_discretization,
    "finetune-parts": _suite_finetune_parts,
    "data-efficiency": _suite_data_efficiency,
    "human-scaling": _suite_human_scaling,
}

# Directional claims each suite is expected to reproduce: (better, worse).
DIRECTIONS = {
    "pretraining": [("pretrained", "gfdm-scratch"), ("pretrained", "gidm-scratch")],
    "human-data": None,  # filled from arm labels at run time
    "data-efficiency": [("pretrained-10", "scratch-10")],
    "human-scaling": [("human-0.5", "human-0")],
}


def sign_test(better_vals, worse_vals) -> dict:
    """Paired sign test across seeds: wins, losses, ties, one-sided p."""
    wins = sum(b > w for b, w in zip(better_vals, worse_vals))
    losses = sum(b < w for b, w in zip(better_vals, worse_vals))
    ties = len(better_vals) - wins - losses
    n = wins + losses
    p = float(binomtest(wins, n, alternative="greater").pvalue) if n else 1.0
    return {"wins": wins, "losses": losses, "ties": ties, "pvalue": p}


@dataclass
class AblationReport:
    suite: str
    seeds: list[int]
    chain_length: int
    lens: dict = field(default_factory=dict)       # label -> seed -> list of chain lens
    means: dict = field(default_factory=dict)      # label -> mean over all chains
    per_seed_means: dict = field(default_factory=dict)
    sign_tests: list = field(default_factory=list)
    latency: dict = field(default_factory=dict)    # label -> latency record (when measured)
    artifacts: dict = field(default_factory=dict)  # label -> seed -> policy checkpoint path

    def to_json(self) -> str:
        body = dataclasses.asdict(self)
        body["artifacts"] = {
            k: {s: str(p) for s, p in v.items()} for k, v in self.artifacts.items()
        }
        return json.dumps(body, indent=2, sort_keys=True)

    def render_text(self) -> str:
        rows = {
            label: [_LenOnly(n) for seed_lens in by_seed.values() for n in seed_lens]
            for label, by_seed in self.lens.items()
        }
        out = render_report(rows, self.chain_length)
        for test in self.sign_tests:
            out += (
                f"{test['better']} > {test['worse']}: wins {test['wins']}, "
                f"losses {test['losses']}, ties {test['ties']}, p={test['pvalue']:.3f}\n"
            )
        return out


class _LenOnly:
    """Wraps a bare chain length so report rendering can reuse rollout code."""

    def __init__(self, n: int):
        self.chain_len_completed = n


def _data_key(cfg: ExperimentConfig) -> str:
    body = json.dumps(
        {"env": config_to_dict(cfg)["env"], "data": {
            "pretrain_episodes": cfg.data.pretrain_episodes,
            "rho_human": cfg.data.rho_human,
            "finetune_episodes": cfg.data.finetune_episodes,
        }, "seed": cfg.seed},
        sort_keys=True,
    )
    return hashlib.sha256(body.encode()).hexdigest()[:12]


def _ensure_data(cfg: ExperimentConfig, root: Path) -> tuple[list, list]:
    """Generate (or reuse) the dataset for this config+seed; returns
    (pretraining episodes, finetuning episodes)."""
    ddir = root / "data" / _data_key(cfg)
    if not (ddir / "dataset_manifest.json").exists():
        generate_dataset(cfg, cfg.seed, ddir)
    pretrain = load_split(ddir, "robot") + load_split(ddir, "human")
    finetune = load_split(ddir, "finetune")
    return pretrain, finetune


def train_arm(
    cfg: ExperimentConfig,
    run_dir: Path,
    pretrain_data,
    finetune_data,
    *,
    use_pretrained_gfdm: bool = True,
    use_pretrained_gidm: bool = True,
    stage1_cache: dict | None = None,
    stage_root: Path | None = None,
) -> tuple[PolicyBundle, StageResult]:
    """Full train for one arm: Stage I artifacts (trained or scratch, cached
    by stage hash) then coupled finetuning into run_dir."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cache = stage1_cache if stage1_cache is not None else {}
    stage_root = run_dir.parent if stage_root is None else Path(stage_root)

    key_g = ("gfdm", use_pretrained_gfdm, stage_config_hash(cfg, "gfdm"))
    if key_g not in cache:
        name = "gfdm" if use_pretrained_gfdm else "gfdm-scratch"
        stage_dir = stage_root / f"{key_g[2][:12]}-{name}"
        if use_pretrained_gfdm:
            cache[key_g] = pretrain_gfdm(cfg, pretrain_data, stage_dir).checkpoint_path
        else:
            cache[key_g] = scratch_checkpoint(
                cfg, "gfdm", stage_dir, episodes=pretrain_data
            ).checkpoint_path
    gfdm_ckpt = cache[key_g]

    gidm_ckpt = None
    if use_pretrained_gidm:
        key_i = ("gidm", True, stage_config_hash(cfg, "gidm"))
        if key_i not in cache:
            stage_dir = stage_root / f"{key_i[2][:12]}-gidm"
            cache[key_i] = pretrain_gidm(cfg, pretrain_data, stage_dir).checkpoint_path
        gidm_ckpt = cache[key_i]

    return finetune_coupled(cfg, finetune_data, run_dir, gfdm_ckpt, gidm_ckpt)


def evaluate_bundle(cfg: ExperimentConfig, bundle: PolicyBundle, eval_seed: int) -> list[RolloutResult]:
    """cfg.eval.num_chains chained rollouts; env seeds derive from eval_seed
    so matched arms see identical scenes."""
    actor = PolicyActor(bundle)
    return [
        rollout_chain(
            cfg,
            derive_seed(eval_seed, "eval-chain", i),
            actor,
            policy_seed=derive_seed(eval_seed, "eval-policy", i),
        )
        for i in range(cfg.eval.num_chains)
    ]


def _assert_matched_budgets(policy_paths: dict) -> None:
    """Fairness check, read back from the stored manifests: within a suite
    every arm consumed the same finetuning budget, data sizes, eval protocol,
    and per-seed data seed."""
    rows = {}
    for label, by_seed in policy_paths.items():
        for seed, path in by_seed.items():
            ck = load_checkpoint(path)
            c = ck.extra["config"]
            rows[(label, seed)] = (
                seed,
                c["seed"],
                c["pipeline"]["finetune_steps"],
                c["data"]["pretrain_episodes"],
                c["data"]["finetune_episodes"],
                c["eval"]["num_chains"],
                c["eval"]["chain_length"],
                c["eval"]["max_steps_per_task"],
            )
    by_seed_budgets: dict[int, set] = {}
    for (label, seed), row in rows.items():
        assert row[0] == row[1], f"{label}: run seed {row[1]} differs from assigned seed {row[0]}"
        by_seed_budgets.setdefault(seed, set()).add(row[2:])
    for seed, budgets in by_seed_budgets.items():
        assert len(budgets) == 1, f"arms at seed {seed} ran under different budgets: {budgets}"


def run_ablation(
    cfg: ExperimentConfig,
    suite: str,
    out_dir: str | Path,
    seeds=None,
    measure_steps_latency: bool = True,
) -> AblationReport:
    """Train and evaluate every arm of a suite under matched seeds/budgets.

    Writes report.json and report.txt under out_dir/<suite>/ and returns the
    report. Arms whose stage hashes coincide share Stage-I checkpoints; the
    denoise-steps suite shares all weights and differs only at inference.
    """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; registry: {sorted(SUITES)}")
    out_dir = Path(out_dir)
    seeds = list(range(cfg.eval.ablation_seeds)) if seeds is None else list(seeds)
    arms = SUITES[suite](cfg)

    report = AblationReport(suite=suite, seeds=seeds, chain_length=cfg.eval.chain_length)
    stage1_cache: dict = {}
    trained: dict[tuple, tuple[PolicyBundle, Path]] = {}
    for arm in arms:
        report.lens[arm.label] = {}
        report.artifacts[arm.label] = {}
        for s in seeds:
            cfg_s = dataclasses.replace(arm.cfg, seed=s)
            pretrain_data, finetune_data = _ensure_data(cfg_s, out_dir)
            run_dir = out_dir / suite / arm.label / f"seed{s}"
            ft_key = (stage_config_hash(cfg_s, "policy"), arm.pretrain_gfdm, arm.pretrain_gidm, s)
            if ft_key in trained:
                bundle, policy_path = trained[ft_key]
            else:
                bundle, _ = train_arm(
                    cfg_s, run_dir, pretrain_data, finetune_data,
                    use_pretrained_gfdm=arm.pretrain_gfdm,
                    use_pretrained_gidm=arm.pretrain_gidm,
                    stage1_cache=stage1_cache,
                    stage_root=out_dir / "stage1",
                )
                policy_path = run_dir / "policy.dck"
                trained[ft_key] = (bundle, policy_path)

            eval_bundle = bundle
            if arm.eval_infer_steps is not None:
                eval_bundle = with_infer_steps(bundle, arm.eval_infer_steps)
            results = evaluate_bundle(cfg_s, eval_bundle, eval_seed=s)
            report.lens[arm.label][s] = [r.chain_len_completed for r in results]
            report.artifacts[arm.label][s] = policy_path
            if arm.eval_infer_steps is not None and measure_steps_latency and s == seeds[0]:
                report.latency[arm.label] = measure_latency(
                    eval_bundle, steps=arm.eval_infer_steps
                )

    for label, by_seed in report.lens.items():
        report.per_seed_means[label] = {s: float(np.mean(v)) for s, v in by_seed.items()}
        report.means[label] = float(np.mean([n for v in by_seed.values() for n in v]))

    pairs = DIRECTIONS.get(suite) or []
    if suite == "human-data":
        labels = [a.label for a in arms]
        pairs = [(labels[0], labels[1])]
    for better, worse in pairs:
        bt = [report.per_seed_means[better][s] for s in seeds]
        wr = [report.per_seed_means[worse][s] for s in seeds]
        report.sign_tests.append({"better": better, "worse": worse, **sign_test(bt, wr)})

    _assert_matched_budgets(report.artifacts)
    suite_dir = out_dir / suite
    suite_dir.mkdir(parents=True, exist_ok=True)
    (suite_dir / "report.json").write_text(report.to_json() + "\n")
    (suite_dir / "report.txt").write_text(report.render_text())
    return report
