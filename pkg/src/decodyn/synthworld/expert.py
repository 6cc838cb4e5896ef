"""Scripted controller and task-chain sampling for the tabletop world.

The expert is a deterministic phased proportional controller. It is the
data-generating policy for demonstrations and the upper baseline for
chained evaluation, so its per-task success rate must stay essentially
perfect; the test suite enforces >= 99% over sampled scenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from decodyn.config import EnvConfig
from decodyn.rng import stream
from decodyn.synthworld.env import (
    Action,
    EnvState,
    Instruction,
    TASK_CLOSE_DRAWER,
    TASK_OPEN_DRAWER,
    TASK_PUSH,
    TASK_STACK,
    drawer_handle_pos,
    region_center,
    step,
    success,
)

_ZERO = np.zeros(2, dtype=np.float64)


def _toward(eff: np.ndarray, target: np.ndarray, reach: float) -> np.ndarray:
    """Delta that covers the remaining distance in one step when possible."""
    return np.clip((target - eff) / reach, -1.0, 1.0)


def _find(state: EnvState, color_id: int):
    for obj in state.objects:
        if obj.color_id == color_id:
            return obj
    return None


def scripted_expert(
    state: EnvState, instruction: Instruction, cfg: EnvConfig, embodiment: str = "robot"
) -> Action:
    """One expert action for the current state.

    Gripper commands are state-style, not edge-triggered: -1.0 whenever the
    gripper should be open, +1.0 whenever it should be closed, held for the
    whole phase. Redundant commands are environment no-ops, so trajectories
    are identical to impulse commands, but the labels become a smooth
    function of the scene; a behavior-cloned policy cannot reproduce a
    one-tick impulse, it can reproduce a phase.

    On an already-satisfied instruction the expert emits a zero delta and
    requests open; this settles the scene so episodes end with the gripper
    open.
    """
    gain = cfg.gain_human if embodiment == "human_analog" else cfg.gain_robot
    reach = gain * cfg.delta_max
    eff = state.effector

    if success(state, instruction, cfg):
        return Action(_ZERO, -1.0)

    if instruction.task_id in (TASK_PUSH, TASK_STACK):
        target_obj = _find(state, instruction.target_color)
        if target_obj is None:
            return Action(_ZERO, 0.0)
        if instruction.task_id == TASK_PUSH:
            place_target = region_center(instruction.target_region)
            place_tol = 0.3 * cfg.region_radius
        else:
            base = _find(state, instruction.target_region)
            if base is None:
                return Action(_ZERO, 0.0)
            place_target = base.pos
            place_tol = 0.4 * cfg.stack_eps
        if target_obj.held:
            # Releases only happen from rest: a release drops the object at
            # its pre-step position, so moving and opening in one action
            # would leave it behind.
            if np.linalg.norm(eff - place_target) <= place_tol:
                return Action(_ZERO, -1.0)
            return Action(_toward(eff, place_target, reach), 1.0)
        if state.gripper_closed:
            return Action(_ZERO, -1.0)
        delta = _toward(eff, target_obj.pos, reach)
        planned = np.clip(eff + reach * delta, 0.0, 1.0)
        cmd = 1.0 if np.linalg.norm(planned - target_obj.pos) <= 0.5 * cfg.pickup_radius else -1.0
        return Action(delta, cmd)

    # Drawer tasks.
    direction = 1.0 if instruction.task_id == TASK_OPEN_DRAWER else -1.0
    if state.held_index() is not None:
        return Action(_ZERO, -1.0)
    handle = drawer_handle_pos(state.drawer_extent)
    if state.gripper_closed:
        if np.linalg.norm(eff - handle) > cfg.pickup_radius:
            return Action(_ZERO, -1.0)
        return Action(np.array([0.0, direction]), 1.0)
    delta = _toward(eff, handle, reach)
    planned = np.clip(eff + reach * delta, 0.0, 1.0)
    cmd = 1.0 if np.linalg.norm(planned - handle) <= 0.5 * cfg.pickup_radius else -1.0
    return Action(delta, cmd)


def achievable(state: EnvState, instruction: Instruction, cfg: EnvConfig) -> bool:
    """Static feasibility: the referenced objects exist in the scene."""
    if instruction.task_id == TASK_PUSH:
        return _find(state, instruction.target_color) is not None
    if instruction.task_id == TASK_STACK:
        return (
            instruction.target_color != instruction.target_region
            and _find(state, instruction.target_color) is not None
            and _find(state, instruction.target_region) is not None
        )
    return True


@dataclass(frozen=True)
class ExpertRollout:
    states: tuple[EnvState, ...]
    actions: tuple[Action, ...]
    succeeded: bool


def simulate_expert(
    state: EnvState,
    instruction: Instruction,
    cfg: EnvConfig,
    embodiment: str = "robot",
    settle: bool = False,
) -> ExpertRollout:
    """Closed-loop expert rollout, stopping at success or the step budget.

    With settle=True the rollout keeps stepping after success until the
    gripper is open (bounded), so demonstrations include the release.
    """
    states = [state]
    actions: list[Action] = []
    done = success(state, instruction, cfg)
    for _ in range(cfg.max_steps):
        if done:
            break
        a = scripted_expert(state, instruction, cfg, embodiment)
        state = step(state, a, cfg, embodiment)
        states.append(state)
        actions.append(a)
        done = success(state, instruction, cfg)
    if done and settle:
        for _ in range(4):
            if not state.gripper_closed:
                break
            a = scripted_expert(state, instruction, cfg, embodiment)
            state = step(state, a, cfg, embodiment)
            states.append(state)
            actions.append(a)
    return ExpertRollout(states=tuple(states), actions=tuple(actions), succeeded=done)


def simulate_demo(
    state: EnvState,
    instruction: Instruction,
    cfg: EnvConfig,
    seed: int,
    embodiment: str = "robot",
    jitter: float = 0.0,
    drift: float = 0.0,
) -> ExpertRollout:
    """Demonstration rollout: the scripted expert with seeded actuation
    noise on the movement deltas (white per-step jitter plus a per-rollout
    drift bias), grip commands passed through clean, settled through the
    release like simulate_expert.

    The noise is the point, not a nuisance: a noiseless expert makes every
    future frame a deterministic function of the current scene, and then
    paired frames carry no information about the action taken between them.
    The recorded action labels are the executed noisy deltas, so labels
    stay consistent with the transitions. The controller replans from the
    perturbed state each step, so success is preserved (bounded retries at
    the call site cover rare budget overruns).
    """
    g = stream(seed, "demo-noise")
    bias = drift * g.normal(size=2)
    states = [state]
    actions: list[Action] = []
    done = success(state, instruction, cfg)
    for _ in range(cfg.max_steps):
        if done:
            break
        a = scripted_expert(state, instruction, cfg, embodiment)
        noisy = np.clip(a.delta + bias + jitter * g.normal(size=2), -1.0, 1.0)
        a = Action(noisy, a.gripper_cmd)
        state = step(state, a, cfg, embodiment)
        states.append(state)
        actions.append(a)
        done = success(state, instruction, cfg)
    settle_budget = 4
    while done and state.gripper_closed and settle_budget > 0:
        a = scripted_expert(state, instruction, cfg, embodiment)
        state = step(state, a, cfg, embodiment)
        states.append(state)
        actions.append(a)
        settle_budget -= 1
    return ExpertRollout(states=tuple(states), actions=tuple(actions), succeeded=done)


def sample_task_chain(
    state: EnvState,
    length: int,
    seed: int,
    cfg: EnvConfig,
    embodiment: str = "robot",
    max_attempts_per_slot: int = 64,
) -> list[Instruction]:
    """Sample `length` instructions, each verified achievable in sequence.

    Candidates come from the "chain" stream. A candidate is accepted only
    if it is statically achievable, not already satisfied in the expected
    state, and the scripted expert completes it within the step budget
    from that state; the expert's settled post-state seeds the next slot.
    Raises RuntimeError when a slot exhausts its attempt budget.
    """
    if length < 1:
        raise ValueError(f"chain length must be >= 1, got {length}")
    g = stream(seed, "chain")
    scene_colors = sorted(o.color_id for o in state.objects)
    chain: list[Instruction] = []
    current = state
    for slot in range(length):
        for _ in range(max_attempts_per_slot):
            task_id = int(g.integers(0, 4))
            color = int(scene_colors[int(g.integers(0, len(scene_colors)))])
            if task_id == TASK_PUSH:
                instr = Instruction(task_id, color, int(g.integers(0, cfg.num_regions)))
            elif task_id == TASK_STACK:
                others = [c for c in scene_colors if c != color]
                if not others:
                    continue
                instr = Instruction(task_id, color, int(others[int(g.integers(0, len(others)))]))
            else:
                instr = Instruction(task_id, 0, 0)
            if not achievable(current, instr, cfg) or success(current, instr, cfg):
                continue
            rollout = simulate_expert(current, instr, cfg, embodiment, settle=True)
            if rollout.succeeded:
                chain.append(instr)
                current = rollout.states[-1]
                break
        else:
            raise RuntimeError(f"could not sample an achievable instruction for slot {slot}")
    return chain
