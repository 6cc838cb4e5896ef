"""Deterministic 2D tabletop world on the unit square.

The scene holds a gripper-equipped effector, K colored blocks, four fixed
target regions, and a sliding drawer mounted on the top edge. Both
embodiments ("robot" and "human_analog") share the state space and task
semantics; the human analog moves with a higher gain and renders with a
different glyph and palette.

All stochastic choices go through named streams from :mod:`decodyn.rng`.
Stepping, rendering, and the success predicates are pure functions of
their inputs, so identical (config, seed, actions) reproduce bit-identical
trajectories on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from decodyn.config import EnvConfig
from decodyn.rng import stream

TASK_PUSH = 0
TASK_STACK = 1
TASK_OPEN_DRAWER = 2
TASK_CLOSE_DRAWER = 3
TASK_NAMES = ("push", "stack", "open_drawer", "close_drawer")

# Region centers sit in the lower half of the square, clear of the drawer.
_REGION_CENTERS = np.array(
    [[0.2, 0.75], [0.8, 0.75], [0.2, 0.45], [0.8, 0.45]], dtype=np.float64
)

# Drawer geometry: the body hangs from the top edge around x=0.5 and slides
# downward as it opens. extent=0 fully closed, extent=1 fully open.
DRAWER_X_MIN = 0.38
DRAWER_X_MAX = 0.62
DRAWER_Y_BASE = 0.08
DRAWER_TRAVEL = 0.15

# Rendering palettes (u8 RGB). The human analog gets a warmer background,
# a shifted object palette, and a plus-shaped effector glyph so the two
# embodiments are visually distinct while sharing scene semantics.
BACKGROUND_ROBOT = (40, 40, 48)
BACKGROUND_HUMAN = (56, 48, 40)
OBJECT_PALETTE_ROBOT = ((220, 60, 50), (70, 200, 80), (70, 110, 230), (230, 200, 60))
OBJECT_PALETTE_HUMAN = ((200, 80, 40), (100, 190, 60), (90, 100, 200), (210, 180, 80))
REGION_OUTLINE = (92, 92, 104)
DRAWER_FACE_ROBOT = (120, 100, 80)
DRAWER_FACE_HUMAN = (140, 110, 70)
DRAWER_HANDLE = (205, 175, 95)
EFFECTOR_ROBOT = (240, 240, 240)
EFFECTOR_HUMAN = (70, 225, 225)

# The effector renders as a core glyph plus a radial halo with finite
# support. The halo makes nearby frames overlap in proportion to effector
# displacement, so patch-feature distances grade smoothly with motion
# instead of saturating at the glyph size.
HALO_RADIUS_PX = 6.0

COLOR_NAMES = ("red", "green", "blue", "yellow")

_EMBODIMENTS = ("robot", "human_analog")


def region_center(region_id: int) -> np.ndarray:
    """Center of a target region. Region ids index a fixed 4-entry table."""
    if not 0 <= region_id < len(_REGION_CENTERS):
        raise ValueError(f"region_id {region_id} outside [0, {len(_REGION_CENTERS)})")
    return _REGION_CENTERS[region_id].copy()


def drawer_handle_pos(extent: float) -> np.ndarray:
    """Handle position for a given drawer extent; tracks the sliding front."""
    return np.array([0.5, DRAWER_Y_BASE + extent * DRAWER_TRAVEL], dtype=np.float64)


@dataclass(frozen=True)
class Action:
    """One control step: planar delta plus a gripper command.

    Components are clamped to [-1, 1] at construction, so downstream code
    never sees out-of-range controls. gripper_cmd > 0 requests close,
    < 0 requests open, 0 leaves the gripper unchanged.
    """

    delta: np.ndarray
    gripper_cmd: float

    def __post_init__(self) -> None:
        d = np.clip(np.asarray(self.delta, dtype=np.float64).reshape(2), -1.0, 1.0)
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "gripper_cmd", float(np.clip(self.gripper_cmd, -1.0, 1.0)))

    def as_vector(self) -> np.ndarray:
        return np.array([self.delta[0], self.delta[1], self.gripper_cmd], dtype=np.float64)


def action_from_vector(vec: np.ndarray) -> Action:
    v = np.asarray(vec, dtype=np.float64).reshape(3)
    return Action(delta=v[:2], gripper_cmd=float(v[2]))


@dataclass(frozen=True)
class Instruction:
    """Symbolic task triple.

    target_color indexes the scene palette. target_region indexes the region
    table for push; for stack it is reused as the base object's color id; the
    drawer tasks ignore both and conventionally carry zeros.
    """

    task_id: int
    target_color: int
    target_region: int

    def __post_init__(self) -> None:
        if not 0 <= self.task_id < len(TASK_NAMES):
            raise ValueError(f"unknown task_id {self.task_id}")

    def text(self) -> str:
        if self.task_id == TASK_PUSH:
            return f"push the {COLOR_NAMES[self.target_color]} block to region {self.target_region}"
        if self.task_id == TASK_STACK:
            return (
                f"stack the {COLOR_NAMES[self.target_color]} block on the "
                f"{COLOR_NAMES[self.target_region]} block"
            )
        if self.task_id == TASK_OPEN_DRAWER:
            return "open the drawer"
        return "close the drawer"


@dataclass(frozen=True)
class SceneObject:
    pos: np.ndarray
    color_id: int
    held: bool = False


@dataclass(frozen=True)
class EnvState:
    """Complete world state. Instances are immutable; step() returns a copy."""

    effector: np.ndarray
    gripper_closed: bool
    objects: tuple[SceneObject, ...]
    drawer_extent: float
    step_count: int = 0

    def held_index(self) -> int | None:
        for i, obj in enumerate(self.objects):
            if obj.held:
                return i
        return None


def _check_embodiment(embodiment: str) -> None:
    if embodiment not in _EMBODIMENTS:
        raise ValueError(f"embodiment must be one of {_EMBODIMENTS}, got {embodiment!r}")


def init_env(cfg: EnvConfig, seed: int) -> EnvState:
    """Sample an initial scene from the documented "scene" stream.

    Draw order (each from stream(seed, "scene"), in this sequence):
      1. effector position: uniform over [0.2, 0.8] x [0.35, 0.85]
      2. drawer extent: uniform over [0, 1]
      3. color assignment: permutation of range(num_colors), first K entries
      4. object positions, sequentially: uniform over [0.15, 0.85] x
         [0.35, 0.85], rejection-resampled until at least 0.12 from every
         previously placed object.

    K outside [1, 4] is rejected; the palette and region table are fixed
    at four entries.
    """
    k = cfg.num_objects
    if not 1 <= k <= 4:
        raise ValueError(f"num_objects must be in [1, 4], got {k}")
    if not 1 <= cfg.num_colors <= 4:
        raise ValueError(f"num_colors must be in [1, 4], got {cfg.num_colors}")
    if k > cfg.num_colors:
        raise ValueError("num_objects may not exceed num_colors (colors are distinct)")
    g = stream(seed, "scene")
    effector = g.uniform([0.2, 0.35], [0.8, 0.85])
    extent = float(g.uniform(0.0, 1.0))
    colors = g.permutation(cfg.num_colors)[:k]
    positions: list[np.ndarray] = []
    for _ in range(k):
        while True:
            p = g.uniform([0.15, 0.35], [0.85, 0.85])
            if all(np.linalg.norm(p - q) >= 0.12 for q in positions):
                positions.append(p)
                break
    objects = tuple(
        SceneObject(pos=positions[i], color_id=int(colors[i])) for i in range(k)
    )
    return EnvState(
        effector=effector,
        gripper_closed=False,
        objects=objects,
        drawer_extent=extent,
        step_count=0,
    )


def step(state: EnvState, action: Action, cfg: EnvConfig, embodiment: str = "robot") -> EnvState:
    """Advance the world one tick. Pure function; inputs are never mutated.

    Update order, which defines the contact semantics:
      1. The effector moves by gain * delta_max * action.delta, clamped to
         the unit square. The human analog uses the higher gain.
      2. If the gripper was closed with the old effector within pickup
         radius of the handle and nothing held, the drawer extent tracks
         the effector's vertical displacement (clamped to [0, 1]).
      3. Gripper command: on a close request with the gripper open, the
         nearest object within pickup radius is grasped; failing that, a
         handle within pickup radius is gripped; otherwise the request is
         a no-op. An open request always opens and releases.
      4. A held object is pinned to the new effector position.
    """
    _check_embodiment(embodiment)
    gain = cfg.gain_human if embodiment == "human_analog" else cfg.gain_robot
    old_eff = state.effector
    new_eff = np.clip(old_eff + gain * cfg.delta_max * action.delta, 0.0, 1.0)

    extent = state.drawer_extent
    held = state.held_index()
    if state.gripper_closed and held is None:
        handle = drawer_handle_pos(extent)
        if np.linalg.norm(old_eff - handle) <= cfg.pickup_radius:
            extent = float(np.clip(extent + (new_eff[1] - old_eff[1]) / DRAWER_TRAVEL, 0.0, 1.0))

    gripper = state.gripper_closed
    objects = list(state.objects)
    if action.gripper_cmd > 0.0 and not state.gripper_closed:
        dists = [np.linalg.norm(new_eff - o.pos) for o in objects]
        order = int(np.argmin(dists)) if objects else -1
        if objects and dists[order] <= cfg.pickup_radius:
            gripper = True
            objects[order] = replace(objects[order], held=True)
        elif np.linalg.norm(new_eff - drawer_handle_pos(extent)) <= cfg.pickup_radius:
            gripper = True
    elif action.gripper_cmd < 0.0 and state.gripper_closed:
        gripper = False
        objects = [replace(o, held=False) for o in objects]

    objects = [
        replace(o, pos=new_eff.copy()) if o.held else o for o in objects
    ]
    return EnvState(
        effector=new_eff,
        gripper_closed=gripper,
        objects=tuple(objects),
        drawer_extent=extent,
        step_count=state.step_count + 1,
    )


def success(state: EnvState, instruction: Instruction, cfg: EnvConfig) -> bool:
    """Closed-boundary goal predicates, one per task family."""
    if instruction.task_id == TASK_PUSH:
        center = region_center(instruction.target_region)
        for obj in state.objects:
            if obj.color_id == instruction.target_color:
                return bool(np.linalg.norm(obj.pos - center) <= cfg.region_radius)
        return False
    if instruction.task_id == TASK_STACK:
        top = _find_color(state, instruction.target_color)
        base = _find_color(state, instruction.target_region)
        if top is None or base is None or top is base:
            return False
        return bool(np.linalg.norm(top.pos - base.pos) <= cfg.stack_eps)
    if instruction.task_id == TASK_OPEN_DRAWER:
        return state.drawer_extent >= cfg.drawer_open_thresh
    return state.drawer_extent <= cfg.drawer_close_thresh


def _find_color(state: EnvState, color_id: int) -> SceneObject | None:
    for obj in state.objects:
        if obj.color_id == color_id:
            return obj
    return None


def _px(coord: float, size: int) -> int:
    return int(round(float(coord) * (size - 1)))


_GRID_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    if size not in _GRID_CACHE:
        rr, cc = np.meshgrid(
            np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij"
        )
        _GRID_CACHE[size] = (rr, cc)
    return _GRID_CACHE[size]


def _fill(img: np.ndarray, r0: int, r1: int, c0: int, c1: int, color) -> None:
    size = img.shape[0]
    r0, r1 = max(r0, 0), min(r1, size - 1)
    c0, c1 = max(c0, 0), min(c1, size - 1)
    if r0 > r1 or c0 > c1:
        return
    img[r0 : r1 + 1, c0 : c1 + 1] = color


def render_u8(state: EnvState, cfg: EnvConfig, embodiment: str = "robot") -> np.ndarray:
    """Rasterize the state to an (image_size, image_size, 3) u8 RGB frame.

    Painter's order: background, region outlines, drawer, effector halo,
    objects, effector core glyph. The halo has finite support
    (HALO_RADIUS_PX), so pixels nothing paints over stay exactly at the
    documented background color for the embodiment.
    """
    _check_embodiment(embodiment)
    human = embodiment == "human_analog"
    size = cfg.image_size
    bg = BACKGROUND_HUMAN if human else BACKGROUND_ROBOT
    palette = OBJECT_PALETTE_HUMAN if human else OBJECT_PALETTE_ROBOT
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:, :] = bg

    for center in _REGION_CENTERS:
        c, r = _px(center[0], size), _px(center[1], size)
        half = 3
        _fill(img, r - half, r - half, c - half, c + half, REGION_OUTLINE)
        _fill(img, r + half, r + half, c - half, c + half, REGION_OUTLINE)
        _fill(img, r - half, r + half, c - half, c - half, REGION_OUTLINE)
        _fill(img, r - half, r + half, c + half, c + half, REGION_OUTLINE)

    handle = drawer_handle_pos(state.drawer_extent)
    c0, c1 = _px(DRAWER_X_MIN, size), _px(DRAWER_X_MAX, size)
    r_handle = _px(handle[1], size)
    _fill(img, 0, r_handle, c0, c1, DRAWER_FACE_HUMAN if human else DRAWER_FACE_ROBOT)
    hc = _px(handle[0], size)
    _fill(img, r_handle, r_handle, hc - 1, hc + 1, DRAWER_HANDLE)

    glyph = EFFECTOR_HUMAN if human else EFFECTOR_ROBOT
    rr, cc = _pixel_grid(size)
    ex = state.effector[0] * (size - 1)
    ey = state.effector[1] * (size - 1)
    dist = np.sqrt((rr - ey) ** 2 + (cc - ex) ** 2)
    inten = np.clip(1.0 - dist / HALO_RADIUS_PX, 0.0, 1.0)[..., None]
    blended = img.astype(np.float64) + inten * (np.asarray(glyph, dtype=np.float64) - img)
    img = np.floor(blended + 0.5).astype(np.uint8)

    for obj in state.objects:
        c, r = _px(obj.pos[0], size), _px(obj.pos[1], size)
        _fill(img, r - 1, r + 1, c - 1, c + 1, palette[obj.color_id])

    c, r = _px(state.effector[0], size), _px(state.effector[1], size)
    if human:
        _fill(img, r - 1, r + 1, c, c, glyph)
        _fill(img, r, r, c - 1, c + 1, glyph)
    else:
        _fill(img, r - 1, r - 1, c - 1, c + 1, glyph)
        _fill(img, r + 1, r + 1, c - 1, c + 1, glyph)
        _fill(img, r - 1, r + 1, c - 1, c - 1, glyph)
        _fill(img, r - 1, r + 1, c + 1, c + 1, glyph)
    if state.gripper_closed:
        _fill(img, r, r, c, c, glyph)
    return img


def render(state: EnvState, cfg: EnvConfig, embodiment: str = "robot") -> np.ndarray:
    """Float32 frame in [0, 1]; exactly render_u8 scaled by 1/255."""
    return render_u8(state, cfg, embodiment).astype(np.float32) / np.float32(255.0)
