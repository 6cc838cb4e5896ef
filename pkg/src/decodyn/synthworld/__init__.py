from decodyn.synthworld.env import (
    Action,
    EnvState,
    Instruction,
    SceneObject,
    TASK_CLOSE_DRAWER,
    TASK_NAMES,
    TASK_OPEN_DRAWER,
    TASK_PUSH,
    TASK_STACK,
    action_from_vector,
    drawer_handle_pos,
    init_env,
    region_center,
    render,
    render_u8,
    step,
    success,
)
from decodyn.synthworld.expert import (
    ExpertRollout,
    achievable,
    sample_task_chain,
    scripted_expert,
    simulate_expert,
)
from decodyn.synthworld.dataset import (
    Episode,
    generate_dataset,
    generate_episode,
    load_manifest,
    load_split,
    read_shard,
    write_shard,
)

__all__ = [
    "Action",
    "EnvState",
    "Instruction",
    "SceneObject",
    "TASK_CLOSE_DRAWER",
    "TASK_NAMES",
    "TASK_OPEN_DRAWER",
    "TASK_PUSH",
    "TASK_STACK",
    "action_from_vector",
    "drawer_handle_pos",
    "init_env",
    "region_center",
    "render",
    "render_u8",
    "step",
    "success",
    "ExpertRollout",
    "achievable",
    "sample_task_chain",
    "scripted_expert",
    "simulate_expert",
    "Episode",
    "generate_dataset",
    "generate_episode",
    "load_manifest",
    "load_split",
    "read_shard",
    "write_shard",
]
