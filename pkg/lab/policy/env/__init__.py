"""Toy tabletop world: scenes, cameras, rendering, scripted expert, demonstrations."""
from .camera import FIXED_CAMERA, CameraPool, CameraPose, default_pool, sample_camera
from .dataset import DatasetConfig, Episode, generate_dataset, read_episodes, read_metadata
from .desk import DeskEnv
from .expert import expert_action
from .render import render
from .world import (
    CHAIN,
    CHAIN_KINDS,
    CHAIN_LENGTH,
    STEP_LIMIT,
    TASK_KINDS,
    EnvState,
    StepResult,
    TaskSpec,
    instruction_vocabulary,
    reset_scene,
    step,
    task_success,
)

__all__ = [
    "CHAIN", "CHAIN_KINDS", "CHAIN_LENGTH", "FIXED_CAMERA", "STEP_LIMIT", "TASK_KINDS",
    "CameraPool", "CameraPose", "DatasetConfig", "DeskEnv", "EnvState", "Episode",
    "StepResult", "TaskSpec", "default_pool", "expert_action", "generate_dataset",
    "instruction_vocabulary", "read_episodes", "read_metadata", "render", "reset",
    "reset_scene", "sample_camera", "step", "task_success",
]


def reset(seed: int, kind: str, camera: CameraPose = FIXED_CAMERA, size: int = 64):
    """(state, task, observation) for a seeded scene."""
    state, task, _ = reset_scene(seed, kind)
    return state, task, render(state, camera, size)
