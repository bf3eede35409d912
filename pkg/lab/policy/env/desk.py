"""
DeskEnv
Stateful wrapper around the pure world functions: holds the current scene,
task, camera and step limit, and renders observations after every step.
Chains advance to a freshly sampled subtask each time the current one succeeds.
"""
from typing import List, Optional

import numpy as np

from ..exceptions import UnreachableTaskError
from .camera import FIXED_CAMERA, CameraPose
from .render import render
from .world import (
    CHAIN,
    CHAIN_LENGTH,
    STEP_LIMIT,
    EnvState,
    StepResult,
    TaskSpec,
    next_chain_task,
    reset_scene,
    step,
)


class DeskEnv:
    def __init__(self, camera: CameraPose = FIXED_CAMERA, image_size: int = 64,
                 step_limit: int = STEP_LIMIT):
        self.camera = camera
        self.image_size = image_size
        self.step_limit = step_limit
        self.state: Optional[EnvState] = None
        self.task: Optional[TaskSpec] = None
        self.seed: Optional[int] = None
        self.kind: Optional[str] = None
        self._rng: Optional[np.random.Generator] = None
        self._task_start = 0
        self.completed: List[TaskSpec] = []

    def reset(self, seed: int, kind: str) -> np.ndarray:
        """Fresh scene for (seed, kind); returns the first observation."""
        self.seed = seed
        self.kind = kind
        self.state, self.task, self._rng = reset_scene(seed, kind)
        self._task_start = 0
        self.completed = []
        return self.observe()

    def observe(self) -> np.ndarray:
        return render(self.state, self.camera, self.image_size)

    @property
    def steps_in_task(self) -> int:
        return self.state.step_count - self._task_start

    def step(self, action) -> StepResult:
        limit = self._task_start + self.step_limit
        result = step(self.state, action, self.task, step_limit=limit)
        self.state = result.state
        return result

    def advance_chain(self) -> Optional[TaskSpec]:
        """After a chain subtask succeeds, sample the next one (None once the chain is complete)."""
        if self.kind != CHAIN:
            return None
        self.completed.append(self.task)
        if len(self.completed) >= CHAIN_LENGTH:
            return None
        try:
            self.task = next_chain_task(self.state, self._rng)
        except UnreachableTaskError:
            return None
        self._task_start = self.state.step_count
        return self.task
