"""
Demonstration Dataset
Rolls the scripted expert out on seeded scenes, renders every step from a few
cameras, and writes one JSONL record per (trajectory, camera) plus a metadata
file carrying the action normalization statistics.

Record layout (one line each):
    {"task", "instruction", "camera": [6 affine floats], "seed",
     "steps": [{"img": base64 of raw S*S*3 RGB bytes, "action": [7 floats]}]}
"""
import base64
import binascii
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Sequence

import numpy as np

from ..exceptions import DatasetIOError, UnknownTaskError, UnreachableTaskError
from ..fileio import atomic_open, atomic_write_text, dump_json
from ..tokenizer import NormStats
from ..transformer import ACTION_DIM
from .camera import FIXED_CAMERA, CameraPool
from .expert import expert_action
from .render import render
from .world import STEP_LIMIT, TASK_KINDS, instruction_vocabulary, reset_scene, step

logger = logging.getLogger(__name__)

EPISODES_FILE = "episodes.jsonl"
METADATA_FILE = "metadata.json"
FORMAT_VERSION = 1
CAMERA_MODES = ("pool", "fixed")
MAX_SCENE_ATTEMPTS = 10


@dataclass
class Episode:
    task: str
    instruction: str
    camera: List[float]
    seed: int
    images: np.ndarray    # (T, S, S, 3) uint8
    actions: np.ndarray   # (T, 7) float64, physical units

    def __len__(self) -> int:
        return len(self.actions)

    def to_record(self) -> dict:
        return {
            "task": self.task,
            "instruction": self.instruction,
            "camera": [float(c) for c in self.camera],
            "seed": int(self.seed),
            "steps": [
                {"img": base64.b64encode(img.tobytes()).decode("ascii"),
                 "action": [float(a) for a in action]}
                for img, action in zip(self.images, self.actions)
            ],
        }

    @classmethod
    def from_record(cls, record: dict, image_size: int) -> "Episode":
        steps = record["steps"]
        shape = (image_size, image_size, 3)
        images = np.stack([
            np.frombuffer(base64.b64decode(s["img"], validate=True), dtype=np.uint8).reshape(shape)
            for s in steps
        ]) if steps else np.zeros((0, *shape), dtype=np.uint8)
        actions = np.asarray([s["action"] for s in steps], dtype=np.float64).reshape(-1, ACTION_DIM)
        return cls(
            task=record["task"], instruction=record["instruction"],
            camera=list(record["camera"]), seed=int(record["seed"]),
            images=images, actions=actions,
        )


@dataclass
class DatasetConfig:
    tasks: Sequence[str] = ("pick",)
    episodes_per_task: int = 100
    cameras_per_traj: int = 4
    seed: int = 0
    image_size: int = 64
    camera_mode: str = "pool"
    step_limit: int = STEP_LIMIT

    def __post_init__(self):
        self.tasks = list(self.tasks)
        for kind in self.tasks:
            if kind not in TASK_KINDS:
                raise UnknownTaskError(f"unknown task kind: {kind!r}")
        if self.camera_mode not in CAMERA_MODES:
            raise UnknownTaskError(f"unknown camera mode: {self.camera_mode!r}")


@dataclass
class DatasetSummary:
    episodes: int
    trajectories: int
    steps: int
    per_task: dict = field(default_factory=dict)
    cameras: int = 0


def expert_trajectory(seed: int, kind: str, step_limit: int = STEP_LIMIT):
    """(states, actions, task, success) of one expert rollout; states[i] is observed before actions[i]."""
    state, task, _ = reset_scene(seed, kind)
    states, actions = [], []
    done = success = False
    while not done:
        action = expert_action(state, task)
        states.append(state)
        actions.append(action)
        result = step(state, action, task, step_limit=step_limit)
        state, done, success = result.state, result.done, result.success
    return states, np.asarray(actions, dtype=np.float64), task, success


def _scene_seed(seed: int, task_index: int, episode: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, task_index, episode, attempt]).generate_state(1)[0])


def iter_episodes(cfg: DatasetConfig, pool: CameraPool) -> Iterator[Episode]:
    for ti, kind in enumerate(cfg.tasks):
        for i in range(cfg.episodes_per_task):
            for attempt in range(MAX_SCENE_ATTEMPTS):
                scene_seed = _scene_seed(cfg.seed, ti, i, attempt)
                states, actions, task, success = expert_trajectory(scene_seed, kind, cfg.step_limit)
                if success:
                    break
                logger.warning("Expert failed %s on scene %d, resampling", kind, scene_seed)
            else:
                raise UnreachableTaskError(f"expert failed {kind} on {MAX_SCENE_ATTEMPTS} scenes in a row")

            if cfg.camera_mode == "fixed":
                cameras = [FIXED_CAMERA] * cfg.cameras_per_traj
            else:
                cam_rng = np.random.default_rng([cfg.seed, ti, i, MAX_SCENE_ATTEMPTS])
                cameras = pool.draw("train", cam_rng, cfg.cameras_per_traj)
            for camera in cameras:
                images = np.stack([render(s, camera, cfg.image_size) for s in states])
                yield Episode(
                    task=kind, instruction=task.instruction, camera=camera.affine(),
                    seed=scene_seed, images=images, actions=actions,
                )


def generate_dataset(cfg: DatasetConfig, out_dir, pool: CameraPool = None):
    """Write episodes.jsonl + metadata.json under out_dir. Returns (summary, NormStats)."""
    from .camera import default_pool

    pool = pool or default_pool()
    out_dir = Path(out_dir)
    per_task = {kind: 0 for kind in cfg.tasks}
    all_actions, cameras = [], set()
    n_records = n_steps = 0
    try:
        with atomic_open(out_dir / EPISODES_FILE) as handle:
            for episode in iter_episodes(cfg, pool):
                handle.write(json.dumps(episode.to_record(), separators=(",", ":")))
                handle.write("\n")
                per_task[episode.task] += 1
                all_actions.append(episode.actions)
                cameras.add(tuple(episode.camera))
                n_records += 1
                n_steps += len(episode)
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset under {out_dir}: {exc}") from exc

    if not all_actions:
        raise DatasetIOError(f"no episodes generated for {out_dir}")
    stats = NormStats.from_actions(np.concatenate(all_actions))
    summary = DatasetSummary(
        episodes=n_records,
        trajectories=len(cfg.tasks) * cfg.episodes_per_task,
        steps=n_steps, per_task=per_task, cameras=len(cameras),
    )
    metadata = {
        "format_version": FORMAT_VERSION,
        "config": asdict(cfg),
        "norm_stats": stats.to_json(),
        "counts": asdict(summary),
        "image_size": cfg.image_size,
        "vocab": instruction_vocabulary(),
    }
    try:
        atomic_write_text(out_dir / METADATA_FILE, dump_json(metadata) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {out_dir / METADATA_FILE}: {exc}") from exc
    for kind, count in per_task.items():
        logger.info("Generated %d %s episode records", count, kind)
    return summary, stats


def read_metadata(data_dir) -> dict:
    path = Path(data_dir) / METADATA_FILE
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetIOError(f"cannot read dataset metadata {path}: {exc}") from exc


def read_episodes(data_dir, image_size: int = None) -> List[Episode]:
    data_dir = Path(data_dir)
    if image_size is None:
        image_size = int(read_metadata(data_dir).get("image_size", 64))
    path = data_dir / EPISODES_FILE
    episodes = []
    try:
        with path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    episodes.append(Episode.from_record(json.loads(line), image_size))
                except (KeyError, ValueError, TypeError, binascii.Error) as exc:
                    raise DatasetIOError(f"{path}:{line_no}: malformed episode record ({exc})") from exc
    except OSError as exc:
        raise DatasetIOError(f"cannot read episodes {path}: {exc}") from exc
    return episodes


def write_episodes(path, episodes) -> Path:
    with atomic_open(path) as handle:
        for episode in episodes:
            handle.write(json.dumps(episode.to_record(), separators=(",", ":")))
            handle.write("\n")
    return Path(path)
