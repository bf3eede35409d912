"""
Closed-Loop Evaluation
Receding-horizon rollouts in the desk world: observe the last n_frames renders,
sample an action chunk, execute its first k actions, repeat until the task
succeeds or the step limit is hit.

Every episode gets its own seed stream (scene, camera, sampling noise) derived
from the run seed, so results do not depend on worker scheduling.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from .env.camera import FIXED_CAMERA, CameraPool, CameraPose
from .env.dataset import Episode
from .env.desk import DeskEnv
from .env.expert import expert_action
from .env.world import CHAIN, CHAIN_LENGTH, STEP_LIMIT, TASK_KINDS, reset_scene, step
from .exceptions import InvalidRangeError, SamplerMismatchError, UnknownTaskError
from .heads import decode_logits, undiscretize_action
from .model import DiffusionTransformerPolicy
from .scheduler import ddim_step, ddpm_step, make_ddim_plan, make_noise_schedule
from .tokenizer import NormStats, denormalize_action

logger = logging.getLogger(__name__)

SAMPLERS = ("ddpm", "ddim")
WILSON_Z = 1.959964
RESULT_COLUMNS = ["head", "n_frames", "H", "k", "T_eval", "task", "rate", "ci_lo", "ci_hi", "n"]


@dataclass
class RolloutConfig:
    exec_steps: int = 8
    sampler: Optional[str] = None   # None picks ddim for diffusion heads, argmax for discrete
    T_eval: int = 20
    eta: float = 0.0
    n_episodes: int = 100
    seed: int = 0
    camera_split: str = "test"
    workers: int = 1
    image_size: int = 64
    step_limit: int = STEP_LIMIT

    def __post_init__(self):
        if self.sampler is not None and self.sampler not in SAMPLERS:
            raise InvalidRangeError(f"unknown sampler: {self.sampler!r}")
        if self.exec_steps < 1:
            raise InvalidRangeError("exec_steps must be >= 1")
        if self.camera_split not in ("train", "test", "fixed"):
            raise InvalidRangeError(f"unknown camera split: {self.camera_split!r}")


# ==================== POLICIES ====================

class Policy:
    """Maps an observation history to a chunk of physical 7-D actions."""

    n_frames = 1
    horizon = 1

    def act(self, frames: Sequence[np.ndarray], instruction: str, env: DeskEnv,
            generator: torch.Generator) -> np.ndarray:
        raise NotImplementedError


class DiffusionPolicy(Policy):
    def __init__(self, model: DiffusionTransformerPolicy, norm_stats: NormStats, cfg: RolloutConfig):
        self.model = model.eval()
        self.norm_stats = norm_stats
        self.cfg = cfg
        self.n_frames = model.config.n_frames
        self.horizon = model.config.H
        self.schedule = make_noise_schedule(model.config.T_train, model.config.beta_start, model.config.beta_end)
        if not model.is_diffusion and cfg.sampler is not None:
            raise SamplerMismatchError(
                f"sampler {cfg.sampler!r} requested for the discrete head, which decodes by argmax"
            )

    def act(self, frames, instruction, env, generator):
        lang_ids = self.model.encode_instructions([instruction])
        stacked = torch.from_numpy(np.stack(frames)[None])
        chunk = sample_chunk(self.model, lang_ids, stacked, generator, self.cfg, self.schedule)
        return denormalize_action(chunk[0].double().numpy(), self.norm_stats)


class ExpertPolicy(Policy):
    """Scripted expert behind the policy interface; replans every step."""

    def act(self, frames, instruction, env, generator):
        return expert_action(env.state, env.task)[None]


class RandomPolicy(Policy):
    """Uniform actions inside the normalization box."""

    def __init__(self, norm_stats: NormStats, horizon: int = 16):
        self.norm_stats = norm_stats
        self.horizon = horizon

    def act(self, frames, instruction, env, generator):
        u = torch.rand(self.horizon, len(self.norm_stats.low), generator=generator, dtype=torch.float64)
        return denormalize_action(u.numpy() * 2.0 - 1.0, self.norm_stats)


# ==================== SAMPLING ====================

@torch.no_grad()
def sample_chunk(model: DiffusionTransformerPolicy, lang_ids: torch.Tensor, frames: torch.Tensor,
                 generator: torch.Generator, cfg: RolloutConfig, schedule=None) -> torch.Tensor:
    """(B, H, 7) normalized chunk in [-1, 1], from pure noise through the reverse chain."""
    context = model.encode_context(lang_ids, frames)
    if not model.is_diffusion:
        if cfg.sampler is not None:
            raise SamplerMismatchError(f"sampler {cfg.sampler!r} cannot drive the discrete head")
        indices = decode_logits(model.forward_logits(context))
        return undiscretize_action(indices, model.config.bins).float()

    config = model.config
    schedule = schedule or make_noise_schedule(config.T_train, config.beta_start, config.beta_end)
    B = lang_ids.shape[0]
    dtype = context.lang.dtype
    x = torch.randn((B, config.H, 7), generator=generator, dtype=dtype)

    if (cfg.sampler or "ddim") == "ddpm":
        for t in reversed(range(schedule.T_train)):
            eps_hat = model.forward_eps(context, t, x)
            noise = torch.randn(x.shape, generator=generator, dtype=dtype) if t > 0 else None
            x = ddpm_step(schedule, x, eps_hat, t, noise)
    else:
        plan = make_ddim_plan(schedule.T_train, cfg.T_eval, cfg.eta)
        for t, t_prev in plan.pairs():
            eps_hat = model.forward_eps(context, t, x)
            noise = torch.randn(x.shape, generator=generator, dtype=dtype) if plan.eta > 0 else None
            x = ddim_step(schedule, x, eps_hat, t, t_prev, plan.eta, noise)
    return x.clamp(-1.0, 1.0)


# ==================== ROLLOUTS ====================

@dataclass
class RolloutResult:
    success: bool
    steps: int
    inference_calls: int
    trace: Episode
    subtasks: List[bool] = field(default_factory=list)


def _history(frames: List[np.ndarray], n: int) -> List[np.ndarray]:
    if len(frames) >= n:
        return frames[-n:]
    return [frames[0]] * (n - len(frames)) + frames


def rollout(policy: Policy, seed: int, kind: str, cfg: RolloutConfig,
            camera: CameraPose = FIXED_CAMERA, generator: Optional[torch.Generator] = None) -> RolloutResult:
    """One closed-loop episode. For kind="chain" the episode runs through every subtask it can."""
    if kind not in TASK_KINDS and kind != CHAIN:
        raise UnknownTaskError(f"unknown task kind: {kind!r}")
    k = cfg.exec_steps
    if not 1 <= k <= max(policy.horizon, 1) and not isinstance(policy, ExpertPolicy):
        raise InvalidRangeError(f"need 1 <= exec_steps <= H={policy.horizon}, got {k}")
    generator = generator or torch.Generator().manual_seed(seed)

    env = DeskEnv(camera=camera, image_size=cfg.image_size, step_limit=cfg.step_limit)
    frames = [env.reset(seed, kind)]
    instruction = env.task.instruction
    images, actions, subtasks = [], [], []
    calls = 0
    done = False
    while not done:
        chunk = policy.act(_history(frames, policy.n_frames), env.task.instruction, env, generator)
        calls += 1
        for action in chunk[:k]:
            images.append(frames[-1])
            actions.append(np.asarray(action, dtype=np.float64))
            result = env.step(action)
            frames = (frames + [env.observe()])[-policy.n_frames:]
            if not result.done:
                continue
            subtasks.append(result.success)
            # A finished chain subtask hands over to the next instruction; the rest of the chunk is dropped.
            done = kind != CHAIN or not result.success or env.advance_chain() is None
            break

    trace = Episode(
        task=kind, instruction=instruction, camera=camera.affine(), seed=seed,
        images=np.stack(images) if images else np.zeros((0, cfg.image_size, cfg.image_size, 3), np.uint8),
        actions=np.asarray(actions, dtype=np.float64).reshape(-1, 7),
    )
    success = bool(subtasks) and all(subtasks) and (kind != CHAIN or len(subtasks) == CHAIN_LENGTH)
    return RolloutResult(success=success, steps=len(actions), inference_calls=calls,
                         trace=trace, subtasks=subtasks)


def replay_trace(trace: Episode, step_limit: int = STEP_LIMIT) -> bool:
    """Re-execute a single-task trace's actions from its seed; returns the success flag."""
    state, task, _ = reset_scene(trace.seed, trace.task)
    success = False
    for action in trace.actions:
        result = step(state, action, task, step_limit=step_limit)
        state, success = result.state, result.success
        if result.done:
            break
    return success


# ==================== METRICS ====================

def wilson_interval(successes: int, n: int, z: float = WILSON_Z):
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class TaskRate:
    task: str
    successes: int
    n: int

    @property
    def rate(self) -> float:
        return self.successes / self.n if self.n else 0.0

    @property
    def interval(self):
        return wilson_interval(self.successes, self.n)


def episode_streams(seed: int, task_index: int, episode: int):
    """(scene seed, camera rng, torch generator) for one evaluation episode."""
    ss = np.random.SeedSequence([seed, task_index, episode])
    scene, cam, noise = ss.spawn(3)
    scene_seed = int(scene.generate_state(1)[0])
    generator = torch.Generator().manual_seed(int(noise.generate_state(1)[0]))
    return scene_seed, np.random.default_rng(cam), generator


def _camera(pool: Optional[CameraPool], split: str, rng: np.random.Generator) -> CameraPose:
    if split == "fixed" or pool is None:
        return FIXED_CAMERA
    return pool.draw(split, rng)[0]


def _run_episodes(policy: Policy, kind: str, task_index: int, cfg: RolloutConfig,
                  pool: Optional[CameraPool]) -> List[RolloutResult]:
    def one(i: int) -> RolloutResult:
        scene_seed, cam_rng, generator = episode_streams(cfg.seed, task_index, i)
        return rollout(policy, scene_seed, kind, cfg, _camera(pool, cfg.camera_split, cam_rng), generator)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool_exec:
            return list(pool_exec.map(one, range(cfg.n_episodes)))
    return [one(i) for i in range(cfg.n_episodes)]


def success_rate(policy: Policy, tasks: Sequence[str], cfg: RolloutConfig,
                 pool: Optional[CameraPool] = None, traces: Optional[list] = None) -> List[TaskRate]:
    """Per-task success over cfg.n_episodes seeded rollouts; rollout traces are appended to `traces`."""
    rates = []
    for ti, kind in enumerate(tasks):
        results = _run_episodes(policy, kind, ti, cfg, pool)
        if traces is not None:
            traces.extend(r.trace for r in results)
        rate = TaskRate(kind, sum(r.success for r in results), len(results))
        lo, hi = rate.interval
        logger.info("%s: %d/%d success (%.3f, CI %.3f-%.3f)", kind, rate.successes, rate.n, rate.rate, lo, hi)
        rates.append(rate)
    return rates


@dataclass
class ChainResult:
    per_position: List[float]
    avg_len: float
    n: int


def summarize_chains(completed: Sequence[int], length: int = CHAIN_LENGTH) -> ChainResult:
    """Per-position rates P(first i subtasks all succeed) and their sum."""
    n = len(completed)
    per_position = [sum(c >= i for c in completed) / n if n else 0.0 for i in range(1, length + 1)]
    return ChainResult(per_position=per_position, avg_len=avg_len_from_rates(per_position), n=n)


def avg_len_from_rates(rates: Sequence[float]) -> float:
    return float(sum(rates))


def chain_eval(policy: Policy, n_chains: int, cfg: RolloutConfig,
               pool: Optional[CameraPool] = None, traces: Optional[list] = None) -> ChainResult:
    chain_cfg = replace(cfg, n_episodes=n_chains)
    results = _run_episodes(policy, CHAIN, len(TASK_KINDS), chain_cfg, pool)
    if traces is not None:
        traces.extend(r.trace for r in results)
    completed = []
    for r in results:
        count = 0
        for ok in r.subtasks:
            if not ok:
                break
            count += 1
        completed.append(count)
    summary = summarize_chains(completed)
    logger.info("Chains: per-position %s, Avg.Len. %.3f", [round(p, 3) for p in summary.per_position],
                summary.avg_len)
    return summary


# ==================== RESULT TABLES ====================

def results_frame(rates: Sequence[TaskRate], head: str, n_frames: int, H: int, k: int, T_eval: int
                  ) -> pd.DataFrame:
    rows = []
    for r in rates:
        lo, hi = r.interval
        rows.append({"head": head, "n_frames": n_frames, "H": H, "k": k, "T_eval": T_eval,
                     "task": r.task, "rate": r.rate, "ci_lo": lo, "ci_hi": hi, "n": r.n})
    if len(rates) > 1:
        successes = sum(r.successes for r in rates)
        n = sum(r.n for r in rates)
        lo, hi = wilson_interval(successes, n)
        rows.append({"head": head, "n_frames": n_frames, "H": H, "k": k, "T_eval": T_eval,
                     "task": "mean", "rate": float(np.mean([r.rate for r in rates])),
                     "ci_lo": lo, "ci_hi": hi, "n": n})
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def chain_frame(result: ChainResult, head: str, n_frames: int, H: int, k: int, T_eval: int
                ) -> pd.DataFrame:
    rows = []
    for i, rate in enumerate(result.per_position, start=1):
        lo, hi = wilson_interval(int(round(rate * result.n)), result.n)
        rows.append({"head": head, "n_frames": n_frames, "H": H, "k": k, "T_eval": T_eval,
                     "task": f"chain@{i}", "rate": rate, "ci_lo": lo, "ci_hi": hi, "n": result.n})
    rows.append({"head": head, "n_frames": n_frames, "H": H, "k": k, "T_eval": T_eval,
                 "task": "avg_len", "rate": result.avg_len, "ci_lo": float("nan"), "ci_hi": float("nan"),
                 "n": result.n})
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)
