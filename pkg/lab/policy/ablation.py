"""
Ablation Grid
Cartesian sweep over head kind, observation length, chunk length, execution
steps and DDIM steps. Training is shared between cells that differ only in
evaluation settings (k, T_eval), and the CSV is rewritten after every cell so
an interrupted sweep resumes where it stopped.
"""
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import pandas as pd

from .checkpoint import load_policy, save_checkpoint
from .data import LoadedDataset
from .env.camera import CameraPool
from .evaluation import RESULT_COLUMNS, DiffusionPolicy, RolloutConfig, results_frame, success_rate
from .exceptions import DatasetIOError, InvalidRangeError
from .fileio import atomic_write_csv
from .model import DiffusionTransformerPolicy
from .tokenizer import NormStats
from .training import TrainConfig, train
from .transformer import ModelConfig

logger = logging.getLogger(__name__)

AXES = ("head", "n_frames", "H", "k", "T_eval")
KEY_COLUMNS = list(AXES)

# (train config) -> (model, norm stats)
Trainer = Callable[[TrainConfig], Tuple[DiffusionTransformerPolicy, NormStats]]


@dataclass(frozen=True)
class Cell:
    head: str
    n_frames: int
    H: int
    k: int
    T_eval: int

    @property
    def key(self) -> tuple:
        return (self.head, self.n_frames, self.H, self.k, self.T_eval)

    @property
    def training_key(self) -> tuple:
        return (self.head, self.n_frames, self.H)


@dataclass
class GridSpec:
    """Axis values to sweep. An axis left out takes its value from the base configs."""
    axes: Dict[str, List] = field(default_factory=dict)
    tasks: List[str] = field(default_factory=lambda: ["pick"])

    def __post_init__(self):
        unknown = set(self.axes) - set(AXES)
        if unknown:
            raise InvalidRangeError(f"unknown grid axes: {sorted(unknown)}")

    def cells(self, base: TrainConfig, rollout: RolloutConfig) -> Iterator[Cell]:
        if not self.axes or any(len(v) == 0 for v in self.axes.values()):
            return
        defaults = {"head": base.head_kind, "n_frames": base.n_frames, "H": base.H,
                    "k": rollout.exec_steps, "T_eval": rollout.T_eval}
        values = [self.axes.get(axis, [defaults[axis]]) for axis in AXES]
        for combo in itertools.product(*values):
            cell = Cell(combo[0], int(combo[1]), int(combo[2]), int(combo[3]), int(combo[4]))
            if cell.k > cell.H:
                logger.warning("Skipping cell %s: k=%d exceeds H=%d", cell.key, cell.k, cell.H)
                continue
            yield cell


def read_results(path: Path) -> pd.DataFrame:
    if not path.exists():
        return pd.DataFrame(columns=RESULT_COLUMNS)
    try:
        frame = pd.read_csv(path)
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise DatasetIOError(f"cannot read results {path}: {exc}") from exc
    missing = set(RESULT_COLUMNS) - set(frame.columns)
    if missing:
        raise DatasetIOError(f"{path} is missing columns {sorted(missing)}")
    return frame[RESULT_COLUMNS]


def completed_cells(frame: pd.DataFrame) -> set:
    return {tuple(row) for row in frame[KEY_COLUMNS].itertuples(index=False, name=None)}


def checkpoint_trainer(dataset: LoadedDataset, base_model: Optional[ModelConfig] = None,
                       ckpt_dir: Optional[Path] = None) -> Trainer:
    """Train (or reload from ckpt_dir) one policy per training configuration."""
    def run(cfg: TrainConfig):
        path = None
        if ckpt_dir is not None:
            path = Path(ckpt_dir) / f"{cfg.head_kind}_f{cfg.n_frames}_h{cfg.H}.ckpt"
            if path.exists():
                logger.info("Reusing checkpoint %s", path)
                model, ckpt = load_policy(path)
                return model, ckpt.norm_stats
        result = train(cfg, dataset, base_model=base_model)
        if path is not None:
            save_checkpoint(path, result.model, cfg.to_dict(), dataset.norm_stats)
        return result.model, dataset.norm_stats

    return run


def ablation_runner(grid: GridSpec, base: TrainConfig, rollout: RolloutConfig, trainer: Trainer,
                    out: Path, pool: Optional[CameraPool] = None) -> pd.DataFrame:
    """Run every grid cell not already in `out`; returns the full results table."""
    out = Path(out)
    results = read_results(out)
    done = completed_cells(results)
    cells = list(grid.cells(base, rollout))
    if not out.exists() or not cells:
        atomic_write_csv(out, results)

    trained: Dict[tuple, Tuple[DiffusionTransformerPolicy, NormStats]] = {}
    for i, cell in enumerate(cells, start=1):
        if cell.key in done:
            logger.info("Cell %d/%d %s already complete, skipping", i, len(cells), cell.key)
            continue
        if cell.training_key not in trained:
            cfg = replace(base, head_kind=cell.head, n_frames=cell.n_frames, H=cell.H,
                          exec_steps=min(base.exec_steps, cell.H))
            trained[cell.training_key] = trainer(cfg)
        model, norm_stats = trained[cell.training_key]

        sampler = rollout.sampler if model.is_diffusion else None
        cell_rollout = replace(rollout, exec_steps=cell.k, T_eval=cell.T_eval, sampler=sampler)
        rates = success_rate(DiffusionPolicy(model, norm_stats, cell_rollout), grid.tasks, cell_rollout, pool)
        rows = results_frame(rates, cell.head, cell.n_frames, cell.H, cell.k, cell.T_eval)
        results = rows if results.empty else pd.concat([results, rows], ignore_index=True)
        atomic_write_csv(out, results)
        done.add(cell.key)
        logger.info("Cell %d/%d %s done", i, len(cells), cell.key)
    return results


def axis_summary(results: pd.DataFrame, axis: str) -> pd.DataFrame:
    """Mean success per value of one swept axis, over per-task rows."""
    tasks = results[results["task"] != "mean"]
    return (
        tasks.groupby(axis, sort=True)
        .agg(rate=("rate", "mean"), ci_lo=("ci_lo", "mean"), ci_hi=("ci_hi", "mean"), cells=("rate", "size"))
        .reset_index()
    )


def swept_axes(results: pd.DataFrame) -> Sequence[str]:
    return [axis for axis in AXES if results[axis].nunique() > 1]
