"""manage.py ablate: train and evaluate every cell of an ablation grid."""
from dataclasses import replace
from pathlib import Path

from django.conf import settings

from policy.ablation import AXES, GridSpec, ablation_runner, checkpoint_trainer
from policy.data import load_dataset
from policy.env.camera import default_pool
from policy.evaluation import RolloutConfig
from policy.serializers import GridSerializer, read_config, validate_config
from policy.training import TrainConfig
from policy.transformer import ModelConfig

from ._base import LabCommand


class Command(LabCommand):
    help = "Run an ablation grid; rerunning with the same --out resumes the remaining cells."

    def add_arguments(self, parser):
        parser.add_argument("--grid", required=True, help="JSON grid spec.")
        parser.add_argument("--data", required=True, help="Dataset directory from gen_data.")
        parser.add_argument("--out", required=True, help="Results CSV.")
        parser.add_argument("--ckpt-dir", help="Keep per-configuration checkpoints here (default: next to --out).")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--workers", type=int)

    def run(self, **options):
        grid_data = validate_config(GridSerializer, read_config(options["grid"]))
        seed = self.seed(options)
        workers = self.workers(options)

        train_data = dict(grid_data.get("train", {}))
        rollout_data = dict(grid_data.get("rollout", {}))
        if seed is not None:
            train_data["seed"] = rollout_data["seed"] = seed
        train_data.setdefault("workers", workers)
        rollout_data.setdefault("workers", workers)
        base = TrainConfig.from_dict(train_data)
        rollout = RolloutConfig(step_limit=settings.STEP_LIMIT, **rollout_data)
        base_model = ModelConfig.from_dict(dict(grid_data.get("model", {})))

        grid = GridSpec(axes={axis: list(grid_data[axis]) for axis in AXES if axis in grid_data},
                        tasks=list(grid_data["tasks"]))
        out = Path(options["out"])
        cells = list(grid.cells(base, rollout))
        dataset = load_dataset(options["data"]) if cells else None
        if dataset is not None:
            rollout = replace(rollout, image_size=dataset.image_size)
        ckpt_dir = Path(options["ckpt_dir"]) if options["ckpt_dir"] else out.parent / f"{out.stem}_ckpt"
        trainer = checkpoint_trainer(dataset, base_model, ckpt_dir) if dataset is not None else None

        results = ablation_runner(grid, base, rollout, trainer, out, pool=default_pool())
        self.stdout.write(f"Cells: {len(cells)}  rows: {len(results)}")
        self.success(f"Results written to {out}")
