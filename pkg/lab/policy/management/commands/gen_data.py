"""manage.py gen_data: expert demonstrations rendered through the camera pool."""
from pathlib import Path

from django.conf import settings

from policy.env.camera import default_pool
from policy.env.dataset import DatasetConfig, generate_dataset
from policy.serializers import DatasetConfigSerializer

from ._base import LabCommand


class Command(LabCommand):
    help = "Generate scripted-expert episodes (episodes.jsonl + metadata.json) under --out."

    def add_arguments(self, parser):
        parser.add_argument("--out", required=True, help="Output directory.")
        parser.add_argument("--tasks", help="Comma-separated task kinds (default: pick).")
        parser.add_argument("--episodes-per-task", type=int)
        parser.add_argument("--cameras-per-traj", type=int)
        parser.add_argument("--camera-mode", choices=["pool", "fixed"])
        parser.add_argument("--config", help="JSON config with a `dataset` section.")
        parser.add_argument("--seed", type=int)

    def run(self, **options):
        overrides = {
            "tasks": options["tasks"].split(",") if options["tasks"] else None,
            "episodes_per_task": options["episodes_per_task"],
            "cameras_per_traj": options["cameras_per_traj"],
            "camera_mode": options["camera_mode"],
            "seed": self.seed(options),
        }
        data = self.load_section(DatasetConfigSerializer, options["config"], "dataset", overrides)
        cfg = DatasetConfig(image_size=settings.IMAGE_SIZE, step_limit=settings.STEP_LIMIT, **data)

        summary, stats = generate_dataset(cfg, Path(options["out"]), pool=default_pool())

        self.stdout.write(f"Tasks: {', '.join(f'{k}={v}' for k, v in summary.per_task.items())}")
        self.stdout.write(f"Trajectories: {summary.trajectories}")
        self.stdout.write(f"Steps: {summary.steps}")
        self.stdout.write(f"Distinct cameras: {summary.cameras}")
        self.success(f"Wrote {summary.episodes} episode records to {options['out']}")
