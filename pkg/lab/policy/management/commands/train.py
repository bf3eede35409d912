"""manage.py train: fit a policy on a generated dataset and write the checkpoint."""
from pathlib import Path

from django.conf import settings

from policy.data import load_dataset
from policy.serializers import ModelConfigSerializer, TrainConfigSerializer
from policy.training import TrainConfig, train
from policy.transformer import HEAD_KINDS, ModelConfig

from ._base import LabCommand


class Command(LabCommand):
    help = "Train a policy. CLI flags override the --config file, which overrides defaults."

    def add_arguments(self, parser):
        parser.add_argument("--data", required=True, help="Dataset directory from gen_data.")
        parser.add_argument("--out", required=True, help="Checkpoint path.")
        parser.add_argument("--config", help="JSON config with `model` and `train` sections.")
        parser.add_argument("--metrics", help="Metrics CSV (default: <out>.metrics.csv).")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--head", choices=HEAD_KINDS)
        parser.add_argument("--H", type=int, dest="H")
        parser.add_argument("--n-frames", type=int)
        parser.add_argument("--steps", type=int)
        parser.add_argument("--lr", type=float)
        parser.add_argument("--batch-size", type=int)
        parser.add_argument("--workers", type=int)

    def run(self, **options):
        overrides = {
            "head_kind": options["head"],
            "H": options["H"],
            "n_frames": options["n_frames"],
            "steps": options["steps"],
            "lr_peak": options["lr"],
            "batch_size": options["batch_size"],
            "workers": options["workers"],
            "seed": self.seed(options),
        }
        train_data = self.load_section(TrainConfigSerializer, options["config"], "train", overrides,
                                        defaults={"workers": settings.DITA_DESK_WORKERS})
        model_data = self.load_section(ModelConfigSerializer, options["config"], "model")
        cfg = TrainConfig.from_dict(train_data)
        base_model = ModelConfig.from_dict(model_data)

        dataset = load_dataset(options["data"])
        out = Path(options["out"])
        metrics = Path(options["metrics"]) if options["metrics"] else out.with_suffix(".metrics.csv")
        result = train(cfg, dataset, base_model=base_model, out=out, metrics_path=metrics)

        self.stdout.write(f"Head: {cfg.head_kind}  H={cfg.H}  n_frames={cfg.n_frames}  steps={cfg.steps}")
        self.stdout.write(f"Final loss: {result.final_loss:.5f}")
        if result.val_loss is not None:
            self.stdout.write(f"Validation loss: {result.val_loss:.5f}")
        self.stdout.write(f"Metrics: {metrics}")
        self.success(f"Checkpoint written to {result.checkpoint}")
