"""manage.py inspect: human-readable summary of a checkpoint, a model config or a dataset."""
import math
from pathlib import Path

import torch
from django.core.management.base import CommandError

from policy.checkpoint import load_checkpoint
from policy.env.dataset import read_episodes, read_metadata
from policy.env.world import instruction_vocabulary
from policy.model import DiffusionTransformerPolicy, count_parameters
from policy.scheduler import make_noise_schedule
from policy.reports import contact_sheet
from policy.serializers import ModelConfigSerializer, TrainConfigSerializer
from policy.training import TrainConfig
from policy.transformer import ModelConfig

from ._base import EXIT_USAGE, LabCommand


class Command(LabCommand):
    help = "Print parameter counts and configs of a checkpoint or model config, or the counts of a dataset."

    def add_arguments(self, parser):
        parser.add_argument("--ckpt", help="Checkpoint file.")
        parser.add_argument("--model-config", help="JSON config; the model is built without training.")
        parser.add_argument("--data", help="Dataset directory.")
        parser.add_argument("--frames", type=int, default=0, help="Tile the first frame of N episodes.")
        parser.add_argument("--frames-out", help="PNG path for --frames (default: <data>/frames.png).")

    def run(self, **options):
        targets = [name for name in ("ckpt", "model_config", "data") if options[name]]
        if len(targets) != 1:
            raise CommandError("give exactly one of --ckpt, --model-config, --data", returncode=EXIT_USAGE)
        getattr(self, f"inspect_{targets[0]}")(options)

    def inspect_ckpt(self, options):
        ckpt = load_checkpoint(options["ckpt"])
        self.stdout.write("Parameters:")
        for entry in ckpt.param_index:
            shape = tuple(entry["shape"])
            self.stdout.write(f"  {entry['name']:<48} {str(shape):<20} {math.prod(shape)}")
        self.stdout.write(f"Total parameters: {ckpt.total_parameters}")
        self.write_config("Model config", ckpt.model_config.to_dict())
        self.write_config("Train config", ckpt.train_config)
        self.write_schedule(ckpt.model_config)
        self.stdout.write(f"Norm stats low:  {[round(v, 4) for v in ckpt.norm_stats.low.tolist()]}")
        self.stdout.write(f"Norm stats high: {[round(v, 4) for v in ckpt.norm_stats.high.tolist()]}")

    def inspect_model_config(self, options):
        path = options["model_config"]
        model_data = self.load_section(ModelConfigSerializer, path, "model")
        train_cfg = TrainConfig.from_dict(self.load_section(TrainConfigSerializer, path, "train"))
        config = train_cfg.model_config(ModelConfig.from_dict(model_data), vocab=instruction_vocabulary())
        # Shapes only; no parameter memory is allocated.
        with torch.device("meta"):
            model = DiffusionTransformerPolicy(config)
        groups = {}
        for name, p in model.named_parameters():
            groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + p.numel()
        for group, count in groups.items():
            self.stdout.write(f"  {group:<16} {count}")
        self.write_config("Model config", config.to_dict())
        self.write_schedule(config)
        self.stdout.write(f"Total parameters: {count_parameters(model)}")
        self.stdout.write(f"Trainable parameters: {count_parameters(model, trainable_only=True)}")

    def inspect_data(self, options):
        data_dir = Path(options["data"])
        metadata = read_metadata(data_dir)
        counts = metadata.get("counts", {})
        self.stdout.write(f"Episodes: {counts.get('episodes')}")
        self.stdout.write(f"Trajectories: {counts.get('trajectories')}")
        self.stdout.write(f"Steps: {counts.get('steps')}")
        self.stdout.write(f"Distinct cameras: {counts.get('cameras')}")
        for task, n in counts.get("per_task", {}).items():
            self.stdout.write(f"  {task}: {n}")
        self.stdout.write(f"Image size: {metadata.get('image_size')}")
        if options["frames"] > 0:
            episodes = read_episodes(data_dir, int(metadata.get("image_size", 64)))[:options["frames"]]
            sheet = contact_sheet([ep.images[0] for ep in episodes if len(ep)])
            out = Path(options["frames_out"] or data_dir / "frames.png")
            sheet.save(out)
            self.stdout.write(f"Frames: {out}")

    def write_config(self, title, data):
        self.stdout.write(f"{title}:")
        for key, value in data.items():
            if key == "vocab":
                value = f"{len(value)} words"
            self.stdout.write(f"  {key}: {value}")

    def write_schedule(self, config: ModelConfig):
        snr = make_noise_schedule(config.T_train, config.beta_start, config.beta_end).signal_to_noise()
        self.stdout.write(f"Noise schedule: T_train={config.T_train}, SNR {snr[0]:.3e} -> {snr[-1]:.3e}")
