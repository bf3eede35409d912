"""manage.py eval: closed-loop success rates for a checkpoint."""
from pathlib import Path

from django.conf import settings

from policy.checkpoint import load_policy
from policy.env.camera import default_pool
from policy.env.dataset import write_episodes
from policy.env.world import CHAIN, TASK_KINDS
from policy.evaluation import (
    DiffusionPolicy,
    ExpertPolicy,
    RandomPolicy,
    RolloutConfig,
    chain_eval,
    chain_frame,
    results_frame,
    success_rate,
)
from policy.exceptions import UnknownTaskError
from policy.fileio import atomic_write_csv
from policy.serializers import RolloutConfigSerializer

from ._base import LabCommand

DEFAULT_CHAINS = 200


class Command(LabCommand):
    help = "Evaluate a checkpoint on a task suite (comma-separated kinds, or `chain`) and write a results CSV."

    def add_arguments(self, parser):
        parser.add_argument("--ckpt", required=True)
        parser.add_argument("--out", required=True, help="Results CSV.")
        parser.add_argument("--suite", default="pick", help="Task kinds, comma-separated, or `chain`.")
        parser.add_argument("--episodes", type=int, help="Episodes per task (chains for --suite chain).")
        parser.add_argument("--exec-steps", type=int)
        parser.add_argument("--sampler", choices=["ddpm", "ddim"])
        parser.add_argument("--t-eval", type=int)
        parser.add_argument("--eta", type=float)
        parser.add_argument("--camera-split", choices=["train", "test", "fixed"])
        parser.add_argument("--policy", choices=["model", "expert", "random"], default="model",
                            help="Evaluate the checkpoint, or the expert / random baseline.")
        parser.add_argument("--traces", help="Write every rollout as a JSONL episode file.")
        parser.add_argument("--config", help="JSON config with a `rollout` section.")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--workers", type=int)

    def suite(self, value):
        if value == CHAIN:
            return [CHAIN]
        tasks = [t.strip() for t in value.split(",") if t.strip()]
        unknown = [t for t in tasks if t not in TASK_KINDS]
        if unknown or not tasks:
            raise UnknownTaskError(f"unknown task kinds in --suite: {unknown or value!r}")
        return tasks

    def run(self, **options):
        tasks = self.suite(options["suite"])
        model, ckpt = load_policy(options["ckpt"])
        config = model.config

        overrides = {
            "exec_steps": options["exec_steps"],
            "sampler": options["sampler"],
            "T_eval": options["t_eval"],
            "eta": options["eta"],
            "n_episodes": options["episodes"],
            "camera_split": options["camera_split"],
            "seed": self.seed(options),
            "workers": options["workers"],
        }
        defaults = {"exec_steps": min(8, config.H), "T_eval": min(20, config.T_train),
                    "workers": settings.DITA_DESK_WORKERS}
        if tasks == [CHAIN] and options["episodes"] is None:
            defaults["n_episodes"] = DEFAULT_CHAINS
        data = self.load_section(RolloutConfigSerializer, options["config"], "rollout", overrides, defaults)
        cfg = RolloutConfig(image_size=config.image_size, step_limit=settings.STEP_LIMIT, **data)

        if options["policy"] == "expert":
            policy = ExpertPolicy()
        elif options["policy"] == "random":
            policy = RandomPolicy(ckpt.norm_stats, horizon=config.H)
        else:
            policy = DiffusionPolicy(model, ckpt.norm_stats, cfg)

        pool = default_pool()
        traces = [] if options["traces"] else None
        label = (config.head_kind, config.n_frames, config.H, cfg.exec_steps, cfg.T_eval)
        if tasks == [CHAIN]:
            result = chain_eval(policy, cfg.n_episodes, cfg, pool, traces=traces)
            frame = chain_frame(result, *label)
            for i, rate in enumerate(result.per_position, start=1):
                self.stdout.write(f"{i} in a row: {rate:.3f}")
            self.stdout.write(f"Avg.Len.: {result.avg_len:.3f}")
        else:
            rates = success_rate(policy, tasks, cfg, pool, traces=traces)
            frame = results_frame(rates, *label)
            for r in rates:
                lo, hi = r.interval
                self.stdout.write(f"{r.task}: {r.successes}/{r.n} = {r.rate:.3f} (95% CI {lo:.3f}-{hi:.3f})")

        atomic_write_csv(Path(options["out"]), frame)
        if traces is not None:
            write_episodes(Path(options["traces"]), traces)
            self.stdout.write(f"Traces: {options['traces']}")
        self.success(f"Results written to {options['out']}")
