import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path

import pandas as pd
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from policy.checkpoint import load_policy
from policy.evaluation import RESULT_COLUMNS
from policy.model import count_parameters

TINY_RUN = {
    "model": {"d": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "patch_size": 8, "n_queries": 4,
              "qformer_depth": 1, "n_lang": 8, "bins": 16},
    "train": {"steps": 2, "batch_size": 4, "warmup_steps": 0, "H": 2, "n_frames": 1, "exec_steps": 1,
              "T_train": 10, "log_every": 1, "val_batches": 0},
}


def run(name, **options):
    out = StringIO()
    call_command(name, stdout=out, stderr=StringIO(), **options)
    return out.getvalue()


@override_settings(IMAGE_SIZE=16, STEP_LIMIT=120, CAMERA_POOL_SIZE=40, DITA_DESK_SEED=None, DITA_DESK_WORKERS=1)
class LabCommandTests(SimpleTestCase):
    """gen_data -> train -> eval -> report on a tiny run, shared by every test in the class."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.data = cls.tmp / "data"
        cls.config = cls.tmp / "tiny.json"
        cls.config.write_text(json.dumps(TINY_RUN))
        cls.gen_output = run("gen_data", out=str(cls.data), tasks="pick", episodes_per_task=2,
                             cameras_per_traj=2, seed=0)
        cls.ckpt = cls.tmp / "tiny.ckpt"
        run("train", data=str(cls.data), out=str(cls.ckpt), config=str(cls.config))

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    def path(self, name):
        return self.tmp / self._testMethodName / name

    def assertExitCode(self, code, name, **options):
        with self.assertRaises(CommandError) as ctx:
            run(name, **options)
        self.assertEqual(ctx.exception.returncode, code)
        return str(ctx.exception)

    # ==================== GEN_DATA ====================

    def test_gen_data_reports_counts(self):
        self.assertIn("pick=4", self.gen_output)
        self.assertIn("Wrote 4 episode records", self.gen_output)
        metadata = json.loads((self.data / "metadata.json").read_text())
        self.assertEqual(metadata["image_size"], 16)

    def test_gen_data_is_reproducible(self):
        run("gen_data", out=str(self.path("again")), tasks="pick", episodes_per_task=2, cameras_per_traj=2,
            seed=0)
        self.assertEqual((self.data / "episodes.jsonl").read_bytes(),
                         (self.path("again") / "episodes.jsonl").read_bytes())

    def test_gen_data_requires_out(self):
        with self.assertRaises(CommandError):
            run("gen_data")

    def test_gen_data_rejects_unknown_tasks(self):
        message = self.assertExitCode(4, "gen_data", out=str(self.path("bad")), tasks="juggle")
        self.assertIn("tasks", message)

    @override_settings(DITA_DESK_SEED="7")
    def test_seed_from_the_environment_wins(self):
        run("gen_data", out=str(self.path("seeded")), tasks="pick", episodes_per_task=1, cameras_per_traj=1,
            seed=0)
        metadata = json.loads((self.path("seeded") / "metadata.json").read_text())
        self.assertEqual(metadata["config"]["seed"], 7)

    @override_settings(DITA_DESK_SEED="seven")
    def test_bad_seed_override(self):
        self.assertExitCode(4, "gen_data", out=str(self.path("x")), tasks="pick")

    # ==================== TRAIN ====================

    def test_train_writes_checkpoint_and_metrics(self):
        self.assertTrue(self.ckpt.exists())
        metrics = pd.read_csv(self.ckpt.with_suffix(".metrics.csv"))
        self.assertEqual(len(metrics), 2)
        self.assertTrue(self.ckpt.with_suffix(".metrics.summary.json").exists())

    def test_flags_override_the_config_file(self):
        out = self.path("flags.ckpt")
        metrics = self.path("flags.csv")
        run("train", data=str(self.data), out=str(out), config=str(self.config), steps=3, head="mlp_flat",
            metrics=str(metrics))
        self.assertEqual(len(pd.read_csv(metrics)), 3)
        model, _ = load_policy(out)
        self.assertEqual(model.config.head_kind, "mlp_flat")

    def test_invalid_train_config(self):
        bad = self.path("bad.json")
        bad.parent.mkdir(parents=True, exist_ok=True)
        bad.write_text(json.dumps({"train": {"lr_peak": -1, "steps": 2, "warmup_steps": 0}}))
        message = self.assertExitCode(4, "train", data=str(self.data), out=str(self.path("bad.ckpt")),
                                      config=str(bad))
        self.assertIn("lr_peak", message)

    def test_train_on_missing_dataset(self):
        self.assertExitCode(3, "train", data=str(self.path("nowhere")), out=str(self.path("x.ckpt")),
                            config=str(self.config))

    # ==================== EVAL ====================

    @override_settings(STEP_LIMIT=4)
    def test_eval_writes_results_and_traces(self):
        out, traces = self.path("eval.csv"), self.path("traces.jsonl")
        output = run("eval", ckpt=str(self.ckpt), out=str(out), suite="pick", episodes=2, camera_split="fixed",
                     traces=str(traces))
        self.assertIn("pick: ", output)
        frame = pd.read_csv(out)
        self.assertEqual(list(frame.columns), RESULT_COLUMNS)
        self.assertEqual(frame["task"].tolist(), ["pick"])
        self.assertEqual(frame["T_eval"].tolist(), [10])
        self.assertEqual(len(traces.read_text().splitlines()), 2)

    def test_expert_baseline(self):
        out = self.path("expert.csv")
        run("eval", ckpt=str(self.ckpt), out=str(out), suite="pick,push", episodes=2, policy="expert")
        frame = pd.read_csv(out)
        self.assertEqual(frame["task"].tolist(), ["pick", "push", "mean"])
        self.assertEqual(frame["rate"].tolist(), [1.0, 1.0, 1.0])

    def test_expert_chains(self):
        out = self.path("chain.csv")
        output = run("eval", ckpt=str(self.ckpt), out=str(out), suite="chain", episodes=2, policy="expert")
        self.assertIn("Avg.Len.", output)
        frame = pd.read_csv(out)
        self.assertEqual(frame["task"].tolist()[-1], "avg_len")
        self.assertEqual(len(frame), 6)

    def test_unknown_suite(self):
        self.assertExitCode(4, "eval", ckpt=str(self.ckpt), out=str(self.path("x.csv")), suite="juggle")

    def test_sampler_on_discrete_checkpoint(self):
        ckpt = self.path("discrete.ckpt")
        run("train", data=str(self.data), out=str(ckpt), config=str(self.config), head="discrete")
        message = self.assertExitCode(4, "eval", ckpt=str(ckpt), out=str(self.path("x.csv")), sampler="ddim")
        self.assertIn("discrete", message)

    def test_corrupt_checkpoint(self):
        broken = self.path("broken.ckpt")
        broken.parent.mkdir(parents=True, exist_ok=True)
        broken.write_bytes(self.ckpt.read_bytes()[:100])
        message = self.assertExitCode(3, "eval", ckpt=str(broken), out=str(self.path("x.csv")))
        self.assertIn("byte offset", message)

    # ==================== INSPECT ====================

    def test_inspect_checkpoint(self):
        output = run("inspect", ckpt=str(self.ckpt))
        model, _ = load_policy(self.ckpt)
        self.assertIn(f"Total parameters: {count_parameters(model)}", output)
        self.assertIn("Norm stats low:", output)
        self.assertIn("Noise schedule: T_train=", output)

    def test_inspect_model_config(self):
        output = run("inspect", model_config=str(Path(settings.BASE_DIR) / "configs" / "full_scale.json"))
        self.assertIn("backbone", output)
        self.assertRegex(output, r"Noise schedule: T_train=\d+, SNR \S+ -> \S+")
        self.assertIn("Total parameters:", output)

    def test_inspect_dataset_and_frames(self):
        sheet = self.path("frames.png")
        sheet.parent.mkdir(parents=True, exist_ok=True)
        output = run("inspect", data=str(self.data), frames=3, frames_out=str(sheet))
        self.assertIn("Episodes: 4", output)
        self.assertTrue(sheet.exists())

    def test_inspect_needs_one_target(self):
        self.assertExitCode(2, "inspect")
        self.assertExitCode(2, "inspect", ckpt=str(self.ckpt), data=str(self.data))

    # ==================== ABLATE ====================

    def test_empty_grid_writes_header_only(self):
        grid = self.path("grid.json")
        grid.parent.mkdir(parents=True, exist_ok=True)
        grid.write_text("{}")
        out = self.path("grid.csv")
        run("ablate", grid=str(grid), data=str(self.path("unused")), out=str(out))
        self.assertEqual(out.read_text().strip(), ",".join(RESULT_COLUMNS))

    @override_settings(STEP_LIMIT=3)
    def test_small_grid(self):
        grid = self.path("grid.json")
        grid.parent.mkdir(parents=True, exist_ok=True)
        grid.write_text(json.dumps({**TINY_RUN, "k": [1, 2], "rollout": {"n_episodes": 1, "T_eval": 2,
                                                                         "camera_split": "fixed"}}))
        out = self.path("grid.csv")
        run("ablate", grid=str(grid), data=str(self.data), out=str(out))
        frame = pd.read_csv(out)
        self.assertEqual(frame["k"].tolist(), [1, 2])
        self.assertTrue((self.path("grid_ckpt") / "incontext_f1_h2.ckpt").exists())

    def test_chain_grid_is_rejected(self):
        grid = self.path("grid.json")
        grid.parent.mkdir(parents=True, exist_ok=True)
        grid.write_text(json.dumps({"tasks": ["chain"], "H": [2]}))
        self.assertExitCode(4, "ablate", grid=str(grid), data=str(self.data), out=str(self.path("x.csv")))

    # ==================== REPORT ====================

    def test_report(self):
        results = self.path("expert.csv")
        run("eval", ckpt=str(self.ckpt), out=str(results), suite="pick", episodes=1, policy="expert")
        pdf = self.path("report.pdf")
        run("report", results=str(results), out=str(pdf), metrics=str(self.ckpt.with_suffix(".metrics.csv")),
            preview_cameras=2)
        self.assertEqual(pdf.read_bytes()[:4], b"%PDF")

    def test_report_without_results(self):
        self.assertExitCode(3, "report", results=str(self.path("missing.csv")), out=str(self.path("r.pdf")))
