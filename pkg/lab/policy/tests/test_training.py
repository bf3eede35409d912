import math
import tempfile
from pathlib import Path

import pandas as pd
import torch
from django.test import SimpleTestCase, tag

from policy.checkpoint import load_checkpoint
from policy.data import Batch
from policy.evaluation import DiffusionPolicy, RandomPolicy, RolloutConfig, success_rate
from policy.exceptions import InvalidRangeError
from policy.scheduler import make_noise_schedule
from policy.training import (
    METRIC_COLUMNS,
    TrainConfig,
    derive_seeds,
    diffusion_loss,
    discrete_loss,
    lr_schedule,
    param_groups,
    train,
)

from .factories import generated_pick_dataset, synthetic_dataset, tiny_batch, tiny_config, tiny_policy


def tiny_train_config(**overrides):
    params = dict(batch_size=4, steps=3, warmup_steps=1, H=2, n_frames=2, T_train=10, exec_steps=1,
                  log_every=1, val_batches=0)
    params.update(overrides)
    return TrainConfig(**params)


class TrainConfigTests(SimpleTestCase):
    def test_validation(self):
        for kwargs in [dict(steps=0), dict(warmup_steps=3), dict(lr_peak=0.0), dict(head_kind="rnn"),
                       dict(exec_steps=3)]:
            with self.subTest(**kwargs), self.assertRaises(InvalidRangeError):
                tiny_train_config(**kwargs)

    def test_dict_round_trip(self):
        cfg = tiny_train_config(lr_multipliers={"image_encoder": 0.1})
        self.assertEqual(TrainConfig.from_dict(cfg.to_dict()), cfg)

    def test_model_config_takes_shared_fields(self):
        cfg = tiny_train_config(head_kind="mlp_flat", H=2, n_frames=1)
        config = cfg.model_config(tiny_config(H=8, n_frames=3))
        self.assertEqual((config.head_kind, config.H, config.n_frames, config.T_train), ("mlp_flat", 2, 1, 10))
        self.assertEqual(config.d, 16)


class ScheduleTests(SimpleTestCase):
    def test_warmup_then_cosine(self):
        cfg = TrainConfig(steps=110, warmup_steps=10, lr_peak=1e-3, H=16)
        self.assertEqual(lr_schedule(0, cfg), 0.0)
        self.assertAlmostEqual(lr_schedule(5, cfg), 5e-4)
        self.assertAlmostEqual(lr_schedule(10, cfg), 1e-3)
        self.assertAlmostEqual(lr_schedule(60, cfg), 5e-4)
        self.assertAlmostEqual(lr_schedule(110, cfg), 0.0)

    def test_constant_without_decay(self):
        cfg = TrainConfig(steps=100, warmup_steps=0, lr_peak=1e-3, lr_decay=False)
        self.assertEqual(lr_schedule(99, cfg), 1e-3)

    def test_derived_seeds(self):
        seeds = derive_seeds(0)
        self.assertEqual(seeds, derive_seeds(0))
        self.assertEqual(len(set(seeds.values())), 4)
        self.assertNotEqual(seeds, derive_seeds(1))


class ParamGroupTests(SimpleTestCase):
    def test_vectors_are_not_decayed(self):
        model = tiny_policy()
        cfg = tiny_train_config(weight_decay=0.1)
        for group in param_groups(model, cfg):
            for p in group["params"]:
                self.assertEqual(group["weight_decay"] == 0.0, p.dim() < 2)

    def test_lr_multiplier(self):
        model = tiny_policy()
        cfg = tiny_train_config(lr_peak=1e-3, lr_multipliers={"image_encoder": 0.1})
        for group in param_groups(model, cfg):
            encoder = all(name.startswith("image_encoder.") for name in group["names"])
            self.assertAlmostEqual(group["lr"], 1e-4 if encoder else 1e-3)
        covered = sum(len(g["params"]) for g in param_groups(model, cfg))
        self.assertEqual(covered, len(list(model.parameters())))

    def test_unknown_prefix(self):
        cfg = tiny_train_config(lr_multipliers={"decoder": 0.5})
        with self.assertRaises(InvalidRangeError):
            param_groups(tiny_policy(), cfg)


class LossTests(SimpleTestCase):
    def test_fully_masked_batch_has_zero_loss(self):
        model = tiny_policy()
        batch = tiny_batch(model.config)
        batch.mask[:] = False
        loss = diffusion_loss(model, make_noise_schedule(10), batch, torch.Generator().manual_seed(0))
        self.assertEqual(float(loss), 0.0)

    def test_loss_is_deterministic_given_the_generator(self):
        model = tiny_policy()
        batch = tiny_batch(model.config)
        schedule = make_noise_schedule(10)
        a = diffusion_loss(model, schedule, batch, torch.Generator().manual_seed(0))
        b = diffusion_loss(model, schedule, batch, torch.Generator().manual_seed(0))
        self.assertEqual(float(a), float(b))
        self.assertGreater(float(a), 0.0)

    def test_zero_predictor_scores_unit_loss(self):
        model = tiny_policy()
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        batch = tiny_batch(model.config, B=256)
        loss = diffusion_loss(model, make_noise_schedule(10), batch, torch.Generator().manual_seed(0))
        self.assertAlmostEqual(float(loss), 1.0, delta=0.1)

    def test_discrete_head_starts_near_uniform(self):
        model = tiny_policy("discrete", bins=256)
        batch = tiny_batch(model.config, B=8)
        with torch.no_grad():
            loss = discrete_loss(model, batch)
        self.assertAlmostEqual(float(loss), math.log(256), delta=0.05)

    def test_masked_filler_steps_do_not_change_the_loss(self):
        model = tiny_policy()
        schedule = make_noise_schedule(10)
        batch = tiny_batch(model.config, B=3)
        batch.mask[:, 1] = False
        filled = Batch(batch.lang_ids, batch.frames, batch.actions.clone(), batch.mask)
        filled.actions[:, 1] = 0.0
        t = torch.tensor([0, 4, 9])
        eps = torch.randn(batch.actions.shape, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            a = diffusion_loss(model, schedule, batch, t=t, eps=eps)
            b = diffusion_loss(model, schedule, filled, t=t, eps=eps)
        torch.testing.assert_close(a, b)

    def test_padded_action_dims_are_ignored(self):
        model = tiny_policy()
        schedule = make_noise_schedule(10)
        batch = tiny_batch(model.config, B=3)
        junk = torch.full((3, model.config.H, 9), 50.0)
        padded = Batch(batch.lang_ids, batch.frames, torch.cat([batch.actions, junk], dim=-1), batch.mask)
        t = torch.tensor([1, 5, 8])
        eps = torch.randn(batch.actions.shape, generator=torch.Generator().manual_seed(4))
        with torch.no_grad():
            a = diffusion_loss(model, schedule, batch, t=t, eps=eps)
            b = diffusion_loss(model, schedule, padded, t=t, eps=eps)
        torch.testing.assert_close(a, b)


class TrainLoopTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)
        self.dataset = synthetic_dataset(n_episodes=4)

    def test_writes_checkpoint_metrics_and_summary(self):
        metrics = self.tmp / "run.metrics.csv"
        result = train(tiny_train_config(), self.dataset, base_model=tiny_config(), out=self.tmp / "run.ckpt",
                       metrics_path=metrics)
        frame = pd.read_csv(metrics)
        self.assertEqual(list(frame.columns), METRIC_COLUMNS)
        self.assertEqual(frame["step"].tolist(), [0, 1, 2])
        self.assertTrue((self.tmp / "run.metrics.summary.json").exists())
        ckpt = load_checkpoint(result.checkpoint)
        self.assertEqual(ckpt.model_config.H, 2)
        self.assertEqual(ckpt.train_config["steps"], 3)

    def test_same_seed_same_checkpoint_bytes(self):
        for name in ("a.ckpt", "b.ckpt"):
            train(tiny_train_config(), self.dataset, base_model=tiny_config(), out=self.tmp / name)
        self.assertEqual((self.tmp / "a.ckpt").read_bytes(), (self.tmp / "b.ckpt").read_bytes())

    def test_discrete_head_trains(self):
        result = train(tiny_train_config(head_kind="discrete"), self.dataset, base_model=tiny_config())
        self.assertEqual(len(result.metrics), 3)
        self.assertTrue(all(loss > 0 for loss in result.metrics["loss"]))


@tag("slow")
class TrainingCompetenceTests(SimpleTestCase):
    def test_fixed_camera_pick(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        dataset = generated_pick_dataset(Path(tmp.name) / "data")
        cfg = TrainConfig(batch_size=16, steps=400, warmup_steps=20, lr_peak=1e-3, H=4, n_frames=1, T_train=20,
                          exec_steps=4, log_every=100, val_batches=0, augment_brightness=0.0)
        result = train(cfg, dataset, base_model=tiny_config())

        losses = result.metrics["loss"]
        self.assertLess(losses.tail(50).mean(), losses.head(50).mean())

        rollout_cfg = RolloutConfig(exec_steps=4, T_eval=5, n_episodes=10, image_size=16, camera_split="fixed")
        trained = success_rate(DiffusionPolicy(result.model, dataset.norm_stats, rollout_cfg), ["pick"], rollout_cfg)
        baseline = success_rate(RandomPolicy(dataset.norm_stats, horizon=4), ["pick"], rollout_cfg)
        self.assertEqual(trained[0].n, 10)
        self.assertGreaterEqual(trained[0].successes, baseline[0].successes)
