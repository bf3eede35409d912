import math

import numpy as np
import torch
from django.test import SimpleTestCase, tag
from hypothesis import given
from hypothesis import strategies as st

from policy.env.camera import CameraPool
from policy.env.world import CHAIN_LENGTH
from policy.evaluation import (
    RESULT_COLUMNS,
    ChainResult,
    DiffusionPolicy,
    ExpertPolicy,
    RandomPolicy,
    RolloutConfig,
    TaskRate,
    avg_len_from_rates,
    chain_eval,
    chain_frame,
    episode_streams,
    replay_trace,
    results_frame,
    rollout,
    sample_chunk,
    success_rate,
    summarize_chains,
    wilson_interval,
)
from policy.exceptions import InvalidRangeError, SamplerMismatchError, UnknownTaskError

from .factories import UNIT_STATS, tiny_batch, tiny_policy


def small_rollout(**overrides):
    params = dict(exec_steps=1, T_eval=5, n_episodes=2, image_size=16, step_limit=4, camera_split="fixed")
    params.update(overrides)
    return RolloutConfig(**params)


class WilsonTests(SimpleTestCase):
    def test_known_values(self):
        lo, hi = wilson_interval(0, 100)
        self.assertEqual(lo, 0.0)
        self.assertAlmostEqual(hi, 0.037, places=3)
        lo, hi = wilson_interval(100, 100)
        self.assertAlmostEqual(lo, 0.963, places=3)
        self.assertEqual(hi, 1.0)

    def test_no_trials(self):
        self.assertEqual(wilson_interval(0, 0), (0.0, 1.0))

    @given(st.integers(1, 500).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
    def test_interval_contains_the_rate(self, args):
        s, n = args
        lo, hi = wilson_interval(s, n)
        self.assertLessEqual(lo, s / n + 1e-12)
        self.assertGreaterEqual(hi, s / n - 1e-12)
        self.assertTrue(0.0 <= lo <= hi <= 1.0)


class ChainMetricTests(SimpleTestCase):
    def test_average_length_from_rates(self):
        self.assertAlmostEqual(avg_len_from_rates([0.9, 0.8, 0.7, 0.6, 0.5]), 3.5)

    def test_perfect_and_empty_chains(self):
        self.assertEqual(summarize_chains([5] * 10).avg_len, 5.0)
        self.assertEqual(summarize_chains([0] * 10).avg_len, 0.0)
        self.assertEqual(summarize_chains([]).per_position, [0.0] * CHAIN_LENGTH)

    def test_per_position_rates(self):
        result = summarize_chains([0, 1, 2, 5])
        self.assertEqual(result.per_position, [0.75, 0.5, 0.25, 0.25, 0.25])
        self.assertAlmostEqual(result.avg_len, 2.0)

    @given(st.lists(st.integers(0, CHAIN_LENGTH), min_size=1, max_size=50))
    def test_rates_never_increase_along_the_chain(self, completed):
        rates = summarize_chains(completed).per_position
        self.assertTrue(all(a >= b for a, b in zip(rates, rates[1:])))
        self.assertAlmostEqual(summarize_chains(completed).avg_len, float(np.mean(completed)))


class ResultTableTests(SimpleTestCase):
    def test_single_task_has_no_mean_row(self):
        frame = results_frame([TaskRate("pick", 3, 4)], "incontext", 2, 16, 8, 20)
        self.assertEqual(list(frame.columns), RESULT_COLUMNS)
        self.assertEqual(frame["task"].tolist(), ["pick"])
        self.assertEqual(frame["rate"].tolist(), [0.75])

    def test_mean_row(self):
        frame = results_frame([TaskRate("pick", 4, 4), TaskRate("push", 0, 4)], "discrete", 1, 4, 2, 20)
        mean = frame[frame["task"] == "mean"].iloc[0]
        self.assertEqual(mean["rate"], 0.5)
        self.assertEqual(mean["n"], 8)

    def test_chain_rows(self):
        frame = chain_frame(ChainResult([1.0, 0.5, 0.5, 0.0, 0.0], 2.0, 2), "incontext", 2, 16, 8, 20)
        self.assertEqual(frame["task"].tolist(), [f"chain@{i}" for i in range(1, 6)] + ["avg_len"])
        self.assertTrue(math.isnan(frame["ci_lo"].iloc[-1]))
        self.assertEqual(frame["rate"].iloc[-1], 2.0)


class RolloutConfigTests(SimpleTestCase):
    def test_validation(self):
        for kwargs in [dict(sampler="euler"), dict(exec_steps=0), dict(camera_split="val")]:
            with self.subTest(**kwargs), self.assertRaises(InvalidRangeError):
                RolloutConfig(**kwargs)

    def test_episode_streams_are_reproducible_and_distinct(self):
        a_seed, a_rng, a_gen = episode_streams(0, 0, 0)
        b_seed, b_rng, b_gen = episode_streams(0, 0, 0)
        self.assertEqual(a_seed, b_seed)
        self.assertEqual(a_rng.integers(1 << 30), b_rng.integers(1 << 30))
        self.assertTrue(torch.equal(torch.rand(3, generator=a_gen), torch.rand(3, generator=b_gen)))
        self.assertNotEqual(a_seed, episode_streams(0, 0, 1)[0])
        self.assertNotEqual(a_seed, episode_streams(0, 1, 0)[0])


class SamplingTests(SimpleTestCase):
    def setUp(self):
        self.model = tiny_policy().eval()
        self.batch = tiny_batch(self.model.config)

    def _sample(self, cfg, seed=0):
        return sample_chunk(self.model, self.batch.lang_ids, self.batch.frames,
                            torch.Generator().manual_seed(seed), cfg)

    def test_deterministic_ddim_is_bit_identical(self):
        cfg = small_rollout(sampler="ddim", eta=0.0)
        a, b = self._sample(cfg), self._sample(cfg)
        self.assertTrue(torch.equal(a, b))
        self.assertEqual(a.shape, (2, self.model.config.H, 7))
        self.assertLessEqual(float(a.abs().max()), 1.0)

    def test_ddpm_and_stochastic_ddim(self):
        for cfg in (small_rollout(sampler="ddpm"), small_rollout(sampler="ddim", eta=1.0)):
            with self.subTest(sampler=cfg.sampler, eta=cfg.eta):
                chunk = self._sample(cfg)
                self.assertTrue(torch.isfinite(chunk).all())
                self.assertFalse(torch.equal(chunk, self._sample(cfg, seed=1)))

    def test_t_eval_above_t_train(self):
        with self.assertRaises(InvalidRangeError):
            self._sample(small_rollout(T_eval=11))

    def test_discrete_head_decodes_by_argmax(self):
        model = tiny_policy("discrete").eval()
        chunk = sample_chunk(model, self.batch.lang_ids, self.batch.frames, torch.Generator(), small_rollout())
        bins = model.config.bins
        centers = chunk * bins / 2.0 + bins / 2.0 - 0.5
        torch.testing.assert_close(centers, centers.round(), rtol=0, atol=1e-4)
        with self.assertRaises(SamplerMismatchError):
            sample_chunk(model, self.batch.lang_ids, self.batch.frames, torch.Generator(),
                         small_rollout(sampler="ddim"))

    def test_discrete_policy_rejects_an_explicit_sampler(self):
        with self.assertRaises(SamplerMismatchError):
            DiffusionPolicy(tiny_policy("discrete"), UNIT_STATS, small_rollout(sampler="ddpm"))


class RolloutTests(SimpleTestCase):
    def test_expert_succeeds_and_replays(self):
        cfg = small_rollout(step_limit=120)
        for kind in ("pick", "place", "push"):
            with self.subTest(kind=kind):
                result = rollout(ExpertPolicy(), 3, kind, cfg)
                self.assertTrue(result.success)
                self.assertEqual(result.inference_calls, result.steps)
                self.assertEqual(len(result.trace), result.steps)
                self.assertTrue(replay_trace(result.trace))

    def test_chunks_are_executed_k_actions_at_a_time(self):
        cfg = small_rollout(exec_steps=3, step_limit=10)
        result = rollout(RandomPolicy(UNIT_STATS, horizon=4), 0, "stack", cfg)
        self.assertEqual(result.inference_calls, math.ceil(result.steps / 3))
        self.assertLessEqual(result.steps, 10)

    def test_model_policy_rollout(self):
        model = tiny_policy()
        cfg = small_rollout()
        result = rollout(DiffusionPolicy(model, UNIT_STATS, cfg), 0, "pick", cfg)
        self.assertEqual(result.steps, 4)
        self.assertEqual(result.inference_calls, 4)
        self.assertTrue(np.all(np.abs(result.trace.actions) <= 1.0))
        self.assertEqual(result.trace.images.shape, (4, 16, 16, 3))

    def test_exec_steps_beyond_the_chunk(self):
        with self.assertRaises(InvalidRangeError):
            rollout(RandomPolicy(UNIT_STATS, horizon=2), 0, "pick", small_rollout(exec_steps=3))

    def test_unknown_task(self):
        with self.assertRaises(UnknownTaskError):
            rollout(ExpertPolicy(), 0, "juggle", small_rollout())


class SuccessRateTests(SimpleTestCase):
    def test_expert_rate_over_held_out_cameras(self):
        cfg = small_rollout(n_episodes=3, step_limit=120, camera_split="test")
        traces = []
        rates = success_rate(ExpertPolicy(), ["pick", "pick_place"], cfg, CameraPool(size=40, seed=0), traces)
        self.assertEqual([(r.task, r.successes, r.n) for r in rates], [("pick", 3, 3), ("pick_place", 3, 3)])
        self.assertEqual(len(traces), 6)

    def test_worker_count_does_not_change_results(self):
        policy = RandomPolicy(UNIT_STATS, horizon=4)
        runs = []
        for workers in (1, 3):
            traces = []
            success_rate(policy, ["push"], small_rollout(n_episodes=4, exec_steps=2, step_limit=6,
                                                         workers=workers), traces=traces)
            runs.append(traces)
        for a, b in zip(*runs):
            self.assertEqual(a.seed, b.seed)
            np.testing.assert_array_equal(a.actions, b.actions)


@tag("slow")
class ChainEvalTests(SimpleTestCase):
    def test_expert_completes_every_chain(self):
        result = chain_eval(ExpertPolicy(), 50, small_rollout(step_limit=120))
        self.assertEqual(result.n, 50)
        self.assertEqual(result.avg_len, 5.0)
