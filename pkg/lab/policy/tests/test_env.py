import json
import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, override_settings, tag

from policy.env import DeskEnv, reset
from policy.env.camera import FIXED_CAMERA, CameraPool, CameraPose, default_pool, sample_camera
from policy.env.dataset import (
    EPISODES_FILE,
    METADATA_FILE,
    DatasetConfig,
    expert_trajectory,
    generate_dataset,
    read_episodes,
    read_metadata,
)
from policy.env.expert import expert_action
from policy.env.render import BACKGROUND, render
from policy.env.world import (
    CHAIN,
    CHAIN_LENGTH,
    MAX_DXY,
    MAX_DYAW,
    MAX_DZ,
    OBJECT_RADIUS,
    TASK_KINDS,
    EnvState,
    GripperState,
    clip_action,
    instruction_vocabulary,
    reset_scene,
    spawn_scene,
    step,
    wrap_angle,
)
from policy.exceptions import DatasetIOError, InvalidRangeError, UnknownTaskError


class WorldTests(SimpleTestCase):
    def test_reset_is_deterministic(self):
        for kind in TASK_KINDS:
            with self.subTest(kind=kind):
                a, task_a, _ = reset_scene(7, kind)
                b, task_b, _ = reset_scene(7, kind)
                self.assertEqual(a.to_json(), b.to_json())
                self.assertEqual(task_a, task_b)

    def test_unknown_kind(self):
        with self.assertRaises(UnknownTaskError):
            reset_scene(0, "juggle")

    def test_step_leaves_the_input_state_alone(self):
        state, task, _ = reset_scene(3, "pick")
        before = state.to_json()
        result = step(state, np.array([0.05, 0, 0, 0, 0, 0, 0]), task)
        self.assertEqual(state.to_json(), before)
        self.assertEqual(result.state.step_count, 1)

    def test_step_limit_ends_the_episode(self):
        state, task, _ = reset_scene(3, "pick")
        result = step(state, np.zeros(7), task, step_limit=1)
        self.assertTrue(result.done)
        self.assertFalse(result.success)

    def test_clip_action(self):
        a = clip_action([1.0, -1.0, 1.0, 0.0, 0.0, 5.0, 1.0])
        np.testing.assert_allclose(a[:3], [MAX_DXY, -MAX_DXY, MAX_DZ])
        self.assertEqual(a[5], MAX_DYAW)

    def test_wrap_angle(self):
        self.assertAlmostEqual(wrap_angle(3 * np.pi / 2), -np.pi / 2)
        self.assertAlmostEqual(wrap_angle(np.pi), np.pi)
        self.assertAlmostEqual(wrap_angle(-np.pi), np.pi)

    def test_instructions_stay_inside_the_vocabulary(self):
        words = set(instruction_vocabulary())
        for seed in range(20):
            for kind in TASK_KINDS:
                _, task, _ = reset_scene(seed, kind)
                self.assertLessEqual(set(task.instruction.split()), words)

    def test_spawned_objects_never_overlap(self):
        for seed in range(200):
            state = spawn_scene(np.random.default_rng(seed))
            for i, a in enumerate(state.objects):
                for b in state.objects[i + 1:]:
                    with self.subTest(seed=seed, pair=(a.id, b.id)):
                        self.assertGreaterEqual(math.hypot(a.x - b.x, a.y - b.y), 2 * OBJECT_RADIUS)

    def test_held_object_tracks_the_gripper(self):
        held_steps = 0
        for seed in range(5):
            for kind in ("pick_place", "stack", "place"):
                state, task, _ = reset_scene(seed, kind)
                rng = np.random.default_rng(seed)
                for _ in range(60):
                    if kind == "place":
                        action = np.concatenate([rng.uniform(-0.05, 0.05, 6), [1.0]])
                    else:
                        action = expert_action(state, task)
                    result = step(state, action, task)
                    state, g = result.state, result.state.gripper
                    if g.held is not None:
                        held_steps += 1
                        obj = state.object(g.held)
                        self.assertEqual((obj.x, obj.y), (g.x, g.y))
                    if result.done:
                        break
        self.assertGreater(held_steps, 0)


class ExpertTests(SimpleTestCase):
    def test_expert_solves_every_primitive(self):
        for kind in TASK_KINDS:
            for seed in range(10):
                with self.subTest(kind=kind, seed=seed):
                    _, _, _, success = expert_trajectory(seed, kind)
                    self.assertTrue(success)

    def test_actions_respect_the_clip_bounds(self):
        _, actions, _, _ = expert_trajectory(5, "pick_place")
        np.testing.assert_allclose(actions, np.stack([clip_action(a) for a in actions]), rtol=0, atol=1e-12)

    def test_pick_closes_the_gripper(self):
        _, actions, _, _ = expert_trajectory(2, "pick")
        self.assertGreaterEqual(actions[-1][6], 0.5)
        self.assertEqual(expert_action(*reset_scene(2, "pick")[:2]).shape, (7,))


@tag("slow")
class ExpertOracleTests(SimpleTestCase):
    def test_five_hundred_resets_per_kind(self):
        for kind in TASK_KINDS:
            failures = [seed for seed in range(500) if not expert_trajectory(seed, kind)[3]]
            self.assertEqual(failures, [], kind)


class CameraTests(SimpleTestCase):
    def test_project_unproject_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            camera = sample_camera(rng)
            xy = rng.uniform(0, 1, size=(5, 2))
            np.testing.assert_allclose(camera.unproject(camera.project(xy)), xy, atol=1e-12)

    def test_fixed_camera_is_identity(self):
        self.assertEqual(FIXED_CAMERA.affine(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

    def test_pool_split(self):
        pool = CameraPool(size=100, seed=1, test_every=20)
        train, test = pool.split("train"), pool.split("test")
        self.assertEqual((len(train), len(test)), (95, 5))
        self.assertFalse(set(train) & set(test))
        self.assertEqual(pool.split("fixed"), [FIXED_CAMERA])
        with self.assertRaises(InvalidRangeError):
            pool.split("val")

    def test_pool_is_seeded(self):
        self.assertEqual(CameraPool(size=40, seed=3).cameras, CameraPool(size=40, seed=3).cameras)
        self.assertNotEqual(CameraPool(size=40, seed=3).cameras, CameraPool(size=40, seed=4).cameras)

    @override_settings(CAMERA_POOL_SIZE=60, CAMERA_POOL_SEED=5, CAMERA_TEST_EVERY=10)
    def test_default_pool_reads_settings(self):
        pool = default_pool()
        self.assertEqual((pool.size, pool.seed, pool.test_every), (60, 5, 10))
        self.assertEqual(len(pool.split("test")), 6)


class RenderTests(SimpleTestCase):
    def test_shape_and_determinism(self):
        state, _, _ = reset_scene(4, "stack")
        a = render(state, FIXED_CAMERA, 32)
        self.assertEqual(a.shape, (32, 32, 3))
        self.assertEqual(a.dtype, np.uint8)
        np.testing.assert_array_equal(a, render(state, FIXED_CAMERA, 32))

    def test_camera_changes_the_image(self):
        state, _, _ = reset_scene(4, "stack")
        camera = sample_camera(np.random.default_rng(1))
        self.assertFalse(np.array_equal(render(state, FIXED_CAMERA, 32), render(state, camera, 32)))

    def test_gripper_can_be_hidden(self):
        state, _, _ = reset_scene(4, "pick")
        shown = render(state, FIXED_CAMERA, 32)
        hidden = render(state, FIXED_CAMERA, 32, show_gripper=False)
        self.assertFalse(np.array_equal(shown, hidden))

    def test_reset_helper(self):
        state, task, obs = reset(4, "pick", size=16)
        self.assertEqual(obs.shape, (16, 16, 3))
        self.assertEqual(task.kind, "pick")

    def test_half_turn_camera_rotates_the_pixels(self):
        for seed, kind in [(4, "stack"), (9, "push"), (2, "place")]:
            state, _, _ = reset_scene(seed, kind)
            with self.subTest(kind=kind):
                turned = render(state, CameraPose(rotation=math.pi), 32)
                self.assertTrue(np.array_equal(np.rot90(render(state, FIXED_CAMERA, 32), 2), turned))

    def test_empty_scene_is_a_single_color(self):
        empty = EnvState(objects=[], gripper=GripperState(), zones=[])
        img = render(empty, sample_camera(np.random.default_rng(5)), 32, show_gripper=False)
        colors = np.unique(img.reshape(-1, 3), axis=0)
        self.assertEqual(colors.tolist(), [list(BACKGROUND)])


class DeskEnvTests(SimpleTestCase):
    def test_expert_drives_the_env_to_success(self):
        env = DeskEnv(image_size=16)
        env.reset(1, "pick_place")
        result = None
        while result is None or not result.done:
            result = env.step(expert_action(env.state, env.task))
        self.assertTrue(result.success)
        self.assertEqual(env.observe().shape, (16, 16, 3))

    def test_chain_advances_through_subtasks(self):
        env = DeskEnv(image_size=16)
        env.reset(0, CHAIN)
        first = env.task
        while True:
            result = env.step(expert_action(env.state, env.task))
            if result.done:
                break
        self.assertTrue(result.success)
        nxt = env.advance_chain()
        self.assertEqual(env.completed, [first])
        if nxt is not None:
            self.assertEqual(env.steps_in_task, 0)
            self.assertLessEqual(len(env.completed), CHAIN_LENGTH)

    def test_advance_outside_a_chain(self):
        env = DeskEnv(image_size=16)
        env.reset(0, "pick")
        self.assertIsNone(env.advance_chain())


class DatasetTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)
        self.cfg = DatasetConfig(tasks=["pick", "push"], episodes_per_task=2, cameras_per_traj=2, image_size=16)
        self.pool = CameraPool(size=40, seed=0)

    def test_counts_and_records(self):
        summary, stats = generate_dataset(self.cfg, self.tmp, self.pool)
        self.assertEqual(summary.episodes, 8)
        self.assertEqual(summary.trajectories, 4)
        self.assertEqual(summary.per_task, {"pick": 4, "push": 4})
        episodes = read_episodes(self.tmp)
        self.assertEqual(len(episodes), 8)
        self.assertEqual(sum(len(ep) for ep in episodes), summary.steps)
        self.assertEqual(episodes[0].images.shape[1:], (16, 16, 3))
        self.assertTrue(np.all(stats.high > stats.low))

    def test_cameras_come_from_the_training_split(self):
        generate_dataset(self.cfg, self.tmp, self.pool)
        train = {tuple(c.affine()) for c in self.pool.split("train")}
        for ep in read_episodes(self.tmp):
            self.assertIn(tuple(ep.camera), train)

    def test_same_seed_same_bytes(self):
        generate_dataset(self.cfg, self.tmp / "a", self.pool)
        generate_dataset(self.cfg, self.tmp / "b", self.pool)
        for name in (EPISODES_FILE, METADATA_FILE):
            self.assertEqual((self.tmp / "a" / name).read_bytes(), (self.tmp / "b" / name).read_bytes())

    def test_metadata(self):
        generate_dataset(self.cfg, self.tmp, self.pool)
        metadata = read_metadata(self.tmp)
        self.assertEqual(metadata["image_size"], 16)
        self.assertEqual(metadata["vocab"], instruction_vocabulary())
        self.assertEqual(set(metadata["norm_stats"]), {"low", "high"})

    def test_fixed_camera_mode(self):
        cfg = DatasetConfig(tasks=["pick"], episodes_per_task=1, cameras_per_traj=2, image_size=16,
                            camera_mode="fixed")
        generate_dataset(cfg, self.tmp, self.pool)
        for ep in read_episodes(self.tmp):
            self.assertEqual(ep.camera, FIXED_CAMERA.affine())

    def test_malformed_line_is_reported_with_its_number(self):
        generate_dataset(DatasetConfig(tasks=["pick"], episodes_per_task=1, cameras_per_traj=1, image_size=16),
                         self.tmp, self.pool)
        path = self.tmp / EPISODES_FILE
        path.write_text(path.read_text() + json.dumps({"task": "pick"}) + "\n")
        with self.assertRaisesRegex(DatasetIOError, ":2:"):
            read_episodes(self.tmp)

    def test_missing_dataset(self):
        with self.assertRaises(DatasetIOError):
            read_metadata(self.tmp / "nowhere")

    def test_unknown_task(self):
        with self.assertRaises(UnknownTaskError):
            DatasetConfig(tasks=["juggle"])
