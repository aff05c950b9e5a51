#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import dataclasses
import math
import unittest

import numpy as np

from edgelift.config import ConfigError
from edgelift.geometry import (
    Box3D,
    clip_box2d,
    gravity_aligned_pose,
    inverse_pose,
    project_points,
    transform_points,
)
from edgelift.simkit import (
    acceptance_scene,
    class_dims,
    delay,
    depth_intrinsics,
    derive_seed,
    LatencySpec,
    make_trajectory,
    NoiseSpec,
    oracle_detect2d,
    project_box3d,
    ray_box_hits,
    render_depth,
    Scenario,
    Scene,
    SceneObject,
    silhouette_band,
    TrajectorySpec,
    visible_objects,
)
from edgelift.test_utils import looking_at, single_box_scene

# Camera level with the box's mid-height, 3 m from its center along -x.
_FRONT_DISTANCE = 2.75


def _front_pose():
    return looking_at((0.0, 0.0, 0.25), distance=3.0, height=0.25)


def _occluded_scene() -> Scene:
    scene = single_box_scene()
    hidden = SceneObject(
        class_id="bag",
        box=Box3D(center=np.array([1.5, 0.0, 0.25]), dims=np.full(3, 0.5)),
    )
    return Scene(objects=scene.objects + [hidden], target=scene.target)


def _face_hit(origin: np.ndarray, direction: np.ndarray, box: Box3D) -> float:
    # Nearest positive hit over the six face rectangles, inf if none.
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    to_local = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = to_local @ (origin - box.center)
    d = to_local @ direction
    half = box.dims / 2
    best = math.inf
    for axis in range(3):
        if d[axis] == 0.0:
            continue
        for sign in (-1.0, 1.0):
            t = (sign * half[axis] - o[axis]) / d[axis]
            if t <= 0:
                continue
            hit = o + t * d
            others = [a for a in range(3) if a != axis]
            if all(abs(hit[a]) <= half[a] + 1e-9 for a in others):
                best = min(best, t)
    return best


def _horizontal(position: np.ndarray, target: np.ndarray) -> float:
    return float(np.linalg.norm((position - target)[:2]))


class SeedTest(unittest.TestCase):
    def test_derive_seed(self) -> None:
        self.assertEqual(derive_seed(42, 1, 7), derive_seed(42, 1, 7))
        self.assertNotEqual(derive_seed(42, 1, 7), derive_seed(42, 1, 8))
        self.assertNotEqual(derive_seed(42, 1, 7), derive_seed(42, 3, 7))
        self.assertNotEqual(derive_seed(42, 1, 7), derive_seed(43, 1, 7))


class SceneTest(unittest.TestCase):
    def test_class_dims(self) -> None:
        dims = class_dims()
        self.assertEqual(dims["box"], (0.5, 0.5, 0.5))
        self.assertEqual(dims["chair"], (0.5, 0.5, 0.9))

    def test_acceptance_scene(self) -> None:
        scene = acceptance_scene()
        self.assertEqual(scene.name, "acceptance")
        self.assertEqual([o.class_id for o in scene.objects], ["box", "chair", "bag"])
        np.testing.assert_allclose(scene.target, [0.0, 0.0, 0.25])
        for obj in scene.objects:
            # Every object stands on the floor.
            self.assertAlmostEqual(obj.box.z_min, 0.0)

    def test_from_dict_defaults(self) -> None:
        scene = Scene.from_dict(
            {"objects": [{"class_id": "chair", "center": [1, 2, 0.45]}]}
        )
        np.testing.assert_array_equal(scene.objects[0].box.dims, [0.5, 0.5, 0.9])
        self.assertEqual(scene.objects[0].box.yaw, 0.0)
        np.testing.assert_allclose(scene.target, [1.0, 2.0, 0.45])
        self.assertEqual(scene.name, "scene")

    def test_roundtrip(self) -> None:
        scene = acceptance_scene()
        restored = Scene.from_dict(scene.to_dict())
        for a, b in zip(restored.objects, scene.objects):
            self.assertEqual(a.class_id, b.class_id)
            np.testing.assert_array_equal(a.box.center, b.box.center)
            np.testing.assert_array_equal(a.box.dims, b.box.dims)
            self.assertAlmostEqual(a.box.yaw, b.box.yaw, places=12)
        self.assertEqual(restored.name, scene.name)

    def test_from_yaml(self) -> None:
        scene = Scene.from_yaml(
            "name: tiny\n"
            "objects:\n"
            "  - class_id: box\n"
            "    center: [0, 0, 0.25]\n"
            "    dims: [1, 1, 0.5]\n"
        )
        self.assertEqual(scene.name, "tiny")
        np.testing.assert_array_equal(scene.objects[0].box.dims, [1.0, 1.0, 0.5])

    def test_invalid_scenes(self) -> None:
        bad = [
            {},
            {"objects": [{"center": [0, 0, 0]}]},
            {"objects": [{"class_id": "box"}]},
            {"objects": [{"class_id": "unicorn", "center": [0, 0, 0]}]},
            {"objects": [{"class_id": "box", "center": [0, 0]}]},
            {"objects": [{"class_id": "box", "center": [0, 0, 0], "dims": [1, 0, 1]}]},
        ]
        for d in bad:
            with self.subTest(d=d):
                with self.assertRaises(ConfigError):
                    Scene.from_dict(d)

    def test_ground_truth(self) -> None:
        scene = acceptance_scene()
        gt = scene.ground_truth([2, 0])
        self.assertEqual([c for c, _ in gt], ["bag", "box"])
        self.assertEqual(len(scene.ground_truth()), 3)


class TrajectoryTest(unittest.TestCase):
    def setUp(self) -> None:
        self.target = np.array([0.0, 0.0, 0.25])

    def test_parallel(self) -> None:
        spec = TrajectorySpec(scenario=Scenario.PARALLEL, speed=1.0, range=2.0)
        trajectory = make_trajectory(spec, self.target)
        self.assertEqual(len(trajectory), 61)
        for k, (ts, _) in enumerate(trajectory):
            self.assertAlmostEqual(ts, k / 30.0)
        positions = np.array([pose.translation for _, pose in trajectory])
        steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        np.testing.assert_allclose(steps, 1.0 / 30.0)
        np.testing.assert_allclose(positions[:, 2], 1.4)
        # Heading stays fixed on the initial line of sight.
        for _, pose in trajectory:
            self.assertAlmostEqual(pose.yaw, 0.0)

    def test_speed_scales_tick_count(self) -> None:
        for speed, expected in [(0.5, 121), (1.0, 61), (2.0, 31)]:
            with self.subTest(speed=speed):
                spec = TrajectorySpec(scenario=Scenario.PARALLEL, speed=speed)
                self.assertEqual(len(make_trajectory(spec, self.target)), expected)

    def test_track_target_settings(self) -> None:
        intr = depth_intrinsics()
        for track in [True, False]:
            with self.subTest(track_target=track):
                spec = TrajectorySpec(scenario=Scenario.PARALLEL, track_target=track)
                trajectory = make_trajectory(spec, self.target)
                headings = [pose.yaw for _, pose in trajectory]
                columns = [
                    project_points(
                        intr, transform_points(inverse_pose(pose), self.target)
                    )[0, 0]
                    for _, pose in trajectory
                ]
                if track:
                    np.testing.assert_allclose(columns, intr.cx, atol=1e-6)
                    self.assertGreater(max(headings) - min(headings), 0.5)
                else:
                    np.testing.assert_allclose(headings, headings[0], atol=1e-12)
                    self.assertGreater(max(columns) - min(columns), 100.0)

    def test_static(self) -> None:
        spec = TrajectorySpec(scenario=Scenario.STATIC, duration=1.0, fps=10.0)
        trajectory = make_trajectory(spec, self.target)
        self.assertEqual(len(trajectory), 11)
        first = trajectory[0][1]
        for _, pose in trajectory:
            self.assertTrue(pose.allclose(first))
        self.assertAlmostEqual(_horizontal(first.translation, self.target), 2.0)

    def test_away_close(self) -> None:
        spec = TrajectorySpec(scenario=Scenario.AWAY_CLOSE, speed=1.0, range=2.0)
        trajectory = make_trajectory(spec, self.target)
        distances = [_horizontal(p.translation, self.target) for _, p in trajectory]
        self.assertAlmostEqual(distances[0], 3.0)
        self.assertAlmostEqual(distances[-1], 1.0)
        self.assertTrue(all(a > b for a, b in zip(distances, distances[1:])))

        receding = dataclasses.replace(spec, approach=False)
        distances = [
            _horizontal(p.translation, self.target)
            for _, p in make_trajectory(receding, self.target)
        ]
        self.assertAlmostEqual(distances[0], 1.0)
        self.assertAlmostEqual(distances[-1], 3.0)

    def test_circling(self) -> None:
        spec = TrajectorySpec(scenario=Scenario.CIRCLING, speed=1.0, radius=1.5)
        trajectory = make_trajectory(spec, self.target)
        positions = np.array([pose.translation for _, pose in trajectory])
        for (_, pose), position in zip(trajectory, positions):
            self.assertAlmostEqual(_horizontal(position, self.target), 1.5)
            heading = math.atan2(-position[1], -position[0])
            error = math.remainder(pose.yaw - heading, 2 * math.pi)
            self.assertAlmostEqual(error, 0.0)
        steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        np.testing.assert_allclose(steps, 1.0 / 30.0)

    def test_explicit_target(self) -> None:
        spec = TrajectorySpec(scenario=Scenario.STATIC, target=(5.0, 0.0, 0.0))
        pose = make_trajectory(spec, self.target)[0][1]
        target = np.array([5.0, 0.0, 0.0])
        self.assertAlmostEqual(_horizontal(pose.translation, target), 2.0)

    def test_invalid(self) -> None:
        for kwargs in [
            {"speed": 0.0},
            {"range": -1.0},
            {"fps": 0.0},
            {"duration": 0.0},
        ]:
            with self.subTest(kwargs=kwargs):
                with self.assertRaises(ConfigError):
                    TrajectorySpec(**kwargs)
        for spec in [
            TrajectorySpec(scenario=Scenario.AWAY_CLOSE, range=3.5),
            TrajectorySpec(scenario=Scenario.CIRCLING, radius=20.0),
            TrajectorySpec(scenario=Scenario.CIRCLING, radius=0.5, speed=60.0),
        ]:
            with self.subTest(spec=spec):
                with self.assertRaises(ConfigError):
                    make_trajectory(spec, self.target)


class NoiseAndLatencyTest(unittest.TestCase):
    def test_noise_validation(self) -> None:
        for kwargs in [
            {"drop_prob": 1.5},
            {"depth_dropout": -0.1},
            {"bbox_jitter_px": -1.0},
            {"edge_dropout_band_px": -2},
        ]:
            with self.subTest(kwargs=kwargs):
                with self.assertRaises(ConfigError):
                    NoiseSpec(**kwargs)

    def test_latency_validation(self) -> None:
        with self.assertRaises(ConfigError):
            LatencySpec(fixed=-0.01)

    def test_delay_without_jitter(self) -> None:
        lat = LatencySpec(fixed=0.02, jitter=0.0, model_compute=0.013)
        self.assertAlmostEqual(delay(lat, 1.0, 7), 1.033)

    def test_delay_jitter_bounds(self) -> None:
        lat = LatencySpec(fixed=0.02, jitter=0.005, model_compute=0.013)
        arrivals = [delay(lat, 1.0, seed) for seed in range(200)]
        self.assertTrue(all(1.028 - 1e-12 <= a <= 1.038 + 1e-12 for a in arrivals))
        self.assertGreater(len(set(arrivals)), 1)
        self.assertEqual(delay(lat, 1.0, 3), delay(lat, 1.0, 3))

    def test_delay_never_precedes_send(self) -> None:
        lat = LatencySpec(fixed=0.0, jitter=0.01, model_compute=0.0)
        for seed in range(100):
            self.assertGreaterEqual(delay(lat, 2.0, seed), 2.0)


class RayCastTest(unittest.TestCase):
    def test_ray_box_hits(self) -> None:
        box = Box3D(center=np.array([0.0, 0.0, 0.25]), dims=np.full(3, 0.5))
        origin = np.array([-3.0, 0.0, 0.25])
        directions = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        hits = ray_box_hits(origin, directions, box)
        self.assertAlmostEqual(hits[0], _FRONT_DISTANCE)
        self.assertTrue(np.isinf(hits[1]))
        self.assertTrue(np.isinf(hits[2]))
        # A ray starting inside the box does not hit it.
        inside = ray_box_hits(box.center, directions, box)
        self.assertTrue(np.all(np.isinf(inside)))

    def test_render_clean(self) -> None:
        frame = render_depth(
            single_box_scene(), _front_pose(), depth_intrinsics(), NoiseSpec.zero(), 0
        )
        self.assertEqual(frame.depth.dtype, np.float32)
        self.assertAlmostEqual(float(frame.depth[180, 180]), _FRONT_DISTANCE, places=5)
        # No floor is rendered, so the image corners read missing.
        self.assertEqual(frame.depth[0, 0], 0.0)
        self.assertEqual(frame.depth[-1, -1], 0.0)

    def test_render_matches_face_intersection(self) -> None:
        scene, intr = acceptance_scene(), depth_intrinsics()
        pose = looking_at(scene.target, distance=2.5)
        frame = render_depth(scene, pose, intr, NoiseSpec.zero(), 0)
        rng = np.random.default_rng(3)
        flat = rng.choice(intr.width * intr.height, size=1000, replace=False)
        rows, cols = np.divmod(flat, intr.width)
        mismatched = 0
        for row, col in zip(rows, cols):
            ray = np.array([(col - intr.cx) / intr.fx, (row - intr.cy) / intr.fy, 1.0])
            expected = min(
                _face_hit(pose.translation, pose.rotation @ ray, obj.box)
                for obj in scene.objects
            )
            rendered = float(frame.depth[row, col])
            if math.isinf(expected):
                mismatched += rendered != 0.0
            elif rendered == 0.0:
                mismatched += 1
            else:
                self.assertAlmostEqual(rendered, expected, places=4)
        # Rays grazing a box edge may resolve either way.
        self.assertLessEqual(mismatched, 2)

    def test_render_deterministic(self) -> None:
        args = (acceptance_scene(), looking_at((0.0, 0.0, 0.25)), depth_intrinsics())
        a = render_depth(*args, NoiseSpec(), 11)
        b = render_depth(*args, NoiseSpec(), 11)
        c = render_depth(*args, NoiseSpec(), 12)
        np.testing.assert_array_equal(a.depth, b.depth)
        self.assertFalse(np.array_equal(a.depth, c.depth))

    def test_uniform_dropout_rate(self) -> None:
        scene, pose, intr = single_box_scene(), _front_pose(), depth_intrinsics()
        clean = render_depth(scene, pose, intr, NoiseSpec.zero(), 0)
        noise = dataclasses.replace(NoiseSpec.zero(), depth_dropout=0.5)
        noisy = render_depth(scene, pose, intr, noise, 5)
        hit = clean.depth > 0
        rate = float(np.mean(noisy.depth[hit] == 0))
        self.assertGreater(rate, 0.4)
        self.assertLess(rate, 0.6)

    def test_edge_dropout(self) -> None:
        scene, pose, intr = single_box_scene(), _front_pose(), depth_intrinsics()
        clean = render_depth(scene, pose, intr, NoiseSpec.zero(), 0)
        noise = dataclasses.replace(
            NoiseSpec.zero(), edge_dropout_band_px=2, edge_dropout_prob=1.0
        )
        noisy = render_depth(scene, pose, intr, noise, 5)
        self.assertLess(noisy.num_valid(), clean.num_valid())
        # The interior survives.
        self.assertEqual(noisy.depth[180, 180], clean.depth[180, 180])

    def test_silhouette_band(self) -> None:
        owner = np.full((7, 7), -1)
        owner[2:5, 2:5] = 0
        band = silhouette_band(owner, 1)
        self.assertTrue(band[2, 2])
        self.assertTrue(band[1, 2])
        self.assertFalse(band[3, 3])
        self.assertFalse(band[0, 0])
        self.assertFalse(band[0, 2])
        self.assertTrue(silhouette_band(owner, 2)[0, 2])


class OracleDetectTest(unittest.TestCase):
    def test_zero_noise_matches_projection(self) -> None:
        scene, pose, intr = single_box_scene(), _front_pose(), depth_intrinsics()
        boxes = oracle_detect2d(scene, pose, intr, NoiseSpec.zero(), 0)
        self.assertEqual(len(boxes), 1)
        expected = clip_box2d(project_box3d(scene.objects[0].box, pose, intr), intr)
        self.assertEqual(
            (boxes[0].u_min, boxes[0].v_min, boxes[0].u_max, boxes[0].v_max),
            (expected.u_min, expected.v_min, expected.u_max, expected.v_max),
        )
        self.assertEqual(boxes[0].class_id, "box")
        self.assertEqual(boxes[0].confidence, 1.0)

    def test_occluded_object_is_hidden(self) -> None:
        scene, pose, intr = _occluded_scene(), _front_pose(), depth_intrinsics()
        self.assertEqual(visible_objects(scene, pose, intr), [0])
        boxes = oracle_detect2d(scene, pose, intr, NoiseSpec.zero(), 0)
        self.assertEqual([b.class_id for b in boxes], ["box"])

    def test_behind_camera(self) -> None:
        away = gravity_aligned_pose((-3.0, 0.0, 0.25), heading=math.pi, tilt=0.0)
        box = single_box_scene().objects[0].box
        with self.assertLogs("edgelift.simkit", level="DEBUG") as logs:
            self.assertIsNone(project_box3d(box, away, depth_intrinsics()))
        self.assertIn("8 of 8 corners are behind the camera", logs.output[0])
        self.assertEqual(
            oracle_detect2d(
                single_box_scene(), away, depth_intrinsics(), NoiseSpec.zero(), 0
            ),
            [],
        )

    def test_drop_prob(self) -> None:
        scene, intr = acceptance_scene(), depth_intrinsics()
        pose = looking_at(scene.target)
        noise = dataclasses.replace(NoiseSpec.zero(), drop_prob=1.0)
        self.assertEqual(oracle_detect2d(scene, pose, intr, noise, 0), [])

    def test_jitter_is_seeded(self) -> None:
        scene, intr = acceptance_scene(), depth_intrinsics()
        pose = looking_at(scene.target)
        a = oracle_detect2d(scene, pose, intr, NoiseSpec(), 3)
        self.assertEqual(a, oracle_detect2d(scene, pose, intr, NoiseSpec(), 3))
        self.assertNotEqual(a, oracle_detect2d(scene, pose, intr, NoiseSpec(), 4))
        for box in a:
            self.assertLessEqual(box.confidence, 1.0)
            self.assertGreaterEqual(box.confidence, 0.8)
