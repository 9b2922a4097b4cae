import os
import shutil
import tempfile
import unittest

import numpy as np

from artigrasp import artobj, scene
from artigrasp.config import NoiseConfig, SceneConfig
from artigrasp.geom import Pose, inverse

SMALL = SceneConfig(width=48, height=48, cameras=2, single_object=True)

_cache = {}


def corpus():
    if "corpus" not in _cache:
        _cache["corpus"] = artobj.generate_corpus(10, 0)
    return _cache["corpus"]


def codes():
    return dict((obj.id, np.full(scene.CODE_DIM, 0.01 * i)) for i, obj in enumerate(corpus()))


def single_view():
    """A one-object scene with a camera aimed at it, rendered at 48x48."""
    if "view" not in _cache:
        objects = corpus()
        spec = scene.generate_scene(objects, SMALL, seed=3, scene_id="scene_0003")
        camera = scene.random_camera(spec, objects, SMALL, np.random.default_rng(0))
        by_id = artobj.corpus_by_id(objects)
        frame = scene.render(spec, camera, by_id, SMALL)
        _cache["view"] = (spec, camera, frame)
    return _cache["view"]


class TestCamera(unittest.TestCase):

    def test_from_fov(self):
        camera = scene.Camera.from_fov(64, 48, 90.0, Pose.identity())
        self.assertAlmostEqual(camera.fx, 32.0)
        self.assertEqual((camera.cx, camera.cy), (32.0, 24.0))
        rays = camera.pixel_rays()
        self.assertEqual(rays.shape, (48, 64, 3))
        np.testing.assert_allclose(rays[24, 32], [0.5 / 32.0, 0.5 / 32.0, 1.0])

    def test_invalid(self):
        self.assertRaises(ValueError, scene.Camera, 0.0, 10.0, 5.0, 5.0, 10, 10, Pose.identity())
        self.assertRaises(ValueError, scene.Camera, 10.0, 10.0, 50.0, 5.0, 10, 10, Pose.identity())

    def test_project_inverts_backproject(self):
        camera = scene.Camera.from_fov(20, 10, 60.0, Pose.identity())
        depth = np.zeros((10, 20))
        depth[3, 7] = 1.5
        depth[9, 0] = 0.4
        points, rows, cols = scene.backproject(depth, camera)
        np.testing.assert_array_equal(rows, [3, 9])
        np.testing.assert_array_equal(cols, [7, 0])
        np.testing.assert_allclose(points[:, 2], [1.5, 0.4])
        np.testing.assert_allclose(camera.project(points), [[3.0, 7.0], [9.0, 0.0]], atol=1e-12)

    def test_backproject_selected_pixels(self):
        camera = scene.Camera.from_fov(4, 4, 60.0, Pose.identity())
        depth = np.ones((4, 4))
        depth[0, 0] = 0.0
        points, rows, cols = scene.backproject(depth, camera, (np.array([0, 1]), np.array([0, 1])))
        self.assertEqual(len(points), 1)
        self.assertEqual((rows[0], cols[0]), (1, 1))

    def test_look_at(self):
        pose = scene.look_at([2.0, 0.0, 1.0], [0.0, 0.0, 1.0])
        np.testing.assert_allclose(pose.apply([0.0, 0.0, 1.0]), [0.0, 0.0, 2.0], atol=1e-12)
        # world up is image up, so it maps to -y
        self.assertLess(pose.apply_vector([0.0, 0.0, 1.0])[1], 0.0)
        self.assertRaises(ValueError, scene.look_at, [0.0, 0.0, 2.0], [0.0, 0.0, 0.0])

    def test_roundtrip(self):
        camera = scene.Camera.from_fov(32, 24, 55.0, scene.look_at([1.0, 2.0, 1.0], [0.0, 0.0, 0.5]))
        again = scene.Camera.from_dict(camera.to_dict())
        self.assertEqual(again.to_dict(), camera.to_dict())
        np.testing.assert_allclose(again.origin, [1.0, 2.0, 1.0], atol=1e-12)


class TestPlacement(unittest.TestCase):

    def test_objects_stand_on_floor(self):
        objects = corpus()
        by_id = artobj.corpus_by_id(objects)
        for seed in range(3):
            spec = scene.generate_scene(objects, SceneConfig(), seed=seed)
            self.assertTrue(1 <= len(spec.objects) <= 3)
            for placed in spec.objects:
                obj = by_id[placed.object_id]
                corners = np.concatenate([box.corners() for box in obj.base_parts])
                self.assertAlmostEqual(placed.pose.apply(corners)[:, 2].min(), 0.0)
                self.assertIn(placed.q, artobj.joint_state_set(obj, 8))

    def test_clearance(self):
        objects = corpus()
        by_id = artobj.corpus_by_id(objects)
        config = SceneConfig(min_objects=3, max_objects=3)
        spec = scene.generate_scene(objects, config, seed=1)
        for i, a in enumerate(spec.objects):
            for b in spec.objects[i + 1:]:
                gap = scene._clearance(by_id[a.object_id], a.pose, a.q, by_id[b.object_id], b.pose, b.q)
                self.assertGreaterEqual(gap, config.clearance)

    def test_deterministic(self):
        a = scene.generate_scene(corpus(), SceneConfig(), seed=7)
        b = scene.generate_scene(corpus(), SceneConfig(), seed=7)
        self.assertEqual(a.to_dict(), b.to_dict())
        self.assertEqual(scene.SceneSpec.from_dict(a.to_dict()).to_dict(), a.to_dict())

    def test_single_object(self):
        spec = scene.generate_scene(corpus(), SMALL, seed=0)
        self.assertEqual(len(spec.objects), 1)

    def test_empty_corpus(self):
        self.assertRaises(ValueError, scene.generate_scene, [], SMALL)


class TestGeometry(unittest.TestCase):

    def test_environment_for_single_object(self):
        spec, _, _ = single_view()
        geometry = scene.SceneGeometry(spec, artobj.corpus_by_id(corpus()))
        environment = geometry.environment_for(0)
        world = np.array([[0.1, 0.2, 0.7], [0.0, 0.0, 0.05]])
        local = inverse(spec.objects[0].pose).apply(world)
        np.testing.assert_allclose(environment(local), [0.7, 0.05], atol=1e-12)

    def test_sdf_matches_exact_near_objects(self):
        spec, _, _ = single_view()
        geometry = scene.SceneGeometry(spec, artobj.corpus_by_id(corpus()))
        center = geometry.entries[0][3]
        points = center + np.random.default_rng(0).uniform(-0.1, 0.1, size=(50, 3))
        distance, owner = geometry.sdf(points)
        np.testing.assert_allclose(distance, geometry.exact_sdf(points))
        np.testing.assert_array_equal(owner, 0)

    def test_sphere_bound_is_lower_bound(self):
        spec, _, _ = single_view()
        geometry = scene.SceneGeometry(spec, artobj.corpus_by_id(corpus()))
        points = np.random.default_rng(1).uniform(-3.0, 3.0, size=(200, 3))
        distance, _ = geometry.sdf(points)
        self.assertTrue(np.all(distance <= geometry.exact_sdf(points) + 1e-12))


class TestRender(unittest.TestCase):

    def setUp(self):
        self.spec, self.camera, self.frame = single_view()

    def test_mask_matches_depth(self):
        frame = self.frame
        self.assertEqual(frame.depth.shape, (48, 48))
        self.assertTrue(np.any(frame.mask > 0))
        np.testing.assert_array_equal(frame.mask > 0, frame.depth > 0)
        self.assertTrue(set(np.unique(frame.mask)) <= {0, 1})
        self.assertTrue(np.all((frame.shaded >= 0.0) & (frame.shaded <= 1.0)))

    def test_hits_lie_on_surface(self):
        geometry = scene.SceneGeometry(self.spec, artobj.corpus_by_id(corpus()))
        points, _, _ = scene.backproject(self.frame.depth, self.camera)
        world = self.camera.world_from_camera.apply(points)
        self.assertLess(np.max(np.abs(geometry.exact_sdf(world))), 1e-3)

    def test_empty_scene(self):
        empty = scene.SceneSpec("empty", (), 3.0, 2.5)
        frame = scene.render(empty, self.camera, {}, SMALL)
        self.assertFalse(np.any(frame.depth))
        self.assertFalse(np.any(frame.mask))


class TestNoise(unittest.TestCase):

    def test_keeps_invalid_pixels(self):
        depth = np.full((50, 50), 2.0)
        depth[:10] = 0.0
        noisy = scene.add_depth_noise(depth, NoiseConfig(), seed=0)
        np.testing.assert_array_equal(noisy[:10], 0.0)
        sigma = 0.002 + 0.003 * 4.0
        self.assertAlmostEqual(np.std(noisy[10:] - 2.0), sigma, delta=0.1 * sigma)

    def test_seeded(self):
        depth = np.full((8, 8), 1.0)
        np.testing.assert_array_equal(scene.add_depth_noise(depth, seed=4), scene.add_depth_noise(depth, seed=4))
        self.assertFalse(np.array_equal(scene.add_depth_noise(depth, seed=4), scene.add_depth_noise(depth, seed=5)))

    def test_grazing_dropout(self):
        depth = np.full((8, 8), 1.0)
        incidence = np.zeros((8, 8))
        incidence[:, 4:] = 1.0
        noisy = scene.add_depth_noise(depth, NoiseConfig(dropout=1.0), seed=0, incidence=incidence)
        np.testing.assert_array_equal(noisy[:, :4], 0.0)
        self.assertTrue(np.all(noisy[:, 4:] > 0.0))


class TestTargets(unittest.TestCase):

    def setUp(self):
        self.spec, self.camera, self.frame = single_view()
        self.by_id = artobj.corpus_by_id(corpus())
        self.codes = codes()
        self.targets = scene.make_target_maps(self.spec, self.camera, self.frame, self.codes, self.by_id, SMALL)

    def test_designated_center(self):
        rows, cols = np.mgrid[2:5, 3:6]
        self.assertEqual(scene.designated_center(rows.ravel().astype(float), cols.ravel().astype(float)), (3, 4))
        self.assertEqual(scene.designated_center(np.array([1.0, 0.0]), np.array([0.0, 1.0])), (0, 1))

    def test_heat_peaks_at_centers(self):
        t = self.targets
        self.assertEqual(len(t.centers), 1)
        row, col, k = t.centers[0]
        self.assertEqual(k, 0)
        self.assertEqual(t.heat[row, col], 1.0)
        self.assertTrue(self.frame.mask[row, col] > 0)
        self.assertLessEqual(t.heat.max(), 1.0)

    def test_object_maps(self):
        t = self.targets
        placed = self.spec.objects[0]
        obj = self.by_id[placed.object_id]
        pixels = self.frame.mask == 1
        np.testing.assert_array_equal(t.supervision, self.frame.mask > 0)
        np.testing.assert_allclose(t.pose[pixels], np.tile(scene.object_pose10(obj, placed, self.camera),
                                                           (pixels.sum(), 1)))
        np.testing.assert_allclose(t.shape[pixels][0], self.codes[obj.id])
        np.testing.assert_allclose(t.joint[pixels], artobj.normalize_joint(placed.q, obj.joint))
        np.testing.assert_array_equal(t.pose[~pixels], 0.0)
        self.assertEqual(t.stacked().shape, (48, 48, scene.CHANNELS))

    def test_pose_scale_channel(self):
        placed = self.spec.objects[0]
        obj = self.by_id[placed.object_id]
        pose10 = scene.object_pose10(obj, placed, self.camera)
        self.assertAlmostEqual(pose10[9], 1.0 / obj.canonical_scale)
        expected = self.camera.camera_from_world.apply(placed.pose.translation)
        np.testing.assert_allclose(pose10[:3], expected, atol=1e-12)

    def test_hidden_object_gets_no_targets(self):
        blank = scene.RenderedFrame(np.zeros((48, 48)), np.zeros((48, 48)), np.zeros((48, 48), dtype=np.int64))
        with self.assertLogs("artigrasp.scene", "WARNING"):
            targets = scene.make_target_maps(self.spec, self.camera, blank, self.codes, self.by_id, SMALL)
        self.assertEqual(targets.centers, [])
        self.assertFalse(np.any(targets.heat))


class TestFrameIO(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_render_views_and_roundtrip(self):
        objects = corpus()
        spec = scene.generate_scene(objects, SMALL, seed=3, scene_id="scene_0003")
        views = scene.render_views(spec, objects, codes(), SMALL, NoiseConfig(), seed=11)
        self.assertEqual(len(views), SMALL.cameras)
        again = scene.render_views(spec, objects, codes(), SMALL, NoiseConfig(), seed=11)
        np.testing.assert_array_equal(views[1][1].noisy_depth, again[1][1].noisy_depth)

        for c, (camera, frame, targets) in enumerate(views):
            scene.save_frame(os.path.join(self.directory, spec.id, "view_%d" % c), spec, camera, frame, targets)
        paths = scene.list_frames(self.directory)
        self.assertEqual([os.path.basename(p) for p in paths], ["view_0", "view_1"])

        record = scene.load_frame(paths[0])
        camera, frame, targets = views[0]
        self.assertEqual(record.scene.to_dict(), spec.to_dict())
        self.assertEqual(record.camera.to_dict(), camera.to_dict())
        np.testing.assert_array_equal(record.frame.mask, frame.mask)
        np.testing.assert_allclose(record.frame.depth, frame.depth, atol=1e-6)
        np.testing.assert_allclose(record.frame.noisy_depth, frame.noisy_depth, atol=1e-6)
        np.testing.assert_allclose(record.targets.heat, targets.heat, atol=1e-6)
        self.assertEqual(record.targets.centers, [tuple(c) for c in targets.centers])


if __name__ == "__main__":
    unittest.main()
