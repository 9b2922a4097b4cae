import os
import shutil
import tempfile
import unittest

import numpy as np

from artigrasp import percept, pipeline
from artigrasp.config import EncoderConfig, PipelineConfig
from artigrasp.formats import read_jsonl, read_obj
from artigrasp.geom import GripperModel, Pose, rotation_to_6d
from artigrasp.pipeline import SgdfGrid
from artigrasp.scene import Camera, RenderedFrame, TargetMaps
from artigrasp.tests import helpers
from artigrasp.tests.helpers import SphereDecoder

GRIPPER = GripperModel()


def sphere_points(count, radius, seed=0):
    points = np.random.default_rng(seed).normal(size=(count, 3))
    return radius * points / np.linalg.norm(points, axis=1, keepdims=True)


def oracle_targets(size=16, peaks=((8, 8, (0.0, 0.0, 2.0)),), scale=0.5):
    maps = np.zeros((size, size, 44))
    for row, col, translation in peaks:
        maps[row, col, 0] = 1.0
        maps[row, col, 1:4] = translation
        maps[row, col, 4:10] = rotation_to_6d(np.eye(3))
        maps[row, col, 10] = scale
        maps[row, col, 43] = 0.5
    return TargetMaps.from_stacked(maps, maps[..., 0] > 0)


def blank_frame(size=16):
    return RenderedFrame(np.zeros((size, size)), np.zeros((size, size)), np.zeros((size, size), dtype=np.int64))


def sphere_depth(camera, centers, radius):
    """Depth map of spheres seen by a camera at the origin looking along +z."""
    rays = camera.pixel_rays().reshape(-1, 3)
    depth = np.full(len(rays), np.inf)
    a = np.sum(rays * rays, axis=1)
    for center in centers:
        center = np.asarray(center, dtype=float)
        b = -2.0 * rays @ center
        c = center @ center - radius * radius
        disc = b * b - 4.0 * a * c
        hit = disc >= 0.0
        t = np.full(len(rays), np.inf)
        t[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
        depth = np.minimum(depth, t)
    depth[~np.isfinite(depth)] = 0.0
    return depth.reshape(camera.height, camera.width)


class TestGrid(unittest.TestCase):

    def test_voxel_centers(self):
        centers = pipeline.voxel_centers(4, 1.0)
        self.assertEqual(centers.shape, (64, 3))
        np.testing.assert_allclose(centers[0], [-0.75, -0.75, -0.75])
        np.testing.assert_allclose(centers[1], [-0.75, -0.75, -0.25])
        np.testing.assert_allclose(centers[-1], [0.75, 0.75, 0.75])

    def test_decode_grid(self):
        grid = pipeline.decode_grid(SphereDecoder(), np.zeros(32), 0.5, resolution=8, batch_size=100)
        self.assertEqual(grid.sdf.shape, (8, 8, 8))
        self.assertEqual(grid.cp.shape, (8, 8, 8, 5, 3))
        self.assertAlmostEqual(grid.voxel_size, 0.275)
        self.assertAlmostEqual(grid.origin, -1.1 + 0.1375)
        center = grid.centers()[8 * 8 * 3 + 8 * 4 + 5]
        np.testing.assert_allclose(grid.cp[3, 4, 5, 0], center)
        self.assertAlmostEqual(grid.distance()[3, 4, 5], max(-0.099, min(0.099, np.linalg.norm(center) - 0.5)))

    def test_decode_grid_errors(self):
        self.assertRaises(ValueError, pipeline.decode_grid, None, np.zeros(32), 0.5)
        self.assertRaises(ValueError, pipeline.decode_grid, SphereDecoder(), np.zeros(32), 0.5, 4)
        self.assertRaises(ValueError, pipeline.decode_grid, SphereDecoder(), np.zeros(32), 1.5, 8)

    def test_non_finite(self):
        decoder = SphereDecoder()
        decoder.decode = lambda z_s, z_j, x: (np.full(len(x), np.nan), np.zeros((len(x), 5, 3)))
        self.assertRaises(FloatingPointError, pipeline.decode_grid, decoder, np.zeros(32), 0.5, 8)


class TestMarchingCubes(unittest.TestCase):

    def setUp(self):
        self.spacing = 2.2 / 48
        self.origin = -1.1 + 0.5 * self.spacing
        self.vertices, self.faces = pipeline.marching_cubes(helpers.sphere_grid(), 0.0, self.spacing, self.origin)

    def test_vertices_on_sphere(self):
        self.assertGreater(len(self.faces), 100)
        radii = np.linalg.norm(self.vertices, axis=1)
        self.assertLess(np.max(np.abs(radii - 0.5)), 1.5 * np.sqrt(3.0) * self.spacing)

    def test_closed(self):
        edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        _, counts = np.unique(np.sort(edges, axis=1), axis=0, return_counts=True)
        self.assertTrue(np.all(counts == 2))

    def test_outward(self):
        v0, v1, v2 = (self.vertices[self.faces[:, i]] for i in range(3))
        normals = np.cross(v1 - v0, v2 - v0)
        outward = np.einsum("ij,ij->i", normals, (v0 + v1 + v2) / 3.0)
        self.assertGreater(np.mean(outward > 0.0), 0.99)

    def test_empty_and_invalid(self):
        vertices, faces = pipeline.marching_cubes(np.full((6, 6, 6), 0.3))
        self.assertEqual(len(vertices), 0)
        self.assertEqual(faces.shape, (0, 3))
        self.assertRaises(ValueError, pipeline.marching_cubes, np.zeros((6, 6)))
        self.assertRaises(ValueError, pipeline.marching_cubes, np.zeros((6, 1, 6)))

    def test_mesh_grid(self):
        distance = helpers.sphere_grid(32)
        grid = SgdfGrid(32, distance / 0.5, np.zeros((32, 32, 32, 5, 3)), 0.5)
        vertices, _ = pipeline.mesh_grid(grid)
        radii = np.linalg.norm(vertices, axis=1)
        self.assertLess(np.max(np.abs(radii - 0.5)), 1.5 * np.sqrt(3.0) * grid.voxel_size)


class TestExtractGrasps(unittest.TestCase):

    def setUp(self):
        self.grid = pipeline.decode_grid(SphereDecoder(), np.zeros(32), 0.5, resolution=24)

    def test_scores_in_band(self):
        extraction = pipeline.extract_grasps(self.grid, 0.025)
        scores = [score for _, score in extraction.grasps]
        self.assertTrue(scores)
        self.assertTrue(all(score < 0.025 for score in scores))
        self.assertEqual(scores, sorted(scores))
        for pose, _ in extraction.grasps:
            self.assertLess(abs(np.linalg.norm(pose.translation) - 0.5), 0.025 + 1e-9)
            np.testing.assert_allclose(pose.matrix, np.eye(3), atol=1e-9)

    def test_epsilon_monotone(self):
        counts = [len(pipeline.extract_grasps(self.grid, eps).grasps) for eps in (0.005, 0.01, 0.025, 0.05)]
        self.assertEqual(counts, sorted(counts))
        self.assertRaises(ValueError, pipeline.extract_grasps, self.grid, 0.0)

    def test_duplicates_dropped(self):
        grid = SgdfGrid(8, np.zeros((8, 8, 8)), np.broadcast_to(GRIPPER.control_points, (8, 8, 8, 5, 3)).copy(), 0.1)
        extraction = pipeline.extract_grasps(grid, 0.01)
        self.assertEqual(extraction.candidates, 512)
        self.assertEqual(len(extraction.grasps), 1)

    def test_degenerate_counted(self):
        cp = self.grid.cp.copy()
        cp[...] = 0.0
        grid = SgdfGrid(self.grid.resolution, self.grid.sdf, cp, self.grid.delta)
        with self.assertLogs("artigrasp.pipeline", "WARNING"):
            extraction = pipeline.extract_grasps(grid, 0.025)
        self.assertEqual(extraction.grasps, [])
        self.assertEqual(extraction.degenerate, extraction.candidates)
        self.assertGreater(extraction.degenerate, 0)


class TestIcp(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        self.blob = rng.normal(size=(600, 3)) * [0.3, 0.2, 0.1]
        self.pose = Pose.from_axis_angle([0.0, 1.0, 0.0], 0.3, [0.1, 0.0, 1.5])

    def test_exact_fit_is_fixed_point(self):
        surface = sphere_points(500, 0.3)
        result = pipeline.icp_refine(self.pose, surface, self.pose.apply(surface))
        self.assertEqual(result.status, pipeline.CONVERGED)
        np.testing.assert_allclose(result.pose.homogeneous(), self.pose.homogeneous(), atol=1e-9)
        self.assertAlmostEqual(result.rmse, 0.0)

    def test_recovers_shift(self):
        observed = self.pose.apply(self.blob) + [0.01, 0.0, 0.0]
        result = pipeline.icp_refine(self.pose, self.blob, observed)
        self.assertEqual(result.status, pipeline.CONVERGED)
        np.testing.assert_allclose(result.pose.translation, self.pose.translation + [0.01, 0.0, 0.0], atol=1e-3)
        self.assertLess(result.rmse, 1e-3)
        self.assertEqual(result.points, 600)

    def test_iteration_cap(self):
        observed = self.pose.apply(self.blob) + [0.01, 0.0, 0.0]
        result = pipeline.icp_refine(self.pose, self.blob, observed, iterations=1)
        self.assertEqual(result.status, pipeline.ITERATION_CAP)
        self.assertEqual(result.iterations, 1)

    def test_too_few_points(self):
        result = pipeline.icp_refine(self.pose, self.blob, self.blob[:10])
        self.assertEqual(result.status, pipeline.TOO_FEW_POINTS)
        self.assertFalse(result.refined)
        self.assertIs(result.pose, self.pose)

    def test_kabsch(self):
        moved = self.pose.apply(self.blob)
        np.testing.assert_allclose(pipeline.kabsch(self.blob, moved).homogeneous(), self.pose.homogeneous(),
                                   atol=1e-9)


class TestObservedPoints(unittest.TestCase):

    def setUp(self):
        self.camera = Camera.from_fov(64, 64, 60.0, Pose.identity())
        self.left = np.array([-0.1, 0.0, 1.0])
        self.right = np.array([0.1, 0.0, 1.0])
        self.depth = sphere_depth(self.camera, [self.left, self.right], 0.1)

    def test_region(self):
        depth = np.zeros((16, 16))
        depth[2:5, 2:5] = 1.0
        depth[10:12, 10:12] = 2.0
        region = pipeline.detection_region(depth, (3, 3))
        self.assertEqual(int(region.sum()), 9)
        self.assertFalse(region[10, 10])
        self.assertIsNone(pipeline.detection_region(depth, (8, 8)))

    def test_neighbour_excluded(self):
        pose = Pose(translation=self.left)
        everything = pipeline.observed_points(self.depth, self.camera, pose, 0.12)
        own = pipeline.observed_points(self.depth, self.camera, pose, 0.12, others=[self.right])
        self.assertTrue(np.any(np.linalg.norm(everything - self.left, axis=1) > 0.1 + 1e-3))
        np.testing.assert_allclose(np.linalg.norm(own - self.left, axis=1), 0.1, atol=1e-9)
        self.assertGreater(len(own), 50)

    def test_icp_keeps_adjacent_objects_apart(self):
        peaks = ((32, 26, tuple(self.left)), (32, 37, tuple(self.right)))
        frame = RenderedFrame(self.depth, np.zeros_like(self.depth), np.zeros(self.depth.shape, dtype=np.int64))
        recons = pipeline.reconstruct_scene(frame, self.camera, SphereDecoder(),
                                            targets=oracle_targets(64, peaks, scale=0.2),
                                            config=PipelineConfig(resolution=32), icp=True)
        self.assertEqual(len(recons), 2)
        for recon, center in zip(recons, (self.left, self.right)):
            self.assertTrue(recon.icp.refined)
            np.testing.assert_allclose(recon.pose.translation, center, atol=5e-3)


class TestReconstruction(unittest.TestCase):

    def setUp(self):
        self.camera = Camera.from_fov(16, 16, 60.0, Pose.identity())
        self.config = PipelineConfig(resolution=16)

    def test_to_camera(self):
        detection = Pose.from_axis_angle([0.0, 0.0, 1.0], np.pi / 2, [0.0, 0.0, 2.0])
        grasp = pipeline.to_camera(detection, 0.5, Pose(translation=[0.4, 0.0, 0.0]))
        np.testing.assert_allclose(grasp.translation, [0.0, 0.2, 2.0], atol=1e-12)
        np.testing.assert_allclose(grasp.matrix, detection.matrix)

    def test_oracle_reconstruction(self):
        (recon,) = pipeline.reconstruct_scene(blank_frame(), self.camera, SphereDecoder(),
                                              targets=oracle_targets(), config=self.config)
        center = np.array([0.0, 0.0, 2.0])
        self.assertEqual(recon.index, 0)
        self.assertIsNone(recon.icp)
        radii = np.linalg.norm(recon.vertices - center, axis=1)
        self.assertLess(np.max(np.abs(radii - 0.25)), 0.5 * 1.5 * np.sqrt(3.0) * 2.2 / 16)
        self.assertTrue(recon.grasps)
        for pose, score in recon.grasps:
            self.assertLess(abs(np.linalg.norm(pose.translation - center) - 0.25), 0.5 * 0.025 + 1e-9)
        self.assertEqual(recon.best_grasp()[1], min(score for _, score in recon.grasps))
        self.assertEqual(len(recon.canonical_grasps), len(recon.grasps))

    def test_no_detections(self):
        targets = oracle_targets(peaks=())
        self.assertEqual(pipeline.reconstruct_scene(blank_frame(), self.camera, SphereDecoder(),
                                                    targets=targets, config=self.config), [])

    def test_needs_inputs(self):
        self.assertRaises(ValueError, pipeline.reconstruct_scene, blank_frame(), self.camera, None,
                          targets=oracle_targets())
        self.assertRaises(ValueError, pipeline.reconstruct_scene, blank_frame(), self.camera, SphereDecoder())

    def test_failure_names_detection(self):
        with self.assertRaises(pipeline.ReconstructionError) as context:
            pipeline.reconstruct_scene(blank_frame(), self.camera, SphereDecoder(fail=True),
                                       targets=oracle_targets(), config=self.config)
        self.assertEqual(context.exception.index, 0)
        self.assertIsInstance(context.exception.error, ArithmeticError)

    def test_workers_match_serial(self):
        targets = oracle_targets(peaks=((3, 3, (-0.5, 0.0, 2.0)), (12, 12, (0.5, 0.0, 2.0))))
        serial = pipeline.reconstruct_scene(blank_frame(), self.camera, SphereDecoder(), targets=targets,
                                            config=self.config, workers=1)
        threaded = pipeline.reconstruct_scene(blank_frame(), self.camera, SphereDecoder(), targets=targets,
                                              config=self.config, workers=2)
        self.assertEqual([r.index for r in threaded], [0, 1])
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.vertices, b.vertices)
            self.assertEqual(len(a.grasps), len(b.grasps))

    def test_icp_without_depth_points(self):
        with self.assertLogs("artigrasp.pipeline", "WARNING"):
            (recon,) = pipeline.reconstruct_scene(blank_frame(), self.camera, SphereDecoder(),
                                                  targets=oracle_targets(), config=self.config, icp=True)
        self.assertEqual(recon.icp.status, pipeline.TOO_FEW_POINTS)
        np.testing.assert_allclose(recon.pose.translation, [0.0, 0.0, 2.0])

    def test_icp_needs_depth(self):
        detection = percept.extract_detections(oracle_targets().stacked(), [(8, 8)])[0]
        self.assertRaises(ValueError, pipeline.reconstruct_object, 0, detection, SphereDecoder(), self.config,
                          None, None, True)

    def test_threshold_from_encoder_config(self):
        targets = oracle_targets()
        targets.heat[8, 8] = 0.5
        found = pipeline.reconstruct_scene(blank_frame(), self.camera, SphereDecoder(), targets=targets,
                                           config=self.config, encoder_config=EncoderConfig(threshold=0.6))
        self.assertEqual(found, [])

    def test_save(self):
        (recon,) = pipeline.reconstruct_scene(blank_frame(), self.camera, SphereDecoder(),
                                              targets=oracle_targets(), config=self.config)
        directory = tempfile.mkdtemp()
        try:
            written = pipeline.save_reconstructions(directory, [recon])
            self.assertEqual([os.path.basename(p) for p in written], ["object_0.obj", "grasps.jsonl"])
            vertices, faces = read_obj(written[0])
            self.assertEqual(len(faces), len(recon.faces))
            records = read_jsonl(written[1])
            self.assertEqual(len(records), len(recon.grasps))
            self.assertEqual(records[0]["object_index"], 0)
            self.assertEqual(len(records[0]["pose"]), 7)
        finally:
            shutil.rmtree(directory)


if __name__ == "__main__":
    unittest.main()
