"""
Full inference: detections, dense SGDF decode, meshes and grasps in the
camera frame.

Each detection carries a camera-frame pose of its object's canonical frame
and a scale in meters per canonical unit. A canonical point ``x`` maps to the
camera frame as ``pose.apply(scale * x)``.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from artigrasp import percept
from artigrasp.config import EncoderConfig, PipelineConfig
from artigrasp.formats import ensure_dir, write_jsonl, write_obj
from artigrasp.geom import DegenerateControlPoints, Pose, compose, pose_from_control_points
from artigrasp.scene import backproject

logger = logging.getLogger(__name__)

BOUND = 1.1

TOO_FEW_POINTS = "too_few_points"
ITERATION_CAP = "iteration_cap"
CONVERGED = "converged"


class ReconstructionError(RuntimeError):
    """A stage failed for one detection."""

    def __init__(self, index, error):
        RuntimeError.__init__(self, "detection %d: %s: %s" % (index, type(error).__name__, error))
        self.index = index
        self.error = error


@dataclass
class SgdfGrid:
    """Decoder outputs at the voxel centers of ``[-bound, bound]^3``.

    ``sdf`` is the raw prediction in (-1, 1); multiply by ``delta`` for
    canonical units. Arrays are indexed ``[i, j, k]`` along x, y, z.
    """

    resolution: int
    sdf: np.ndarray
    cp: np.ndarray
    delta: float
    bound: float = BOUND

    @property
    def voxel_size(self):
        return 2.0 * self.bound / self.resolution

    @property
    def origin(self):
        return -self.bound + 0.5 * self.voxel_size

    def centers(self):
        return voxel_centers(self.resolution, self.bound)

    def distance(self):
        """Predicted signed distance in canonical units."""
        return self.sdf * self.delta


def voxel_centers(resolution, bound=BOUND):
    """``(resolution^3, 3)`` centers ``-bound + (i + 0.5) * 2 * bound / resolution``."""
    axis = -bound + (np.arange(resolution) + 0.5) * (2.0 * bound / resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


def decode_grid(decoder, z_s, z_j, resolution=48, batch_size=32768):
    """Eval-mode decode of every voxel center.

    Args:
        decoder (artigrasp.sgdf.DecoderModel): Trained decoder
        z_s (numpy.ndarray): Shape code
        z_j (float): Joint code in [0, 1]
        resolution (int): Voxels per axis, at least 8

    Returns:
        SgdfGrid: The decoded grid

    Raises:
        ValueError: No decoder, bad resolution or ``z_j`` outside [0, 1]
    """
    if decoder is None:
        raise ValueError("decode_grid needs a trained decoder")
    if resolution < 8:
        raise ValueError("grid resolution must be >= 8, got %r" % resolution)
    if not 0.0 <= z_j <= 1.0:
        raise ValueError("joint code must lie in [0, 1], got %r" % z_j)

    centers = voxel_centers(resolution)
    sdf = np.empty(len(centers))
    cp = np.empty((len(centers), 5, 3))
    for start in range(0, len(centers), batch_size):
        stop = start + batch_size
        sdf[start:stop], cp[start:stop] = decoder.decode(z_s, z_j, centers[start:stop])
    if not (np.all(np.isfinite(sdf)) and np.all(np.isfinite(cp))):
        raise FloatingPointError("decoder produced non-finite values")
    shape = (resolution,) * 3
    return SgdfGrid(resolution, sdf.reshape(shape), cp.reshape(shape + (5, 3)), decoder.delta)


def marching_cubes(values, iso=0.0, spacing=1.0, origin=0.0):
    """Iso-surface of a scalar grid, oriented with normals toward increasing
    values (outward for signed distances).

    An iso value outside the data range gives an empty mesh.

    >>> import numpy as np
    >>> from artigrasp.pipeline import marching_cubes
    >>> vertices, faces = marching_cubes(np.ones((4, 4, 4)))
    >>> vertices.shape, faces.shape
    ((0, 3), (0, 3))

    Args:
        values (numpy.ndarray): ``(nx, ny, nz)`` samples, at least 2 per axis
        iso (float): Iso value
        spacing (float): Distance between samples
        origin (float): Coordinate of sample ``[0, 0, 0]`` on every axis

    Returns:
        tuple: ``(vertices (V, 3), faces (F, 3))``
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError("marching cubes needs a 3D grid with >= 2 samples per axis, got %r" % (values.shape,))
    empty = np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    if not values.min() < iso < values.max():
        return empty

    vertices, faces, _, _ = measure.marching_cubes(values, level=iso, spacing=(spacing,) * 3,
                                                   allow_degenerate=False)
    if len(faces) == 0:
        return empty
    faces = faces.astype(np.int64)

    gradient = np.stack(np.gradient(values, spacing), axis=-1)
    centroids = vertices[faces].mean(axis=1)
    index = np.clip(np.round(centroids / spacing).astype(np.int64), 0, np.array(values.shape) - 1)
    outward = gradient[index[:, 0], index[:, 1], index[:, 2]]
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    normals = np.cross(v1 - v0, v2 - v0)
    if np.sum(np.einsum("ij,ij->i", normals, outward)) < 0.0:
        faces = faces[:, ::-1].copy()
    return vertices + origin, faces


def mesh_grid(grid):
    """Zero iso-surface of a decoded grid in canonical coordinates."""
    return marching_cubes(grid.distance(), 0.0, grid.voxel_size, grid.origin)


@dataclass
class GraspExtraction:
    """Canonical-frame grasps, best score first, and how many candidate
    voxels had degenerate control points."""

    grasps: list
    degenerate: int = 0
    candidates: int = 0


def extract_grasps(grid, epsilon, dedup_distance=0.02, dedup_angle_deg=10.0):
    """Grasps at voxels on the predicted zero iso-surface.

    Voxels with ``|sdf * delta| < epsilon`` are visited best score first (ties
    in voxel order). Their predicted control points become a pose whose
    translation is the palm point. A grasp closer than ``dedup_distance`` and
    ``dedup_angle_deg`` to an already kept one is dropped.

    Args:
        grid (SgdfGrid): Decoded grid
        epsilon (float): Iso band half width in canonical units

    Returns:
        GraspExtraction: ``grasps`` as ``(Pose, score)`` pairs

    Raises:
        ValueError: ``epsilon`` <= 0
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0, got %r" % epsilon)

    scores = np.abs(grid.distance()).ravel()
    candidates = np.flatnonzero(scores < epsilon)
    candidates = candidates[np.argsort(scores[candidates], kind="stable")]
    cps = grid.cp.reshape(-1, 5, 3)
    cos_limit = np.cos(np.radians(dedup_angle_deg))

    grasps, kept_t, kept_r = [], [], []
    degenerate = 0
    for index in candidates:
        try:
            pose = pose_from_control_points(cps[index])
        except DegenerateControlPoints:
            degenerate += 1
            continue
        if kept_t:
            near = np.linalg.norm(np.array(kept_t) - pose.translation, axis=1) < dedup_distance
            if np.any(near):
                rotations = np.array(kept_r)[near]
                # cos of the relative angle from the trace of R_a^T R_b
                cos = (np.einsum("nij,ij->n", rotations, pose.matrix) - 1.0) / 2.0
                if np.any(cos > cos_limit):
                    continue
        grasps.append((pose, float(scores[index])))
        kept_t.append(pose.translation)
        kept_r.append(pose.matrix)

    if degenerate:
        logger.warning("skipped %d voxel(s) with degenerate control points", degenerate)
    return GraspExtraction(grasps, degenerate, len(candidates))


def kabsch(source, target):
    """Rigid transform minimizing ``sum |R s + t - target|^2``."""
    source_center = source.mean(axis=0)
    target_center = target.mean(axis=0)
    h = (source - source_center).T @ (target - target_center)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose.from_matrix(rotation, target_center - rotation @ source_center)


@dataclass
class IcpResult:
    pose: Pose
    status: str
    iterations: int = 0
    rmse: float = float("nan")
    points: int = 0

    @property
    def refined(self):
        return self.status != TOO_FEW_POINTS


def icp_refine(pose, surface, observed, iterations=30, tolerance=1e-5, min_points=50):
    """Point-to-point ICP of a predicted surface against observed points.

    Correspondences run from every observed point to its nearest predicted
    surface point; each step applies the Kabsch update to the surface. Stops
    after ``iterations`` steps or when the correspondence RMSE improves by
    less than ``tolerance`` meters.

    Args:
        pose (Pose): Camera-frame pose of the predicted object
        surface (numpy.ndarray): ``(N, 3)`` predicted surface points in the
            object frame (meters, i.e. already scaled)
        observed (numpy.ndarray): ``(M, 3)`` camera-frame points
        iterations (int): Maximum number of steps
        tolerance (float): RMSE improvement threshold (m)
        min_points (int): Minimum number of observed points

    Returns:
        IcpResult: Refined pose and a status of ``converged``,
        ``iteration_cap`` or ``too_few_points`` (pose unchanged)
    """
    observed = np.asarray(observed, dtype=float).reshape(-1, 3)
    surface = np.asarray(surface, dtype=float).reshape(-1, 3)
    if len(observed) < min_points or len(surface) == 0:
        logger.debug("ICP skipped with %d observed points", len(observed))
        return IcpResult(pose, TOO_FEW_POINTS, points=len(observed))

    correction = Pose.identity()
    previous = np.inf
    rmse = np.inf
    for step in range(iterations):
        moved = compose(correction, pose).apply(surface)
        distance, nearest = cKDTree(moved).query(observed)
        rmse = float(np.sqrt(np.mean(distance ** 2)))
        if previous - rmse < tolerance:
            return IcpResult(compose(correction, pose), CONVERGED, step, rmse, len(observed))
        previous = rmse
        correction = compose(kabsch(moved[nearest], observed), correction)
    return IcpResult(compose(correction, pose), ITERATION_CAP, iterations, rmse, len(observed))


def to_camera(detection_pose, scale, canonical):
    """Camera-frame grasp pose of a canonical-frame grasp pose."""
    scaled = Pose(canonical.rotation, canonical.translation * scale)
    return compose(detection_pose, scaled)


@dataclass
class ObjectReconstruction:
    """Mesh and grasps of one detection in the camera frame (meters)."""

    index: int
    detection: percept.Detection
    pose: Pose
    vertices: np.ndarray
    faces: np.ndarray
    grasps: list
    canonical_grasps: list = field(default_factory=list)
    icp: IcpResult = None
    degenerate: int = 0

    def best_grasp(self):
        """``(Pose, score)`` with the lowest score, or None."""
        return min(self.grasps, key=lambda g: g[1]) if self.grasps else None


def detection_region(depth, peak):
    """Pixels of the connected valid-depth region holding ``peak``, or None
    when the peak pixel has no depth."""
    row, col = peak
    if not depth[row, col] > 0.0:
        return None
    labels, _ = ndimage.label(depth > 0.0)
    return labels == labels[row, col]


def observed_points(depth, camera, pose, radius, region=None, others=()):
    """Back-projected depth points that belong to the detection at ``pose``.

    Points are taken from ``region`` (all valid pixels by default), must lie
    within ``radius`` of ``pose``'s origin and no farther from it than from
    any of the ``others`` detection centers.
    """
    pixels = np.nonzero(region) if region is not None else None
    points, _, _ = backproject(depth, camera, pixels)
    if len(points) == 0:
        return points
    distance = np.linalg.norm(points - pose.translation, axis=1)
    keep = distance < radius
    for center in others:
        keep &= distance <= np.linalg.norm(points - np.asarray(center, dtype=float), axis=1)
    return points[keep]


def reconstruct_object(index, detection, decoder, config=None, depth=None, camera=None, icp=False, others=()):
    """Mesh and grasps of one detection.

    ICP uses the observed points of the valid-depth region around the
    detection pixel that lie closer to this detection than to any of the
    ``others`` (camera-frame centers of the remaining detections).
    """
    config = config or PipelineConfig()
    grid = decode_grid(decoder, detection.z_s, detection.z_j, config.resolution)
    vertices, faces = mesh_grid(grid)
    extraction = extract_grasps(grid, config.epsilon, config.dedup_distance, config.dedup_angle_deg)

    pose = detection.pose
    result = None
    if icp:
        if depth is None or camera is None:
            raise ValueError("ICP refinement needs a depth map and a camera")
        surface = vertices * detection.scale
        if len(surface) > config.icp_surface_points:
            surface = surface[np.linspace(0, len(surface) - 1, config.icp_surface_points).astype(np.int64)]
        radius = float(np.max(np.linalg.norm(surface, axis=1))) + 0.02 if len(surface) else 0.0
        region = detection_region(depth, (detection.row, detection.col))
        observed = observed_points(depth, camera, pose, radius, region, others)
        result = icp_refine(pose, surface, observed, config.icp_iterations, config.icp_tolerance,
                            config.icp_min_points)
        if not result.refined:
            logger.warning("detection %d: %d observed points, ICP skipped", index, result.points)
        pose = result.pose

    camera_vertices = pose.apply(vertices * detection.scale) if len(vertices) else vertices
    grasps = [(to_camera(pose, detection.scale, g), score) for g, score in extraction.grasps]
    logger.debug("detection %d: %d vertices, %d grasps", index, len(vertices), len(grasps))
    return ObjectReconstruction(index, detection, pose, camera_vertices, faces, grasps,
                                extraction.grasps, result, extraction.degenerate)


def reconstruct_scene(frame, camera, decoder, encoder=None, targets=None, config=None,
                      encoder_config=None, depth=None, icp=False, workers=None):
    """Meshes and grasps of every detected object of a frame.

    With an ``encoder`` the maps are predicted from the frame; without one the
    ground-truth ``targets`` are used (oracle mode).

    Args:
        frame (artigrasp.scene.RenderedFrame): Input frame
        camera (artigrasp.scene.Camera): Frame camera
        decoder (artigrasp.sgdf.DecoderModel): Trained decoder
        encoder (artigrasp.percept.EncoderModel): Trained encoder, or None
        targets (artigrasp.scene.TargetMaps): Ground-truth maps for oracle mode
        depth (numpy.ndarray): Depth for encoding and ICP, ``frame.depth``
            by default
        icp (bool): Refine detection poses with ICP
        workers (int): Detections reconstructed concurrently

    Returns:
        list: :class:`ObjectReconstruction` in detection order

    Raises:
        ValueError: Neither an encoder nor targets
        ReconstructionError: A detection failed
    """
    config = config or PipelineConfig()
    encoder_config = encoder_config or (encoder.config if encoder is not None else EncoderConfig())
    depth = frame.depth if depth is None else depth
    if decoder is None:
        raise ValueError("reconstruction needs a decoder")

    if encoder is not None:
        maps = percept.encode(encoder, frame, camera, depth)
    elif targets is not None:
        maps = targets.stacked()
    else:
        raise ValueError("reconstruction needs an encoder or ground-truth maps")

    peaks = percept.detect_peaks(maps[..., 0], encoder_config.threshold, encoder_config.nms_radius)
    detections = percept.extract_detections(maps, peaks)
    logger.info("%d detection(s)", len(detections))

    def run(item):
        index, detection = item
        try:
            others = [d.pose.translation for j, d in enumerate(detections) if j != index]
            return reconstruct_object(index, detection, decoder, config, depth, camera, icp, others)
        except ReconstructionError:
            raise
        except Exception as e:
            raise ReconstructionError(index, e)

    workers = workers or config.workers
    if workers > 1 and len(detections) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, enumerate(detections)))
    return [run(item) for item in enumerate(detections)]


def save_reconstructions(path, reconstructions):
    """``object_<k>.obj`` meshes and ``grasps.jsonl`` below ``path``."""
    ensure_dir(path)
    written = []
    records = []
    for recon in reconstructions:
        name = os.path.join(path, "object_%d.obj" % recon.index)
        write_obj(name, recon.vertices, recon.faces)
        written.append(name)
        records.extend({"object_index": recon.index, "pose": pose.to_list(), "score": score}
                       for pose, score in recon.grasps)
    name = os.path.join(path, "grasps.jsonl")
    write_jsonl(name, records)
    written.append(name)
    return written
