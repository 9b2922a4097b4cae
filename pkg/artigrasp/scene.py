"""
Random scenes, sphere-traced frames and per-pixel training targets.

World frame: z up, floor at ``z = 0``. Cameras follow the OpenCV convention
(+z forward, +x right, +y down); pixel ``(row, col)`` looks along the ray
through ``((col + 0.5 - cx) / fx, (row + 0.5 - cy) / fy, 1)``. Depth maps hold
the camera-frame z of the first hit, 0 where nothing is hit.

Only articulated objects are rendered. The floor and the room walls limit
placement and take part in grasp execution, but never appear in a frame.
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from artigrasp import artobj
from artigrasp.config import NoiseConfig, SceneConfig
from artigrasp.formats import (ensure_dir, read_blob, read_json, read_pfm, read_pgm, write_blob,
                               write_json, write_pfm, write_pgm)
from artigrasp.geom import Pose, compose, inverse, rotation_to_6d

logger = logging.getLogger(__name__)

CODE_DIM = 32
CHANNELS = 44
NORMAL_STEP = 1e-4
# beyond this distance from an object's bounding sphere the sphere bound
# stands in for the exact distance
SPHERE_SLACK = 0.05


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlacedObject:
    object_id: str
    pose: Pose
    joint_index: int
    q: float

    def to_dict(self):
        return {"object_id": self.object_id, "pose": self.pose.to_list(),
                "joint_index": self.joint_index, "q": self.q}

    @classmethod
    def from_dict(cls, data):
        return cls(data["object_id"], Pose.from_list(data["pose"]), int(data["joint_index"]), float(data["q"]))


@dataclass(frozen=True)
class SceneSpec:
    id: str
    objects: tuple
    room_half_extent: float
    room_height: float
    walls: bool = True
    yaw: float = 0.0

    def to_dict(self):
        return {"id": self.id, "objects": [p.to_dict() for p in self.objects],
                "room_half_extent": self.room_half_extent, "room_height": self.room_height,
                "walls": self.walls, "yaw": self.yaw}

    @classmethod
    def from_dict(cls, data):
        return cls(data["id"], tuple(PlacedObject.from_dict(p) for p in data["objects"]),
                   float(data["room_half_extent"]), float(data["room_height"]), bool(data["walls"]),
                   float(data.get("yaw", 0.0)))


class Camera(object):
    """Pinhole camera; ``camera_from_world`` maps world points into the camera
    frame."""

    def __init__(self, fx, fy, cx, cy, width, height, camera_from_world):
        if not (fx > 0 and fy > 0):
            raise ValueError("focal lengths must be > 0, got %r, %r" % (fx, fy))
        if not (0 <= cx <= width and 0 <= cy <= height):
            raise ValueError("principal point (%r, %r) outside a %dx%d image" % (cx, cy, width, height))
        self.fx, self.fy, self.cx, self.cy = float(fx), float(fy), float(cx), float(cy)
        self.width, self.height = int(width), int(height)
        self.camera_from_world = camera_from_world

    @classmethod
    def from_fov(cls, width, height, fov_deg, camera_from_world):
        f = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height, camera_from_world)

    @property
    def world_from_camera(self):
        return inverse(self.camera_from_world)

    @property
    def origin(self):
        return self.world_from_camera.translation

    def pixel_rays(self):
        """Unnormalized camera-frame rays (z = 1), shape ``(height, width, 3)``."""
        rows, cols = np.mgrid[0:self.height, 0:self.width].astype(float)
        return np.stack([(cols + 0.5 - self.cx) / self.fx, (rows + 0.5 - self.cy) / self.fy,
                         np.ones_like(rows)], axis=-1)

    def project(self, points):
        """Camera-frame points to ``(row, col)`` pixel coordinates (float)."""
        points = np.atleast_2d(points)
        col = points[:, 0] / points[:, 2] * self.fx + self.cx - 0.5
        row = points[:, 1] / points[:, 2] * self.fy + self.cy - 0.5
        return np.stack([row, col], axis=1)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "camera_from_world": self.camera_from_world.to_list()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["fx"], data["fy"], data["cx"], data["cy"], data["width"], data["height"],
                   Pose.from_list(data["camera_from_world"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """``camera_from_world`` pose of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("camera looks along the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return inverse(Pose.from_matrix(np.stack([right, down, forward], axis=1), eye))


@dataclass
class RenderedFrame:
    depth: np.ndarray
    shaded: np.ndarray
    mask: np.ndarray
    incidence: np.ndarray = None
    noisy_depth: np.ndarray = None


@dataclass
class TargetMaps:
    heat: np.ndarray
    pose: np.ndarray
    shape: np.ndarray
    joint: np.ndarray
    supervision: np.ndarray
    centers: list = field(default_factory=list)

    def stacked(self):
        """``(height, width, 44)``: heat, pose (10), shape (32), joint."""
        return np.concatenate([self.heat[..., None], self.pose, self.shape, self.joint], axis=-1)

    @classmethod
    def from_stacked(cls, maps, supervision, centers=()):
        return cls(maps[..., 0], maps[..., 1:11], maps[..., 11:43], maps[..., 43:44],
                   np.asarray(supervision, dtype=bool), list(centers))


class SceneGeometry(object):
    """Signed distance of a scene's objects in the world frame."""

    def __init__(self, scene, objects):
        self.scene = scene
        self.entries = []
        for placed in scene.objects:
            obj = objects[placed.object_id]
            motion = compose(placed.pose, artobj.link_pose(obj, placed.q))
            boxes = [box.moved(placed.pose) for box in obj.base_parts]
            boxes += [box.moved(motion) for box in obj.link_parts]
            corners = np.concatenate([box.corners() for box in boxes])
            center = (corners.min(axis=0) + corners.max(axis=0)) / 2.0
            radius = float(np.max(np.linalg.norm(corners - center, axis=1)))
            self.entries.append((obj, placed, boxes, center, radius))

    def __len__(self):
        return len(self.entries)

    def object_sdf(self, k, points):
        return np.min([box.sdf(points) for box in self.entries[k][2]], axis=0)

    def sdf(self, points):
        """Distance to the nearest object and its index (-1 for an empty scene).

        Far from an object's bounding sphere the sphere distance is used, which
        is a lower bound and keeps sphere tracing conservative.
        """
        points = np.atleast_2d(points)
        best = np.full(len(points), np.inf)
        owner = np.full(len(points), -1, dtype=np.int64)
        for k, (_, _, boxes, center, radius) in enumerate(self.entries):
            distance = np.linalg.norm(points - center, axis=1) - radius
            near = distance < SPHERE_SLACK
            if np.any(near):
                distance[near] = self.object_sdf(k, points[near])
            closer = distance < best
            best[closer] = distance[closer]
            owner[closer] = k
        return best, owner

    def exact_sdf(self, points):
        points = np.atleast_2d(points)
        if not self.entries:
            return np.full(len(points), np.inf)
        return np.min([self.object_sdf(k, points) for k in range(len(self.entries))], axis=0)

    def environment_sdf(self, points):
        """Floor (and walls when enabled); never rendered."""
        points = np.atleast_2d(points)
        distance = points[:, 2].copy()
        if self.scene.walls:
            half = self.scene.room_half_extent
            for axis in (0, 1):
                distance = np.minimum(distance, half - np.abs(points[:, axis]))
        return distance

    def environment_for(self, k):
        """Signed distance of everything except object ``k``, taking points in
        object ``k``'s frame."""
        world_from_object = self.entries[k][1].pose
        others = [j for j in range(len(self.entries)) if j != k]

        def environment(points):
            world = world_from_object.apply(np.atleast_2d(points))
            distance = self.environment_sdf(world)
            for j in others:
                distance = np.minimum(distance, self.object_sdf(j, world))
            return distance

        return environment


def _placement_pose(obj, yaw, xy):
    rotation = Pose.from_axis_angle([0.0, 0.0, 1.0], yaw)
    return Pose(rotation.rotation, [xy[0], xy[1], -obj.base_bottom])


def _clearance(a, pose_a, q_a, b, pose_b, q_b, samples=400):
    """Smallest distance from either object's surface samples to the other."""
    result = np.inf
    for (src, pose_src, q_src), (dst, pose_dst, q_dst) in (((a, pose_a, q_a), (b, pose_b, q_b)),
                                                           ((b, pose_b, q_b), (a, pose_a, q_a))):
        points = pose_src.apply(artobj.surface_points(src, q_src, samples, "whole", seed=0))
        local = inverse(pose_dst).apply(points)
        result = min(result, float(artobj.sdf(dst, q_dst, local).min()))
    return result


def _inside_room(obj, pose, half, margin=0.05):
    lo, hi = artobj.sweep_bounds(obj.base_parts, obj.link_parts, obj.joint)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    world = pose.apply(corners)
    return bool(np.all(np.abs(world[:, :2]) <= half - margin))


def generate_scene(objects, config=None, seed=0, scene_id="scene_0000", joint_states=8):
    """Place 1 to 3 objects from ``objects`` upright on the floor.

    All objects share a random yaw within ``yaw_range_deg`` of facing +x, so
    one side of the scene is the front. Each object gets a random joint state
    from its joint state set. Positions are rejection-sampled until every
    pair of objects keeps ``config.clearance`` and each fits in the room
    with its full joint sweep.

    Args:
        objects (list): Corpus
        config (SceneConfig): Counts, room and clearance
        seed: Anything accepted by :func:`numpy.random.default_rng`

    Returns:
        SceneSpec: The scene

    Raises:
        ValueError: empty corpus
        PlacementError: an object could not be placed within the retry budget
    """
    config = config or SceneConfig()
    if not objects:
        raise ValueError("cannot build a scene from an empty corpus")
    rng = np.random.default_rng(seed)
    by_id = dict((obj.id, obj) for obj in objects)

    count = 1 if config.single_object else int(rng.integers(config.min_objects, config.max_objects + 1))
    chosen = rng.choice(len(objects), size=count, replace=count > len(objects))
    yaw = float(np.radians(rng.uniform(-config.yaw_range_deg, config.yaw_range_deg)))
    facing = Pose.from_axis_angle([0.0, 0.0, 1.0], yaw)
    spread = min(1.2, config.room_half_extent - 0.8)

    placed = []
    for k in chosen:
        obj = objects[int(k)]
        joint_index = int(rng.integers(joint_states))
        q = artobj.joint_state_set(obj, joint_states)[joint_index]
        for _ in range(config.placement_retries):
            offset = facing.apply_vector([rng.uniform(-0.4, 0.4), rng.uniform(-spread, spread), 0.0])
            pose = _placement_pose(obj, yaw, offset[:2])
            if not _inside_room(obj, pose, config.room_half_extent):
                continue
            if all(_clearance(obj, pose, q, by_id[other.object_id], other.pose, other.q) >= config.clearance
                   for other in placed):
                placed.append(PlacedObject(obj.id, pose, joint_index, q))
                break
        else:
            raise PlacementError("could not place %s in %s after %d attempts"
                                 % (obj.id, scene_id, config.placement_retries))

    return SceneSpec(scene_id, tuple(placed), config.room_half_extent, config.room_height, config.walls, yaw)


def random_camera(scene, objects, config=None, rng=None):
    """Look-at camera in front of the scene's objects at a random distance,
    height and azimuth (within 40 degrees of the facing direction)."""
    config = config or SceneConfig()
    rng = rng if rng is not None else np.random.default_rng()
    by_id = dict((obj.id, obj) for obj in objects)
    centers = np.array([p.pose.translation for p in scene.objects]) if scene.objects else np.zeros((1, 3))
    target = centers.mean(axis=0)
    if scene.objects:
        target[2] = np.mean([-by_id[p.object_id].base_bottom for p in scene.objects])

    azimuth = scene.yaw + np.radians(rng.uniform(-40.0, 40.0))
    distance = rng.uniform(*config.camera_distance)
    eye = target + distance * np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
    eye[2] = rng.uniform(*config.camera_height)
    return Camera.from_fov(config.width, config.height, config.fov_deg, look_at(eye, target))


def _ray_sphere(origin, directions, center, radius):
    """Entry and exit distances of unit rays through a sphere (inf if missed)."""
    oc = origin - center
    b = directions @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    entry = np.where(hit, -b - root, np.inf)
    exit_ = np.where(hit, -b + root, -np.inf)
    return entry, exit_


def scene_normals(geometry, points):
    offsets = np.eye(3) * NORMAL_STEP
    gradient = np.empty_like(points)
    for axis in range(3):
        gradient[:, axis] = (geometry.exact_sdf(points + offsets[axis])
                             - geometry.exact_sdf(points - offsets[axis])) / (2.0 * NORMAL_STEP)
    norms = np.linalg.norm(gradient, axis=1, keepdims=True)
    return gradient / np.maximum(norms, 1e-12)


def render(scene, camera, objects, config=None, geometry=None):
    """Sphere-trace a frame of ``scene``.

    Rays start at their first bounding-sphere entry and march by the scene
    distance for at most ``max_steps`` steps; a ray hits when the distance
    drops below ``hit_tolerance`` and misses beyond ``max_range`` or past its
    last sphere. The instance id of a hit is ``1 +`` the index of the nearest
    object; shading is ``0.5 + 0.5 * normal . light``.

    Args:
        scene (SceneSpec): Scene
        camera (Camera): Camera
        objects (dict): Object id to :class:`artigrasp.artobj.ArticulatedObject`
        config (SceneConfig): Tracing limits and light

    Returns:
        RenderedFrame: depth, shaded, instance mask and incidence cosine
    """
    config = config or SceneConfig()
    geometry = geometry or SceneGeometry(scene, objects)
    height, width = camera.height, camera.width

    rays = camera.pixel_rays().reshape(-1, 3)
    unit = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    world_from_camera = camera.world_from_camera
    origin = world_from_camera.translation
    directions = world_from_camera.apply_vector(unit)

    count = len(directions)
    t = np.full(count, np.inf)
    t_end = np.full(count, -np.inf)
    for _, _, _, center, radius in geometry.entries:
        entry, exit_ = _ray_sphere(origin, directions, center, radius)
        t = np.minimum(t, np.maximum(entry, 0.0))
        t_end = np.maximum(t_end, exit_)
    t_end = np.minimum(t_end, config.max_range)

    active = np.nonzero(np.isfinite(t) & (t <= t_end))[0]
    hit_t = np.full(count, np.nan)
    hit_owner = np.full(count, -1, dtype=np.int64)
    for _ in range(config.max_steps):
        if len(active) == 0:
            break
        points = origin + t[active, None] * directions[active]
        distance, owner = geometry.sdf(points)
        hit = distance < config.hit_tolerance
        hit_t[active[hit]] = t[active[hit]]
        hit_owner[active[hit]] = owner[hit]
        t[active] += np.where(hit, 0.0, distance)
        active = active[~hit & (t[active] <= t_end[active])]

    depth = np.zeros(count)
    shaded = np.zeros(count)
    incidence = np.zeros(count)
    mask = np.zeros(count, dtype=np.int64)

    hits = np.nonzero(hit_owner >= 0)[0]
    if len(hits):
        points = origin + hit_t[hits, None] * directions[hits]
        normals = scene_normals(geometry, points)
        light = np.asarray(config.light, dtype=float)
        light /= np.linalg.norm(light)
        depth[hits] = hit_t[hits] * unit[hits, 2]
        shaded[hits] = np.clip(0.5 + 0.5 * normals @ light, 0.0, 1.0)
        incidence[hits] = np.abs(np.sum(normals * directions[hits], axis=1))
        mask[hits] = hit_owner[hits] + 1

    return RenderedFrame(depth.reshape(height, width), shaded.reshape(height, width),
                         mask.reshape(height, width), incidence.reshape(height, width))


def add_depth_noise(depth, config=None, seed=0, incidence=None):
    """Parametric depth noise.

    Valid pixels get Gaussian noise with ``sigma = sigma0 + sigma1 * depth^2``;
    when ``incidence`` (normal . view cosine) is given, pixels below
    ``grazing_incidence`` drop to 0 with probability ``dropout``.
    """
    config = config or NoiseConfig()
    depth = np.asarray(depth, dtype=float)
    rng = np.random.default_rng(seed)
    valid = depth > 0.0
    sigma = config.sigma0 + config.sigma1 * depth * depth
    noisy = np.where(valid, depth + rng.normal(size=depth.shape) * sigma, 0.0)
    noisy = np.where(valid & (noisy <= 0.0), 0.0, noisy)
    if incidence is not None and config.dropout > 0.0:
        grazing = valid & (np.asarray(incidence) < config.grazing_incidence)
        drop = grazing & (rng.random(depth.shape) < config.dropout)
        noisy[drop] = 0.0
    return noisy


def object_pose10(obj, placed, camera):
    """Camera-frame object pose: translation, 6D rotation and meters per
    canonical unit."""
    pose = compose(camera.camera_from_world, placed.pose)
    return np.concatenate([pose.translation, rotation_to_6d(pose.matrix), [1.0 / obj.canonical_scale]])


def designated_center(rows, cols):
    """Mask pixel nearest the mask centroid (first in row-major order on ties)."""
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    d2 = (rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2
    k = int(np.argmin(d2))
    return int(rows[k]), int(cols[k])


def make_target_maps(scene, camera, frame, codes, objects, config=None):
    """Ground-truth encoder targets of a rendered frame.

    Each visible object adds a Gaussian centred on its designated center
    pixel with covariance ``heat_cov_scale`` times the mask second moments
    (plus half a pixel squared), so the heatmap equals 1 there; maps are
    max-composited. Pose, shape and joint maps hold the object's values on
    its mask pixels.

    Args:
        scene (SceneSpec): Scene rendered in ``frame``
        camera (Camera): Camera of ``frame``
        frame (RenderedFrame): Rendered frame
        codes (dict): Object id to shape code
        objects (dict): Object id to object

    Returns:
        TargetMaps: Maps with ``centers`` as ``(row, col, object index)``
    """
    config = config or SceneConfig()
    height, width = frame.mask.shape
    heat = np.zeros((height, width))
    pose = np.zeros((height, width, 10))
    shape = np.zeros((height, width, CODE_DIM))
    joint = np.zeros((height, width, 1))
    centers = []

    grid_rows, grid_cols = np.mgrid[0:height, 0:width].astype(float)
    for k, placed in enumerate(scene.objects):
        pixels = frame.mask == k + 1
        if not np.any(pixels):
            logger.warning("%s: object %d (%s) not visible, no targets", scene.id, k, placed.object_id)
            continue
        obj = objects[placed.object_id]
        rows, cols = np.nonzero(pixels)
        center = designated_center(rows.astype(float), cols.astype(float))

        covariance = config.heat_cov_scale * np.cov(np.stack([rows, cols]).astype(float), bias=True)
        covariance += 0.5 * np.eye(2)
        precision = np.linalg.inv(covariance)
        d = np.stack([grid_rows - center[0], grid_cols - center[1]], axis=-1)
        gaussian = np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, precision, d))
        heat = np.maximum(heat, gaussian)

        pose[pixels] = object_pose10(obj, placed, camera)
        shape[pixels] = codes[placed.object_id]
        joint[pixels] = artobj.normalize_joint(placed.q, obj.joint)
        centers.append((center[0], center[1], k))

    return TargetMaps(heat, pose, shape, joint, frame.mask > 0, centers)


def backproject(depth, camera, pixels=None):
    """Camera-frame points of the valid depth pixels (or of ``pixels``).

    Returns:
        tuple: ``(points, rows, cols)``
    """
    if pixels is None:
        rows, cols = np.nonzero(depth > 0.0)
    else:
        rows, cols = pixels
        keep = depth[rows, cols] > 0.0
        rows, cols = rows[keep], cols[keep]
    z = depth[rows, cols]
    x = (cols + 0.5 - camera.cx) / camera.fx * z
    y = (rows + 0.5 - camera.cy) / camera.fy * z
    return np.stack([x, y, z], axis=1), rows, cols


def render_views(scene, objects, codes, config=None, noise=None, seed=0):
    """Render ``config.cameras`` random views with noisy depth and targets.

    View ``c`` uses ``SeedSequence([seed, c])`` for its camera and noise.

    Returns:
        list: ``(camera, frame, targets)`` per view
    """
    config = config or SceneConfig()
    by_id = dict((obj.id, obj) for obj in objects)
    geometry = SceneGeometry(scene, by_id)
    views = []
    for c in range(config.cameras):
        rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
        camera = random_camera(scene, objects, config, rng)
        frame = render(scene, camera, by_id, config, geometry)
        frame.noisy_depth = add_depth_noise(frame.depth, noise, int(rng.integers(2 ** 63)), frame.incidence)
        targets = make_target_maps(scene, camera, frame, codes, by_id, config)
        views.append((camera, frame, targets))
    return views


class FrameRecord(object):
    """A frame on disk: scene, camera, images and targets."""

    def __init__(self, path, scene, camera, frame, targets):
        self.path = path
        self.scene = scene
        self.camera = camera
        self.frame = frame
        self.targets = targets


def save_frame(path, scene, camera, frame, targets):
    ensure_dir(path)
    write_json(os.path.join(path, "scene.json"), scene.to_dict())
    write_json(os.path.join(path, "camera.json"), camera.to_dict())
    write_pfm(os.path.join(path, "depth.pfm"), frame.depth)
    write_pfm(os.path.join(path, "shaded.pfm"), frame.shaded)
    if frame.noisy_depth is not None:
        write_pfm(os.path.join(path, "noisy_depth.pfm"), frame.noisy_depth)
    write_pgm(os.path.join(path, "mask.pgm"), frame.mask)
    write_blob(os.path.join(path, "targets"), targets.stacked(),
               {"centers": [list(c) for c in targets.centers], "channels": CHANNELS})


def load_frame(path):
    scene = SceneSpec.from_dict(read_json(os.path.join(path, "scene.json")))
    camera = Camera.from_dict(read_json(os.path.join(path, "camera.json")))
    noisy_path = os.path.join(path, "noisy_depth.pfm")
    frame = RenderedFrame(
        depth=read_pfm(os.path.join(path, "depth.pfm")),
        shaded=read_pfm(os.path.join(path, "shaded.pfm")),
        mask=read_pgm(os.path.join(path, "mask.pgm")),
        noisy_depth=read_pfm(noisy_path) if os.path.exists(noisy_path) else None,
    )
    header, maps = read_blob(os.path.join(path, "targets"))
    targets = TargetMaps.from_stacked(maps, frame.mask > 0, [tuple(c) for c in header["centers"]])
    return FrameRecord(path, scene, camera, frame, targets)


def list_frames(root):
    """Frame directories below ``root`` in sorted order."""
    result = []
    for directory, _, files in sorted(os.walk(root)):
        if "camera.json" in files:
            result.append(directory)
    return sorted(result)
