"""
Procedural articulated objects and their exact signed distance functions.

Two unit systems are in use. Object geometry, joint motions, grasp poses
and :func:`sdf` are in meters of the object frame. The decoder works in the
canonical frame, where ``canonical_scale`` maps the object's whole joint
sweep into ``[-1, 1]^3``; :func:`canonical_sdf` takes canonical points and
returns canonical distances.
"""

import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from artigrasp.geom import Pose, compose, inverse

logger = logging.getLogger(__name__)

REVOLUTE = "revolute"
PRISMATIC = "prismatic"

FAMILIES = ("microwave", "refrigerator", "oven", "dishwasher", "storage")

# gripper reach kept free around the geometry inside the canonical box
REACH_MARGIN = 0.12
LIMIT_TOLERANCE = 1e-9
SURFACE_TOLERANCE = 1e-3

WALL = 0.02
PANEL = 0.02
# plinth height under the body; tall enough for an edge grasp from below on
# families whose bottom edge is a grasp target
PLINTHS = {"microwave": 0.12, "refrigerator": 0.12, "oven": 0.04, "dishwasher": 0.04, "storage": 0.12}
HANDLE_DEPTH = 0.03
HANDLE_WIDTH = 0.02


class Box(object):
    """Oriented box: a pose (center + rotation) and half extents in meters."""

    __slots__ = ("pose", "half_extents")

    def __init__(self, pose, half_extents):
        half_extents = np.asarray(half_extents, dtype=float).reshape(3)
        if np.any(half_extents <= 0):
            raise ValueError("box half extents must be > 0, got %r" % (half_extents,))
        self.pose = pose
        self.half_extents = half_extents

    @classmethod
    def axis_aligned(cls, center, half_extents):
        return cls(Pose(translation=center), half_extents)

    def local(self, points):
        return (np.asarray(points, dtype=float) - self.pose.translation) @ self.pose.matrix

    def sdf(self, points):
        """Exact signed distance, negative inside.

        See also:
            * Distance functions: https://iquilezles.org/articles/distfunctions/
        """
        q = np.abs(self.local(points)) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def face_areas(self):
        hx, hy, hz = self.half_extents
        return np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0

    def area(self):
        return float(self.face_areas().sum())

    def sample_surface(self, n, rng):
        """Area-weighted uniform samples on the six faces."""
        areas = self.face_areas()
        faces = rng.choice(6, size=n, p=areas / areas.sum())
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * self.half_extents
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        local[np.arange(n), axis] = sign * self.half_extents[axis]
        return self.pose.apply(local)

    def corners(self):
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return self.pose.apply(signs * self.half_extents)

    def moved(self, pose):
        """The same box expressed after applying ``pose``."""
        return Box(compose(pose, self.pose), self.half_extents)

    def to_dict(self):
        return {"pose": self.pose.to_list(), "half_extents": [float(v) for v in self.half_extents]}

    @classmethod
    def from_dict(cls, data):
        return cls(Pose.from_list(data["pose"]), data["half_extents"])


@dataclass(frozen=True)
class JointSpec:
    """Single joint of an articulated object.

    ``limits`` are radians (revolute) or meters (prismatic); ``q_global_max``
    is shared by every object of the same kind in a corpus.
    """

    kind: str
    axis: tuple
    origin: tuple
    limits: tuple
    q_global_max: float

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise ValueError("unknown joint kind %r" % self.kind)
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("joint axis must be unit norm, got %r" % (self.axis,))
        q_min, q_max = self.limits
        if not q_min < q_max:
            raise ValueError("joint limits must satisfy q_min < q_max, got %r" % (self.limits,))
        if self.q_global_max < q_max:
            raise ValueError("q_global_max %r below q_max %r" % (self.q_global_max, q_max))

    @property
    def q_min(self):
        return self.limits[0]

    @property
    def q_max(self):
        return self.limits[1]

    def to_dict(self):
        return {"kind": self.kind, "axis": list(self.axis), "origin": list(self.origin),
                "limits": list(self.limits), "q_global_max": self.q_global_max}

    @classmethod
    def from_dict(cls, data):
        return cls(data["kind"], tuple(data["axis"]), tuple(data["origin"]),
                   tuple(data["limits"]), float(data["q_global_max"]))


@dataclass(frozen=True)
class ArticulatedObject:
    """Procedural articulated object in its own (metric) frame.

    The frame is centred on the bounding box of the whole joint sweep, so
    ``canonical_scale`` alone maps it into the canonical ``[-1, 1]^3`` box.
    ``grasp_edges`` lists the free panel edges as ``(source, axis, sign)``
    where ``axis`` indexes the panel box's local axes (1 = width, 2 = height).
    """

    id: str
    family: str
    base_parts: tuple
    link_panel: Box
    handle: object
    joint: JointSpec
    canonical_scale: float
    grasp_edges: tuple

    @property
    def link_parts(self):
        if self.handle is None:
            return (self.link_panel,)
        return (self.link_panel, self.handle)

    @property
    def base_bottom(self):
        return min(float(box.corners()[:, 2].min()) for box in self.base_parts)

    def to_dict(self):
        return {
            "id": self.id,
            "family": self.family,
            "base_parts": [box.to_dict() for box in self.base_parts],
            "link_panel": self.link_panel.to_dict(),
            "handle": None if self.handle is None else self.handle.to_dict(),
            "joint": self.joint.to_dict(),
            "canonical_scale": self.canonical_scale,
            "grasp_edges": [list(edge) for edge in self.grasp_edges],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            id=data["id"],
            family=data["family"],
            base_parts=tuple(Box.from_dict(b) for b in data["base_parts"]),
            link_panel=Box.from_dict(data["link_panel"]),
            handle=None if data["handle"] is None else Box.from_dict(data["handle"]),
            joint=JointSpec.from_dict(data["joint"]),
            canonical_scale=float(data["canonical_scale"]),
            grasp_edges=tuple((str(s), int(a), float(g)) for s, a, g in data["grasp_edges"]),
        )


def joint_state_set(obj, n):
    """Evenly split the joint range into ``n`` states, both limits included.

    >>> import numpy as np
    >>> from artigrasp.artobj import generate_object
    >>> obj = generate_object("storage", 0, np.random.default_rng(0))
    >>> states = joint_state_set(obj, 4)
    >>> len(states), states[0] == obj.joint.q_min, states[-1] == obj.joint.q_max
    (4, True, True)

    Raises:
        ValueError: ``n`` outside ``[2, 16]``
    """
    if not 2 <= n <= 16:
        raise ValueError("joint state count must lie in [2, 16], got %r" % n)
    return [float(q) for q in np.linspace(obj.joint.q_min, obj.joint.q_max, n)]


def check_joint_state(obj, q):
    q_min, q_max = obj.joint.limits
    if q < q_min - LIMIT_TOLERANCE or q > q_max + LIMIT_TOLERANCE:
        raise ValueError("joint state %r outside limits [%r, %r] of %s" % (q, q_min, q_max, obj.id))


def joint_motion(joint, q):
    """Pose of the link relative to its rest placement at joint state ``q``."""
    axis = np.asarray(joint.axis, dtype=float)
    if joint.kind == PRISMATIC:
        return Pose(translation=q * axis)
    rotation = Pose.from_axis_angle(axis, q)
    origin = np.asarray(joint.origin, dtype=float)
    return Pose(rotation.rotation, origin - rotation.apply(origin))


def link_pose(obj, q):
    """Link motion at joint state ``q``.

    Revolute joints rotate by ``q`` about the axis through ``joint.origin``;
    prismatic joints translate by ``q * axis``.

    Raises:
        ValueError: ``q`` outside the joint limits
    """
    check_joint_state(obj, q)
    return joint_motion(obj.joint, q)


def _union(boxes, points):
    return np.min([box.sdf(points) for box in boxes], axis=0)


def base_sdf(obj, x):
    return _union(obj.base_parts, x)


def link_sdf(obj, q, x):
    """Signed distance to the link (panel + handle) only."""
    local = inverse(link_pose(obj, q)).apply(x)
    return _union(obj.link_parts, local)


def sdf(obj, q, x):
    """Signed distance to the object at joint state ``q``, in meters of the
    object frame (negative inside).

    The union of exact box distances is exact outside and a correct lower
    bound inside.

    Args:
        obj (ArticulatedObject): Object
        q (float): Joint state
        x (numpy.ndarray): ``(3,)`` point or ``(N, 3)`` points

    Returns:
        numpy.ndarray: Signed distance per point
    """
    return np.minimum(base_sdf(obj, x), link_sdf(obj, q, x))


def canonical_sdf(obj, q, x_canonical):
    """Signed distance in canonical units for canonical-frame points."""
    s = obj.canonical_scale
    return sdf(obj, q, np.asarray(x_canonical, dtype=float) / s) * s


def surface_points(obj, q, n, region="whole", seed=0):
    """Area-weighted surface samples of the object at joint state ``q``.

    Faces hidden inside the union (contact faces) are rejected, so every
    returned point satisfies ``|sdf| < 1e-3``.

    Args:
        obj (ArticulatedObject): Object
        q (float): Joint state
        n (int): Number of points
        region (str): ``"whole"`` or ``"link_only"`` (panel and handle)
        seed: Anything accepted by :func:`numpy.random.default_rng`

    Returns:
        numpy.ndarray: ``(n, 3)`` points in the object frame
    """
    if n < 1:
        raise ValueError("surface point count must be >= 1, got %r" % n)
    if region not in ("whole", "link_only"):
        raise ValueError("unknown surface region %r" % region)

    motion = link_pose(obj, q)
    parts = [box.moved(motion) for box in obj.link_parts]
    if region == "whole":
        parts = list(obj.base_parts) + parts

    rng = np.random.default_rng(seed)
    areas = np.array([box.area() for box in parts])
    found = []
    total = 0
    for _ in range(100):
        counts = rng.multinomial(2 * n, areas / areas.sum())
        batch = np.concatenate([box.sample_surface(c, rng) for box, c in zip(parts, counts) if c])
        keep = batch[np.abs(sdf(obj, q, batch)) < SURFACE_TOLERANCE]
        found.append(keep)
        total += len(keep)
        if total >= n:
            break
    else:
        raise RuntimeError("could not sample %d surface points on %s" % (n, obj.id))

    return np.concatenate(found)[:n]


def normalize_joint(q, joint):
    """Joint code ``z_j = q / q_global_max``.

    >>> from artigrasp.artobj import JointSpec, normalize_joint
    >>> import math
    >>> joint = JointSpec("revolute", (0.0, 0.0, 1.0), (0.0, 0.0, 0.0), (0.0, math.pi / 2), math.pi / 2)
    >>> normalize_joint(math.pi / 4, joint)
    0.5

    Raises:
        ValueError: ``q`` negative or above ``q_global_max``
    """
    if q < -LIMIT_TOLERANCE or q > joint.q_global_max + LIMIT_TOLERANCE:
        raise ValueError("joint state %r outside [0, %r]" % (q, joint.q_global_max))
    return min(max(q / joint.q_global_max, 0.0), 1.0)


def closing_goal(q, joint):
    """True when the goal from joint state ``q`` is to close the joint.

    Revolute joints close when the gap to ``q_max`` is strictly less than 45
    degrees; prismatic joints use half of ``q_global_max`` as the gap.
    """
    gap = joint.q_max - q
    if joint.kind == REVOLUTE:
        return gap < np.radians(45.0)
    return gap < 0.5 * joint.q_global_max


def goal_delta(joint):
    """Magnitude of the joint motion a grasp must achieve."""
    if joint.kind == REVOLUTE:
        return float(np.radians(10.0))
    return 0.05 * joint.q_global_max


def signed_goal_delta(q, joint):
    delta = goal_delta(joint)
    return -delta if closing_goal(q, joint) else delta


def panel_axes(obj, q):
    """Unit axes of the panel box at joint state ``q``: ``(normal, width,
    height)`` in the object frame; ``normal`` points out of the front face."""
    rotation = compose(link_pose(obj, q), obj.link_panel.pose).matrix
    return rotation[:, 0], rotation[:, 1], rotation[:, 2]


def sweep_bounds(parts, links, joint):
    corners = [box.corners() for box in parts]
    for q in np.linspace(joint.q_min, joint.q_max, 33):
        motion = joint_motion(joint, q)
        corners.extend(box.moved(motion).corners() for box in links)
    corners = np.concatenate(corners)
    return corners.min(axis=0), corners.max(axis=0)


def _shift(box, offset):
    return Box(Pose(box.pose.rotation, box.pose.translation + offset), box.half_extents)


def generate_object(family, index, rng, q_global_max=None):
    """Build one randomized object of ``family``.

    The body is an open box on a plinth, facing +x. Doors hinge on the left
    (microwave), right (refrigerator) or bottom (oven, dishwasher); storage
    furniture has a drawer front sliding along +x. ``q_global_max`` defaults
    to the object's own ``q_max`` until a corpus sets the shared value.

    Args:
        family (str): One of :data:`FAMILIES`
        index (int): Used to build the object id
        rng (numpy.random.Generator): Source of the random dimensions

    Returns:
        ArticulatedObject: The object, centred and scaled for the canonical box
    """
    if family not in FAMILIES:
        raise ValueError("unknown object family %r" % family)

    if family == "microwave":
        width, height, depth = rng.uniform(0.45, 0.6), rng.uniform(0.28, 0.38), rng.uniform(0.35, 0.45)
        has_handle = rng.random() < 0.7
    elif family == "refrigerator":
        width, height, depth = rng.uniform(0.5, 0.65), rng.uniform(0.8, 1.1), rng.uniform(0.5, 0.65)
        has_handle = rng.random() < 0.9
    elif family in ("oven", "dishwasher"):
        width, height, depth = rng.uniform(0.5, 0.65), rng.uniform(0.5, 0.7), rng.uniform(0.5, 0.6)
        has_handle = rng.random() < (0.9 if family == "oven" else 0.4)
    else:
        width, height, depth = rng.uniform(0.4, 0.7), rng.uniform(0.15, 0.3), rng.uniform(0.4, 0.55)
        has_handle = rng.random() < 0.6

    hw, hh, hd = width / 2.0, height / 2.0, depth / 2.0
    plinth = PLINTHS[family]
    zc = plinth + hh
    top = plinth + height
    inner = depth - WALL
    base = [
        Box.axis_aligned((-hd + WALL / 2, 0.0, zc), (WALL / 2, hw, hh)),
        Box.axis_aligned((WALL / 2, hw - WALL / 2, zc), (inner / 2, WALL / 2, hh)),
        Box.axis_aligned((WALL / 2, -hw + WALL / 2, zc), (inner / 2, WALL / 2, hh)),
        Box.axis_aligned((WALL / 2, 0.0, top - WALL / 2), (inner / 2, hw - WALL, WALL / 2)),
        Box.axis_aligned((WALL / 2, 0.0, plinth + WALL / 2), (inner / 2, hw - WALL, WALL / 2)),
        Box.axis_aligned((-0.025, 0.0, plinth / 2), (hd - 0.025, hw - 0.02, plinth / 2)),
    ]
    panel = Box.axis_aligned((hd + PANEL / 2, 0.0, zc), (PANEL / 2, hw, hh))
    front = hd + PANEL
    handle_x = front + HANDLE_DEPTH / 2

    if family == "microwave":
        joint = (REVOLUTE, (0.0, 0.0, 1.0), (hd, hw, zc), (0.0, rng.uniform(1.4, 1.75)))
        edges = (("edge_top", 2, 1.0), ("edge_bottom", 2, -1.0), ("edge_side", 1, -1.0))
        length = float(np.clip(0.6 * height, 0.12, 0.4))
        handle = Box.axis_aligned((handle_x, -hw + 0.06, zc), (HANDLE_DEPTH / 2, HANDLE_WIDTH / 2, length / 2))
    elif family == "refrigerator":
        joint = (REVOLUTE, (0.0, 0.0, -1.0), (hd, -hw, zc), (0.0, rng.uniform(1.4, 1.75)))
        edges = (("edge_top", 2, 1.0), ("edge_bottom", 2, -1.0), ("edge_side", 1, 1.0))
        length = float(np.clip(0.4 * height, 0.12, 0.4))
        handle = Box.axis_aligned((handle_x, hw - 0.06, zc), (HANDLE_DEPTH / 2, HANDLE_WIDTH / 2, length / 2))
    elif family in ("oven", "dishwasher"):
        joint = (REVOLUTE, (0.0, 1.0, 0.0), (hd, 0.0, plinth), (0.0, rng.uniform(1.3, 1.45)))
        edges = (("edge_top", 2, 1.0), ("edge_side", 1, -1.0), ("edge_side", 1, 1.0))
        length = float(np.clip(0.6 * width, 0.15, 0.45))
        handle = Box.axis_aligned((handle_x, 0.0, top - 0.06), (HANDLE_DEPTH / 2, length / 2, HANDLE_WIDTH / 2))
    else:
        joint = (PRISMATIC, (1.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, rng.uniform(0.25, 0.35)))
        edges = (("edge_top", 2, 1.0), ("edge_bottom", 2, -1.0), ("edge_side", 1, 1.0))
        length = float(np.clip(0.5 * width, 0.12, 0.35))
        handle = Box.axis_aligned((handle_x, 0.0, zc), (HANDLE_DEPTH / 2, length / 2, HANDLE_WIDTH / 2))

    kind, axis, origin, limits = joint
    limits = (float(limits[0]), float(limits[1]))
    spec = JointSpec(kind, axis, origin, limits, limits[1] if q_global_max is None else q_global_max)
    links = (panel, handle) if has_handle else (panel,)

    lo, hi = sweep_bounds(base, links, spec)
    offset = -(lo + hi) / 2.0
    half = float(np.max(hi - lo) / 2.0)

    base = tuple(_shift(box, offset) for box in base)
    panel = _shift(panel, offset)
    handle = _shift(handle, offset) if has_handle else None
    spec = replace(spec, origin=tuple(float(v) for v in np.asarray(origin) + offset))

    return ArticulatedObject(
        id="%s_%03d" % (family, index),
        family=family,
        base_parts=base,
        link_panel=panel,
        handle=handle,
        joint=spec,
        canonical_scale=1.0 / (half + REACH_MARGIN),
        grasp_edges=edges,
    )


def with_global_max(objects):
    """Share ``q_global_max`` per joint kind across a corpus."""
    maxima = {}
    for obj in objects:
        maxima[obj.joint.kind] = max(maxima.get(obj.joint.kind, 0.0), obj.joint.q_max)
    return [replace(obj, joint=replace(obj.joint, q_global_max=maxima[obj.joint.kind])) for obj in objects]


def generate_corpus(count, seed, families=FAMILIES):
    """Generate ``count`` objects cycling through ``families``.

    Every object draws from its own generator
    (``SeedSequence([seed, 0, index])``), so the corpus is deterministic and
    each object is independent of the corpus size.
    """
    objects = []
    for index in range(count):
        family = families[index % len(families)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0, index]))
        objects.append(generate_object(family, index, rng))
    logger.info("generated %d objects (%s)", count, ", ".join(families))
    return with_global_max(objects)


def save_corpus(path, objects):
    with open(path, "w") as f:
        json.dump([obj.to_dict() for obj in objects], f, indent=1, sort_keys=True)


def load_corpus(path):
    with open(path) as f:
        return [ArticulatedObject.from_dict(data) for data in json.load(f)]


def corpus_by_id(objects):
    return dict((obj.id, obj) for obj in objects)
