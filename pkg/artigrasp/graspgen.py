import logging
from collections import Counter, OrderedDict, namedtuple
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from artigrasp import artobj
from artigrasp.config import GraspConfig
from artigrasp.formats import read_json, read_jsonl, write_json, write_jsonl
from artigrasp.geom import GripperModel, Pose, compose, frame_from_axes, grasp_position, inverse

logger = logging.getLogger(__name__)

SOURCES = ("edge_top", "edge_bottom", "edge_side", "handle")

VALID = "valid"
NO_CONTACT = "no_contact"
BAD_ANTIPODAL = "bad_antipodal"
COLLISION = "collision"
TRAJECTORY_BLOCKED = "trajectory_blocked"

LINK_TOLERANCE = 1e-2
EDGE_MARGIN = 0.02
RAY_SAMPLES = 81
NORMAL_STEP = 1e-4

Orientation = namedtuple("Orientation", ["source", "rotation"])


class InsufficientGrasps(RuntimeError):
    pass


@dataclass(frozen=True)
class GraspLabel:
    """Validated grasp for one (object, joint state) pair.

    ``pose`` is the palm pose in the object's canonical frame, in meters.
    """

    pose: Pose
    object_id: str
    joint_index: int
    q: float
    source: str

    def to_record(self):
        return {"object_id": self.object_id, "joint_index": self.joint_index, "q": self.q,
                "pose": self.pose.to_list(), "source": self.source}

    @classmethod
    def from_record(cls, record):
        if record["source"] not in SOURCES:
            raise ValueError("unknown grasp source %r" % record["source"])
        return cls(Pose.from_list(record["pose"]), record["object_id"], int(record["joint_index"]),
                   float(record["q"]), record["source"])


@dataclass(frozen=True)
class ValidationReport:
    verdict: str
    contacts: object = None
    clearance: float = float("nan")
    q: float = None

    @property
    def valid(self):
        return self.verdict == VALID


def floor_sdf(obj):
    """Environment of an object standing alone: the floor under its base."""
    bottom = obj.base_bottom

    def environment(points):
        return np.asarray(points, dtype=float)[..., 2] - bottom

    return environment


def _panel_pose(obj, q):
    return compose(artobj.link_pose(obj, q), obj.link_panel.pose)


def _handle_pose(obj, q):
    return compose(artobj.link_pose(obj, q), obj.handle.pose)


def _handle_axes(handle):
    """Indices of the bar's long axis and of its across axis (local frame)."""
    long_axis = 1 if handle.half_extents[1] >= handle.half_extents[2] else 2
    return long_axis, 3 - long_axis


def candidate_orientations(obj, q, point):
    """All grasp orientation families available on the link at joint state
    ``q``.

    Edge families approach a free edge face against its outward normal and
    close across the panel thickness. The handle family approaches the panel
    face-on and closes across the bar.

    Args:
        obj (ArticulatedObject): Object
        q (float): Joint state
        point (numpy.ndarray): Sampled link surface point (object frame)

    Returns:
        list: :class:`Orientation` tuples ``(source, rotation matrix)``

    Raises:
        ValueError: ``point`` is not on the link surface
    """
    distance = float(artobj.link_sdf(obj, q, np.asarray(point, dtype=float)))
    if abs(distance) >= LINK_TOLERANCE:
        raise ValueError("point %r is %.4g m from the link of %s" % (list(point), distance, obj.id))

    panel = _panel_pose(obj, q).matrix
    normal = panel[:, 0]
    result = []
    for source, axis, sign in obj.grasp_edges:
        outward = sign * panel[:, axis]
        result.append(Orientation(source, frame_from_axes(-outward, normal)))
    if obj.handle is not None:
        _, across = _handle_axes(obj.handle)
        result.append(Orientation("handle", frame_from_axes(-normal, _handle_pose(obj, q).matrix[:, across])))
    return result


def grasp_target(obj, q, source, point, edge=None):
    """Project a surface point onto the region grasped by ``source``.

    Edge families grasp the centerline of the edge face (panel
    mid-thickness); the handle family grasps the centerline of the bar's
    front face. The along-edge coordinate is kept away from the corners.
    """
    if source == "handle":
        pose = _handle_pose(obj, q)
        half = obj.handle.half_extents
        long_axis, across = _handle_axes(obj.handle)
        local = inverse(pose).apply(point)
        local[0] = half[0]
        local[across] = 0.0
        limit = max(half[long_axis] - 0.01, 0.0)
        local[long_axis] = np.clip(local[long_axis], -limit, limit)
        return pose.apply(local)

    _, axis, sign = edge
    pose = _panel_pose(obj, q)
    half = obj.link_panel.half_extents
    other = 3 - axis
    local = inverse(pose).apply(point)
    local[0] = 0.0
    local[axis] = sign * half[axis]
    limit = max(half[other] - EDGE_MARGIN, 0.0)
    local[other] = np.clip(local[other], -limit, limit)
    return pose.apply(local)


def grasp_pose(rotation, position, gripper):
    """Palm pose whose grasp position (see
    :func:`artigrasp.geom.grasp_position`) is ``position``."""
    approach = rotation[:, 2]
    return Pose.from_matrix(rotation, np.asarray(position) - gripper.center_offset * approach)


def _first_hit(obj, q, start, end):
    """First crossing into the link along the segment ``start -> end``."""
    t = np.linspace(0.0, 1.0, RAY_SAMPLES)
    points = start + t[:, None] * (end - start)
    values = artobj.link_sdf(obj, q, points)
    if values[0] <= 0.0:
        return None
    inside = np.nonzero(values <= 0.0)[0]
    if len(inside) == 0:
        return None
    i = inside[0]
    a, b = values[i - 1], values[i]
    s = t[i - 1] + (t[i] - t[i - 1]) * a / (a - b)
    return start + s * (end - start)


def _link_normal(obj, q, point):
    offsets = np.eye(3) * NORMAL_STEP
    samples = np.concatenate([point + offsets, point - offsets])
    values = artobj.link_sdf(obj, q, samples)
    gradient = (values[:3] - values[3:]) / (2.0 * NORMAL_STEP)
    norm = np.linalg.norm(gradient)
    return gradient / norm if norm > 1e-12 else gradient


def gripper_body_points(gripper):
    """50 points on the gripper body in the grasp frame: 10 on the stem, 14
    on the palm bar and 13 along each finger."""
    half = gripper.aperture / 2.0
    stem = np.zeros((10, 3))
    stem[:, 2] = np.linspace(0.0, gripper.palm_depth, 10, endpoint=False)
    bar = np.zeros((14, 3))
    bar[:, 1] = np.linspace(-half, half, 14)
    bar[:, 2] = gripper.palm_depth
    finger = np.linspace(gripper.palm_depth, gripper.reach, 13)
    left = np.stack([np.zeros(13), np.full(13, half), finger], axis=1)
    right = np.stack([np.zeros(13), np.full(13, -half), finger], axis=1)
    return np.concatenate([stem, bar, left, right])


def finger_pad_mask(gripper):
    """Mask of the :func:`gripper_body_points` on the last ``contact_depth``
    of either finger. The pads close on the grasped link, so they are only
    checked against the base and the environment."""
    points = gripper_body_points(gripper)
    mask = np.zeros(len(points), dtype=bool)
    mask[24:] = points[24:, 2] >= gripper.reach - gripper.contact_depth
    return mask


def _check_state(obj, q, g, gripper, environment, config):
    """Contact, antipodal and collision checks at one joint state."""
    cp = g.apply(gripper.control_points)
    left_tip, right_tip = cp[3], cp[4]
    closing = g.matrix[:, 1]

    left_hit = _first_hit(obj, q, left_tip, right_tip)
    right_hit = _first_hit(obj, q, right_tip, left_tip)
    if left_hit is None or right_hit is None:
        return ValidationReport(NO_CONTACT, q=q)
    contacts = np.stack([left_hit, right_hit])

    cone = np.cos(np.radians(config.antipodal_cone_deg))
    if (np.dot(_link_normal(obj, q, left_hit), closing) < cone
            or np.dot(_link_normal(obj, q, right_hit), -closing) < cone):
        return ValidationReport(BAD_ANTIPODAL, contacts, q=q)

    body = g.apply(gripper_body_points(gripper))
    pads = finger_pad_mask(gripper)
    distance = artobj.base_sdf(obj, body)
    distance[~pads] = np.minimum(distance[~pads], artobj.link_sdf(obj, q, body[~pads]))
    if environment is not None:
        distance = np.minimum(distance, environment(body))
    clearance = float(distance.min())
    if clearance <= config.clearance:
        return ValidationReport(COLLISION, contacts, clearance, q=q)
    return ValidationReport(VALID, contacts, clearance, q=q)


def validate_grasp(obj, q, g, gripper, goal_delta, environment=None, config=None):
    """Kinematic check that a flying gripper at ``g`` can move the link.

    The contact, antipodal and collision checks run at ``config.waypoints``
    joint states from ``q`` to ``q + goal_delta`` while the grasp is carried
    rigidly by the link. A failure at ``q`` itself reports that check's
    verdict; a failure further along reports ``trajectory_blocked``.

    Args:
        obj (ArticulatedObject): Object
        q (float): Joint state
        g (Pose): Palm pose in the object frame
        gripper (GripperModel): Gripper
        goal_delta (float): Signed joint motion to achieve
        environment (callable): Optional signed distance of everything
            besides the object (object frame points in, meters out)
        config (GraspConfig): Thresholds

    Returns:
        ValidationReport: Verdict, contacts and clearance at ``q``

    Raises:
        ValueError: ``q`` or ``q + goal_delta`` outside the joint limits
    """
    config = config or GraspConfig()
    artobj.check_joint_state(obj, q)
    artobj.check_joint_state(obj, q + goal_delta)

    first = _check_state(obj, q, g, gripper, environment, config)
    if not first.valid:
        return first

    grasp_in_link = compose(inverse(artobj.link_pose(obj, q)), g)
    for q_k in np.linspace(q, q + goal_delta, config.waypoints)[1:]:
        q_k = float(q_k)
        carried = compose(artobj.link_pose(obj, q_k), grasp_in_link)
        report = _check_state(obj, q_k, carried, gripper, environment, config)
        if not report.valid:
            return ValidationReport(TRAJECTORY_BLOCKED, first.contacts, first.clearance, q=q_k)
    return first


def generate_grasps(obj, q_index, target, seed, gripper=None, config=None, joint_states=8):
    """Sample and validate grasp labels for one (object, joint state) pair.

    Each candidate starts from a link surface point and one of the link's
    orientation families (chosen uniformly), is moved onto the family's
    grasp region and is validated with the labelling goal motion (see
    :func:`artigrasp.artobj.signed_goal_delta`) with the floor under the
    base as environment. Sampling stops at ``target`` labels or after
    ``budget_factor * target`` candidates.

    Args:
        obj (ArticulatedObject): Object
        q_index (int): Index into ``joint_state_set(obj, joint_states)``
        target (int): Number of labels wanted
        seed: Anything accepted by :func:`numpy.random.default_rng`
        gripper (GripperModel): Defaults to ``config.gripper()``
        config (GraspConfig): Counts and thresholds
        joint_states (int): Size of the object's joint state set

    Returns:
        list: :class:`GraspLabel` in sampling order

    Raises:
        ValueError: ``target`` outside ``[min_count, max_count]``
        InsufficientGrasps: Fewer than ``min_count`` labels within the budget
    """
    config = config or GraspConfig()
    gripper = gripper or config.gripper()
    if not config.min_count <= target <= config.max_count:
        raise ValueError("grasp target %d outside [%d, %d]" % (target, config.min_count, config.max_count))

    q = artobj.joint_state_set(obj, joint_states)[q_index]
    delta = artobj.signed_goal_delta(q, obj.joint)
    environment = floor_sdf(obj)

    rng = np.random.default_rng(seed)
    budget = config.budget_factor * target
    points = artobj.surface_points(obj, q, budget, "link_only", seed=int(rng.integers(2 ** 63)))

    labels = []
    verdicts = Counter()
    for point in points:
        families = candidate_orientations(obj, q, point)
        k = int(rng.integers(len(families)))
        source, rotation = families[k]
        # families list the object's edges in order, then the handle
        edge = obj.grasp_edges[k] if source != "handle" else None
        g = grasp_pose(rotation, grasp_target(obj, q, source, point, edge), gripper)
        report = validate_grasp(obj, q, g, gripper, delta, environment, config)
        verdicts[report.verdict] += 1
        if report.valid:
            labels.append(GraspLabel(g, obj.id, q_index, q, source))
            if len(labels) == target:
                break

    logger.debug("%s joint %d: %d labels from %d candidates %s", obj.id, q_index, len(labels),
                 sum(verdicts.values()), dict(sorted(verdicts.items())))
    if len(labels) < config.min_count:
        raise InsufficientGrasps("%s joint %d: %d valid grasps after %d candidates, need %d"
                                 % (obj.id, q_index, len(labels), sum(verdicts.values()), config.min_count))
    return labels


@dataclass(frozen=True)
class CoverageReport:
    counts: dict
    coverage: float
    interest_coverage: float
    cells: frozenset

    @property
    def total(self):
        return sum(self.counts.values())

    def to_dict(self):
        return {"counts": dict(self.counts), "coverage": self.coverage,
                "interest_coverage": self.interest_coverage}


def panel_cell(obj, q, position, cells=8):
    """``(i, j)`` cell of the panel's width x height grid holding the
    projection of ``position``."""
    local = inverse(_panel_pose(obj, q)).apply(position)
    half = obj.link_panel.half_extents
    u = (local[1] / half[1] + 1.0) / 2.0
    v = (local[2] / half[2] + 1.0) / 2.0
    return (int(np.clip(np.floor(u * cells), 0, cells - 1)),
            int(np.clip(np.floor(v * cells), 0, cells - 1)))


def interest_cells(obj, cells=8):
    """Panel cells touching a free edge or the handle footprint."""
    result = set()
    for _, axis, sign in obj.grasp_edges:
        line = cells - 1 if sign > 0 else 0
        for k in range(cells):
            result.add((line, k) if axis == 1 else (k, line))

    if obj.handle is not None:
        half = obj.link_panel.half_extents
        relative = compose(inverse(obj.link_panel.pose), obj.handle.pose)
        extent = np.abs(relative.matrix) @ obj.handle.half_extents
        center = relative.translation
        lo = (center - extent)[1:] / half[1:]
        hi = (center + extent)[1:] / half[1:]
        i0, j0 = [int(np.clip(np.floor((v + 1.0) / 2.0 * cells), 0, cells - 1)) for v in lo]
        i1, j1 = [int(np.clip(np.floor((v + 1.0) / 2.0 * cells), 0, cells - 1)) for v in hi]
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                result.add((i, j))
    return frozenset(result)


def coverage_report(group, obj, gripper=None, cells=8):
    """Per-source counts and link surface coverage of a label group.

    ``coverage`` is the fraction of the ``cells x cells`` panel grid holding
    at least one grasp position; ``interest_coverage`` restricts the grid to
    :func:`interest_cells`.

    Raises:
        ValueError: empty group
    """
    if not group:
        raise ValueError("coverage of an empty grasp group")
    gripper = gripper or GraspConfig().gripper()

    counts = OrderedDict((source, 0) for source in SOURCES)
    occupied = set()
    for label in group:
        counts[label.source] += 1
        occupied.add(panel_cell(obj, label.q, grasp_position(label.pose, gripper), cells))

    interest = interest_cells(obj, cells)
    return CoverageReport(
        counts=counts,
        coverage=len(occupied) / float(cells * cells),
        interest_coverage=len(occupied & interest) / float(len(interest)),
        cells=frozenset(occupied),
    )


class GraspDataset(object):
    """Grasp labels grouped by ``(object_id, joint_index)`` plus an index of
    every attempted pair (counts, coverage and exclusion reasons)."""

    def __init__(self, groups=None, pairs=None, gripper=None):
        self.groups = OrderedDict(groups or ())
        self.pairs = list(pairs or ())
        self.gripper = gripper

    @property
    def labels(self):
        return [label for group in self.groups.values() for label in group]

    def group(self, object_id, joint_index):
        return self.groups.get((object_id, joint_index), [])

    def groups_for(self, object_id):
        return OrderedDict((key, group) for key, group in self.groups.items() if key[0] == object_id)

    def counts(self):
        return OrderedDict((key, len(group)) for key, group in self.groups.items())

    def save(self, labels_path, index_path):
        write_jsonl(labels_path, (label.to_record() for label in self.labels))
        write_json(index_path, {"gripper": self.gripper.to_dict() if self.gripper else None,
                                "pairs": self.pairs})

    @classmethod
    def load(cls, labels_path, index_path=None):
        groups = OrderedDict()
        for record in read_jsonl(labels_path):
            label = GraspLabel.from_record(record)
            groups.setdefault((label.object_id, label.joint_index), []).append(label)

        pairs, gripper = [], None
        if index_path is not None:
            index = read_json(index_path)
            pairs = index["pairs"]
            if index.get("gripper"):
                gripper = GripperModel(**index["gripper"])
        return cls(groups, pairs, gripper)


def _generate_pair(job):
    obj, index, joint_index, seed, config, joint_states = job
    q = artobj.joint_state_set(obj, joint_states)[joint_index]
    entry = {"object_id": obj.id, "joint_index": joint_index, "q": q, "count": 0,
             "counts": None, "coverage": None, "interest_coverage": None, "excluded": None}
    rng = np.random.SeedSequence([seed, 1, index, joint_index])
    gripper = config.gripper()
    try:
        labels = generate_grasps(obj, joint_index, config.target, rng, gripper, config, joint_states)
    except InsufficientGrasps as e:
        entry["excluded"] = str(e)
        return None, entry

    report = coverage_report(labels, obj, gripper, config.cells)
    entry.update(count=len(labels), **report.to_dict())
    if report.interest_coverage < config.min_interest_coverage:
        entry["excluded"] = "interest coverage %.3f below %.3f" % (report.interest_coverage,
                                                                   config.min_interest_coverage)
        return None, entry
    return labels, entry


def generate_dataset(objects, config, seed, workers=1, joint_states=8):
    """Run :func:`generate_grasps` for every (object, joint state) pair.

    Pairs with too few labels or too little interest coverage are excluded
    and the reason is kept in the index. Pair ``(i, j)`` draws from
    ``SeedSequence([seed, 1, i, j])``, so the result does not depend on
    ``workers``.

    Args:
        objects (list): Corpus
        config (GraspConfig): Counts and thresholds
        seed (int): Run seed
        workers (int): Worker processes (1 runs in-process)
        joint_states (int): Joint states per object

    Returns:
        GraspDataset: Accepted groups in corpus order
    """
    jobs = [(obj, i, j, seed, config, joint_states)
            for i, obj in enumerate(objects) for j in range(joint_states)]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_pair, jobs))
    else:
        results = [_generate_pair(job) for job in jobs]

    dataset = GraspDataset(gripper=config.gripper())
    for labels, entry in results:
        dataset.pairs.append(entry)
        if labels is None:
            logger.warning("excluded %s joint %d: %s", entry["object_id"], entry["joint_index"], entry["excluded"])
            continue
        dataset.groups[(entry["object_id"], entry["joint_index"])] = labels

    logger.info("grasp dataset: %d labels in %d of %d pairs", len(dataset.labels), len(dataset.groups), len(jobs))
    return dataset
