"""
Success metrics and the evaluation harness.

A predicted grasp is scored twice:

* **SR**: the grasp is executed by the kinematic validator toward the
  goal direction of the object's joint state, and succeeds when the joint
  moves by at least 10 degrees (revolute) or ``0.05 * q_global_max``
  (prismatic).
* **RSR**: the grasp position lies within 10% of the initial distance of
  some ground-truth label.

See also: :func:`artigrasp.graspgen.validate_grasp`
"""

import logging
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from artigrasp import artobj, graspgen, pipeline
from artigrasp.config import Config, EvalConfig, GraspConfig
from artigrasp.formats import ensure_dir, write_json, write_jsonl
from artigrasp.geom import compose, grasp_position, grasp_positions, inverse
from artigrasp.scene import SceneGeometry

logger = logging.getLogger(__name__)

OPEN = "open"
CLOSE = "close"

METHODS = ("encoder", "oracle")
DEPTHS = ("gt_depth", "noisy_depth")
SUCCESS_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GoalSpec:
    """Goal direction and signed joint motion (radians or meters)."""

    direction: str
    delta: float


def goal_for(q, joint):
    """Goal at joint state ``q``.

    >>> import numpy as np
    >>> from artigrasp.artobj import JointSpec
    >>> from artigrasp.evaluation import goal_for
    >>> door = JointSpec("revolute", (0, 0, 1), (0, 0, 0), (0.0, np.pi / 2), np.pi / 2)
    >>> goal_for(np.radians(70), door).direction, goal_for(np.radians(20), door).direction
    ('close', 'open')
    """
    delta = artobj.signed_goal_delta(q, joint)
    return GoalSpec(CLOSE if delta < 0 else OPEN, delta)


def _units(joint, value):
    return float(np.degrees(value)) if joint.kind == artobj.REVOLUTE else float(value)


def execute_grasp(obj, q, grasp, goal, gripper=None, environment=None, grasp_config=None, config=None):
    """Largest joint motion toward the goal the grasp can carry.

    Bisects the motion magnitude between 0 and ``|goal.delta|`` down to
    ``angle_resolution_deg`` (revolute) or ``distance_resolution``
    (prismatic), each step running :func:`artigrasp.graspgen.validate_grasp`
    over the carried trajectory.

    Args:
        obj (ArticulatedObject): Object
        q (float): Joint state
        grasp (Pose): Palm pose in the object frame
        goal (GoalSpec): Goal from :func:`goal_for`
        environment (callable): Signed distance of everything else, object
            frame points in

    Returns:
        float: Motion in degrees (revolute) or meters (prismatic); 0 when the
        grasp does not hold at ``q``
    """
    config = config or EvalConfig()
    grasp_config = grasp_config or GraspConfig()
    gripper = gripper or grasp_config.gripper()
    sign = -1.0 if goal.direction == CLOSE else 1.0
    full = abs(goal.delta)

    def feasible(amount):
        try:
            report = graspgen.validate_grasp(obj, q, grasp, gripper, sign * amount, environment, grasp_config)
        except ValueError:
            return False
        return report.valid

    if not feasible(0.0):
        return 0.0
    if feasible(full):
        return _units(obj.joint, full)

    if obj.joint.kind == artobj.REVOLUTE:
        resolution = np.radians(config.angle_resolution_deg)
    else:
        resolution = config.distance_resolution
    lo, hi = 0.0, full
    while hi - lo > resolution:
        middle = (lo + hi) / 2.0
        if feasible(middle):
            lo = middle
        else:
            hi = middle
    return _units(obj.joint, lo)


def success(moved, joint):
    """True when ``moved`` (degrees or meters) reaches the success threshold.

    >>> from artigrasp.artobj import JointSpec
    >>> from artigrasp.evaluation import success
    >>> door = JointSpec("revolute", (0, 0, 1), (0, 0, 0), (0.0, 1.5), 1.5)
    >>> success(15.0, door), success(5.0, door), success(10.0, door)
    (True, False, True)
    """
    if moved < 0:
        raise ValueError("moved amount must be >= 0, got %r" % moved)
    if joint.kind == artobj.REVOLUTE:
        threshold = 10.0
    else:
        threshold = 0.05 * joint.q_global_max
    return moved >= threshold - SUCCESS_TOLERANCE


def relaxed_success(position, label_positions, initial_distance, fraction=0.1):
    """True when ``position`` is closer than ``fraction * initial_distance``
    to some label position.

    >>> from artigrasp.evaluation import relaxed_success
    >>> relaxed_success([0.3, 0, 0], [[0, 0, 0]], 1.0), relaxed_success([0.09, 0, 0], [[0, 0, 0]], 1.0)
    (False, True)

    Raises:
        ValueError: No labels or ``initial_distance`` <= 0
    """
    label_positions = np.asarray(label_positions, dtype=float).reshape(-1, 3)
    if len(label_positions) == 0:
        raise ValueError("relaxed success needs at least one label")
    if not initial_distance > 0:
        raise ValueError("initial distance must be > 0, got %r" % initial_distance)
    distance = np.min(np.linalg.norm(label_positions - np.asarray(position, dtype=float), axis=1))
    return bool(distance < fraction * initial_distance)


@dataclass
class EvalRecord:
    condition: str
    scene_id: str
    frame: str
    object_index: int
    object_id: str
    grasp: list
    label_distance: float
    moved: float
    sr_success: bool
    rsr_success: bool

    def to_dict(self):
        return asdict(self)


def condition_name(method, depth, icp):
    return "%s%s/%s" % (method, "+icp" if icp else "", depth)


def conditions(icp_modes=(False, True), methods=METHODS, depths=DEPTHS):
    """Every (method, icp, depth) combination in table order."""
    return [(method, icp, depth) for method in methods for icp in icp_modes for depth in depths]


def visible_objects(record):
    """Indices of scene objects with at least one mask pixel."""
    present = set(int(v) for v in np.unique(record.frame.mask))
    return [k for k in range(len(record.scene.objects)) if k + 1 in present]


def match_detections(reconstructions, centers, radius):
    """Greedy nearest matching of reconstructions to camera-frame object
    centers.

    Returns:
        dict: Object index to reconstruction
    """
    pairs = []
    for k, center in centers.items():
        for recon in reconstructions:
            distance = float(np.linalg.norm(recon.pose.translation - center))
            if distance < radius:
                pairs.append((distance, k, recon.index, recon))
    pairs.sort(key=lambda p: p[:3])
    matched, used = {}, set()
    for _, k, index, recon in pairs:
        if k not in matched and index not in used:
            matched[k] = recon
            used.add(index)
    return matched


def score_grasp(record, k, world_grasp, objects, dataset, geometry, condition="", config=None,
                grasp_config=None):
    """Score one predicted grasp (world frame, or None) for scene object ``k``.

    Raises:
        KeyError: No labels for the object's joint state
    """
    config = config or EvalConfig()
    grasp_config = grasp_config or GraspConfig()
    gripper = grasp_config.gripper()
    placed = record.scene.objects[k]
    obj = objects[placed.object_id]
    labels = dataset.group(placed.object_id, placed.joint_index)
    if not labels:
        raise KeyError("no grasp labels for %s joint %d" % (placed.object_id, placed.joint_index))

    label_positions = placed.pose.apply(grasp_positions([label.pose for label in labels], gripper))
    fields = dict(condition=condition, scene_id=record.scene.id, frame=os.path.basename(record.path or ""),
                  object_index=k, object_id=placed.object_id)
    if world_grasp is None:
        return EvalRecord(grasp=None, label_distance=None, moved=0.0, sr_success=False,
                          rsr_success=False, **fields)

    position = grasp_position(world_grasp, gripper)
    distances = np.linalg.norm(label_positions - position, axis=1)
    nearest = int(np.argmin(distances))
    if config.rsr_initial is not None:
        initial = config.rsr_initial
    else:
        initial = float(np.linalg.norm(label_positions[nearest] - record.camera.origin))
    rsr = relaxed_success(position, label_positions, initial, config.rsr_fraction)

    grasp = compose(inverse(placed.pose), world_grasp)
    goal = goal_for(placed.q, obj.joint)
    moved = execute_grasp(obj, placed.q, grasp, goal, gripper, geometry.environment_for(k), grasp_config, config)
    return EvalRecord(grasp=world_grasp.to_list(), label_distance=float(distances[nearest]), moved=moved,
                      sr_success=success(moved, obj.joint), rsr_success=rsr, **fields)


def label_predictions(record, dataset, objects, config=None, grasp_config=None):
    """Stored labels of every visible object, as world-frame grasps.

    Labels are validated with the object standing alone, so each one is
    executed again with the scene's walls and neighbours around it; the
    first that still reaches the success threshold is used. When none does,
    the first stored label is returned and scores as a failure.
    """
    config = config or EvalConfig()
    grasp_config = grasp_config or GraspConfig()
    gripper = grasp_config.gripper()
    geometry = SceneGeometry(record.scene, objects)
    predictions = {}
    for k in visible_objects(record):
        placed = record.scene.objects[k]
        labels = dataset.group(placed.object_id, placed.joint_index)
        if not labels:
            continue
        obj = objects[placed.object_id]
        goal = goal_for(placed.q, obj.joint)
        environment = geometry.environment_for(k)
        chosen = next((label for label in labels
                       if success(execute_grasp(obj, placed.q, label.pose, goal, gripper, environment,
                                                grasp_config, config), obj.joint)), None)
        if chosen is None:
            logger.debug("%s: no label of %s succeeds in the scene", record.path, placed.object_id)
            chosen = labels[0]
        predictions[k] = compose(placed.pose, chosen.pose)
    return predictions


def evaluate_predictions(record, predictions, objects, dataset, condition="", config=None, grasp_config=None):
    """Records for every visible object of a frame given world-frame grasps
    keyed by object index (missing keys score as failures)."""
    geometry = SceneGeometry(record.scene, objects)
    return [score_grasp(record, k, predictions.get(k), objects, dataset, geometry, condition, config, grasp_config)
            for k in visible_objects(record)]


def predict_grasps(record, decoder, encoder, method, depth_name, icp, config):
    """World-frame best grasp per matched scene object."""
    frame = record.frame
    depth = frame.depth
    if depth_name == "noisy_depth":
        if frame.noisy_depth is None:
            logger.warning("%s has no noisy depth, using the rendered one", record.path)
        else:
            depth = frame.noisy_depth

    recons = pipeline.reconstruct_scene(
        frame, record.camera, decoder,
        encoder=encoder if method == "encoder" else None,
        targets=record.targets if method == "oracle" else None,
        config=config.pipeline, encoder_config=config.encoder, depth=depth, icp=icp)

    world_from_camera = record.camera.world_from_camera
    centers = dict((k, compose(record.camera.camera_from_world, record.scene.objects[k].pose).translation)
                   for k in visible_objects(record))
    matched = match_detections(recons, centers, config.evaluation.match_radius)
    predictions = {}
    for k, recon in matched.items():
        best = recon.best_grasp()
        if best is not None:
            predictions[k] = compose(world_from_camera, best[0])
    return predictions


def summarize(records):
    """``{condition: {"SR", "RSR", "n"}}`` in first-seen condition order."""
    groups = OrderedDict()
    for r in records:
        groups.setdefault(r.condition, []).append(r)
    metrics = OrderedDict()
    for condition, group in groups.items():
        metrics[condition] = OrderedDict([
            ("SR", sum(r.sr_success for r in group) / float(len(group))),
            ("RSR", sum(r.rsr_success for r in group) / float(len(group))),
            ("n", len(group)),
        ])
    return metrics


def format_table(metrics):
    """Plain-text grid: one row per method, SR and RSR under GT-depth and
    Noisy-depth."""
    rows = OrderedDict()
    for condition, values in metrics.items():
        method, depth = condition.split("/")
        rows.setdefault(method, {})[depth] = values

    def cell(values, key):
        return "%6.3f" % values[key] if values else "%6s" % "-"

    lines = ["%-14s | %-15s | %-15s" % ("", "GT-depth", "Noisy-depth"),
             "%-14s | %6s %8s | %6s %8s" % ("Method", "SR", "RSR", "SR", "RSR")]
    lines.append("-" * len(lines[1]))
    for method, depths in rows.items():
        gt, noisy = depths.get("gt_depth"), depths.get("noisy_depth")
        lines.append("%-14s | %s %8s | %s %8s" % (method, cell(gt, "SR"), cell(gt, "RSR").strip(),
                                                  cell(noisy, "SR"), cell(noisy, "RSR").strip()))
    return "\n".join(lines) + "\n"


def evaluate(records, objects, dataset, decoder, encoder=None, config=None, modes=None):
    """Run the evaluation grid over frames.

    Frames whose visible objects lack labels are skipped and reported. The
    encoder method is skipped without an encoder.

    Args:
        records (list): :class:`artigrasp.scene.FrameRecord`
        objects (dict): Object id to object
        dataset (artigrasp.graspgen.GraspDataset): Ground-truth labels
        decoder (artigrasp.sgdf.DecoderModel): Trained decoder
        encoder (artigrasp.percept.EncoderModel): Trained encoder or None
        config (artigrasp.config.Config): Full configuration
        modes (list): ``(method, icp, depth)`` tuples, all by default

    Returns:
        tuple: ``(metrics, records, skipped)``
    """
    config = config or Config()
    modes = modes or conditions()
    if encoder is None:
        dropped = [m for m in modes if m[0] == "encoder"]
        if dropped:
            logger.warning("no encoder, skipping %d encoder condition(s)", len(dropped))
        modes = [m for m in modes if m[0] != "encoder"]

    results, skipped = [], []
    for record in records:
        missing = [record.scene.objects[k].object_id for k in visible_objects(record)
                   if not dataset.group(record.scene.objects[k].object_id, record.scene.objects[k].joint_index)]
        if missing:
            logger.warning("%s: no labels for %s, skipped", record.path, ", ".join(missing))
            skipped.append({"frame": record.path, "missing": missing})
            continue
        for method, icp, depth in modes:
            name = condition_name(method, depth, icp)
            predictions = predict_grasps(record, decoder, encoder, method, depth, icp, config)
            results.extend(evaluate_predictions(record, predictions, objects, dataset, name,
                                                config.evaluation, config.grasp))
        logger.info("%s: evaluated %d condition(s)", record.path, len(modes))
    return summarize(results), results, skipped


def write_metrics(path, metrics, records, skipped=()):
    """``metrics.json``, ``metrics.txt`` and ``records.jsonl`` below ``path``."""
    ensure_dir(path)
    names = [os.path.join(path, name) for name in ("metrics.json", "metrics.txt", "records.jsonl")]
    write_json(names[0], {"conditions": metrics, "skipped": list(skipped)})
    with open(names[1], "w") as f:
        f.write(format_table(metrics))
    write_jsonl(names[2], [r.to_dict() for r in records])
    return names
