import numpy as np
from scipy.spatial.transform import Rotation


def _rotation_to_quat(rotation):
    # scipy keeps quaternions scalar-last
    x, y, z, w = rotation.as_quat()
    return np.array([w, x, y, z])


def _quat_to_rotation(quat):
    return Rotation.from_quat([quat[1], quat[2], quat[3], quat[0]])


class Pose(object):
    """Rigid transform made of a unit quaternion ``(w, x, y, z)`` and a
    translation in meters.

    Rotations are active and right-handed; a pose maps points from its local
    frame into its parent frame.

    >>> import numpy as np
    >>> from artigrasp.geom import Pose
    >>> p = Pose.from_axis_angle([0, 0, 1], np.pi / 2, [1.0, 0.0, 0.0])
    >>> (np.round(p.apply([1.0, 0.0, 0.0]), 9) + 0.0).tolist()
    [1.0, 1.0, 0.0]

    See also:
        * Quaternions and spatial rotation: https://en.wikipedia.org/wiki/Quaternions_and_spatial_rotation
    """

    __slots__ = ("rotation", "translation", "_matrix")

    def __init__(self, rotation=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        quat = np.asarray(rotation, dtype=float).reshape(4)
        trans = np.asarray(translation, dtype=float).reshape(3)

        if not (np.all(np.isfinite(quat)) and np.all(np.isfinite(trans))):
            raise ValueError("pose contains non-finite values: %r %r" % (quat, trans))

        norm = np.linalg.norm(quat)
        if norm < 1e-12:
            raise ValueError("zero quaternion is not a rotation")

        # unit quaternions are stored as given; from_list(to_list()) is exact
        self.rotation = quat if abs(norm - 1.0) < 1e-12 else quat / norm
        self.translation = trans
        self._matrix = None

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, rotation_matrix, translation=(0.0, 0.0, 0.0)):
        """Build a pose from a 3x3 rotation matrix (re-orthonormalized by
        scipy) and a translation."""
        rotation = Rotation.from_matrix(np.asarray(rotation_matrix, dtype=float))
        return cls(_rotation_to_quat(rotation), translation)

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls(_rotation_to_quat(Rotation.from_rotvec(axis * angle)), translation)

    @classmethod
    def from_list(cls, values):
        """Inverse of :meth:`to_list`: ``[qw, qx, qy, qz, tx, ty, tz]``."""
        values = list(values)
        if len(values) != 7:
            raise ValueError("pose needs 7 numbers, got %d" % len(values))
        return cls(values[:4], values[4:])

    def to_list(self):
        return [float(v) for v in self.rotation] + [float(v) for v in self.translation]

    @property
    def matrix(self):
        """3x3 rotation matrix (cached)."""
        if self._matrix is None:
            self._matrix = _quat_to_rotation(self.rotation).as_matrix()
        return self._matrix

    def homogeneous(self):
        result = np.eye(4)
        result[:3, :3] = self.matrix
        result[:3, 3] = self.translation
        return result

    def apply(self, points):
        """Transform a point or an ``(N, 3)`` array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.matrix.T + self.translation

    def apply_vector(self, vectors):
        """Rotate directions (no translation)."""
        return np.asarray(vectors, dtype=float) @ self.matrix.T

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return "Pose(%s)" % ", ".join("%.6g" % v for v in self.to_list())


def compose(a, b):
    """Compose two poses so that the result applies ``b`` first, then ``a``.

    >>> import numpy as np
    >>> from artigrasp.geom import Pose, compose
    >>> rot = Pose.from_axis_angle([0, 0, 1], np.pi / 2)
    >>> shift = Pose(translation=[1.0, 0.0, 0.0])
    >>> (np.round(compose(rot, shift).apply([0.0, 0.0, 0.0]), 9) + 0.0).tolist()
    [0.0, 1.0, 0.0]

    Args:
        a (Pose): Outer transform
        b (Pose): Inner transform

    Returns:
        Pose: ``a ∘ b``
    """
    rotation = _quat_to_rotation(a.rotation) * _quat_to_rotation(b.rotation)
    translation = a.matrix @ b.translation + a.translation
    return Pose(_rotation_to_quat(rotation), translation)


def inverse(p):
    rot_t = p.matrix.T
    quat = p.rotation.copy()
    quat[1:] = -quat[1:]
    return Pose(quat, -rot_t @ p.translation)


def transform_point(p, x):
    """Apply ``R·x + t``; ``x`` may be a single point or an ``(N, 3)`` array."""
    return p.apply(x)


def rotation_angle(a, b):
    """Geodesic angle in radians between the rotations of two poses (or two
    rotation matrices)."""
    ra = a.matrix if isinstance(a, Pose) else np.asarray(a)
    rb = b.matrix if isinstance(b, Pose) else np.asarray(b)
    cos = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def random_pose(rng, translation_scale=1.0):
    quat = rng.normal(size=4)
    return Pose(quat, rng.uniform(-translation_scale, translation_scale, size=3))


def rotation_to_6d(rotation_matrix):
    """First two columns of a rotation matrix, column-major (6 numbers)."""
    rotation_matrix = np.asarray(rotation_matrix, dtype=float)
    return np.concatenate([rotation_matrix[:, 0], rotation_matrix[:, 1]])


def rotation_from_6d(values):
    """Gram-Schmidt re-orthonormalization of a 6-number rotation encoding.

    Raises:
        ValueError: The two columns are (nearly) parallel or zero
    """
    values = np.asarray(values, dtype=float)
    a, b = values[:3], values[3:6]
    na = np.linalg.norm(a)
    if na < 1e-9:
        raise ValueError("degenerate 6D rotation: zero first column")
    x = a / na
    b = b - np.dot(x, b) * x
    nb = np.linalg.norm(b)
    if nb < 1e-9:
        raise ValueError("degenerate 6D rotation: parallel columns")
    y = b / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1)


class GripperModel(object):
    """Parallel-jaw gripper and its 5-point skeleton.

    Control points, in the grasp frame (approach = +z, closing = y):

    ====  =====================  ===================================
    idx   name                   position
    ====  =====================  ===================================
    0     palm origin            (0, 0, 0)
    1     left finger base       (0, +aperture/2, palm_depth)
    2     right finger base      (0, -aperture/2, palm_depth)
    3     left fingertip         (0, +aperture/2, palm_depth + finger_length)
    4     right fingertip        (0, -aperture/2, palm_depth + finger_length)
    ====  =====================  ===================================

    ``contact_depth`` is how far the fingertips reach past the grasped
    surface; the grasp position (see :func:`grasp_position`) sits that far
    back from the fingertip midpoint.

    See also:
        * Contact-GraspNet control point representation: https://arxiv.org/abs/2103.14127
    """

    def __init__(self, aperture=0.08, finger_length=0.05, palm_depth=0.06, contact_depth=0.015):
        for name, value in (("aperture", aperture), ("finger_length", finger_length),
                            ("palm_depth", palm_depth)):
            if not value > 0:
                raise ValueError("gripper %s must be > 0, got %r" % (name, value))
        if not 0 <= contact_depth < finger_length:
            raise ValueError("contact_depth must lie in [0, finger_length), got %r" % contact_depth)

        self.aperture = float(aperture)
        self.finger_length = float(finger_length)
        self.palm_depth = float(palm_depth)
        self.contact_depth = float(contact_depth)

        half = self.aperture / 2.0
        tip = self.palm_depth + self.finger_length
        self.control_points = np.array([
            [0.0, 0.0, 0.0],
            [0.0, half, self.palm_depth],
            [0.0, -half, self.palm_depth],
            [0.0, half, tip],
            [0.0, -half, tip],
        ])

    @property
    def reach(self):
        """Distance from the palm origin to the fingertip midpoint."""
        return self.palm_depth + self.finger_length

    @property
    def center_offset(self):
        """Distance from the palm origin to the grasp position."""
        return self.reach - self.contact_depth

    def to_dict(self):
        return {"aperture": self.aperture, "finger_length": self.finger_length,
                "palm_depth": self.palm_depth, "contact_depth": self.contact_depth}

    def __repr__(self):
        return "GripperModel(%r)" % self.to_dict()


def check_control_points(points):
    """Validate a ControlPoints array: exactly 5 finite 3D points."""
    points = np.asarray(points, dtype=float)
    if points.shape[-2:] != (5, 3):
        raise ValueError("control points must have shape (5, 3), got %r" % (points.shape,))
    if not np.all(np.isfinite(points)):
        raise ValueError("control points contain non-finite values")
    return points


def grasp_control_points(g, gripper):
    """Move the gripper's canonical control points by grasp pose ``g``.

    Args:
        g (Pose): Grasp pose (palm origin frame)
        gripper (GripperModel): Gripper whose skeleton is used

    Returns:
        numpy.ndarray: ``(5, 3)`` control points, order preserved
    """
    return g.apply(gripper.control_points)


def control_point_distance(a, b):
    """Mean over the 5 points of the per-point L1 norm of ``a - b``.

    Works on single ``(5, 3)`` arrays or batches ``(..., 5, 3)``.

    >>> import numpy as np
    >>> from artigrasp.geom import control_point_distance
    >>> a = np.zeros((5, 3))
    >>> float(control_point_distance(a, a + [0.1, 0.0, 0.0]))
    0.1
    """
    diff = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    return diff.sum(axis=-1).mean(axis=-1)


def grasp_position(g, gripper):
    """Point on the grasped surface associated with grasp pose ``g``."""
    return g.apply(np.array([0.0, 0.0, gripper.center_offset]))


def grasp_positions(poses, gripper):
    if not poses:
        return np.zeros((0, 3))
    return np.array([grasp_position(p, gripper) for p in poses])


class DegenerateControlPoints(ValueError):
    pass


def pose_from_control_points(points):
    """Recover a grasp pose from 5 (possibly noisy, possibly scaled) control
    points.

    The translation is the palm point. The approach axis is the least-squares
    direction from the palm through the finger bases and tips. The closing axis
    averages the two left-minus-right finger differences, orthogonalized
    against the approach.

    Raises:
        DegenerateControlPoints: The points do not span an approach and a
            closing direction (e.g. collinear points)
    """
    points = check_control_points(points)
    palm = points[0]
    base_mid = (points[1] + points[2]) / 2.0
    tip_mid = (points[3] + points[4]) / 2.0

    approach = (base_mid - palm) + (tip_mid - palm)
    norm = np.linalg.norm(approach)
    if norm < 1e-9:
        raise DegenerateControlPoints("no approach direction in control points")
    z = approach / norm

    closing = (points[1] - points[2]) + (points[3] - points[4])
    closing = closing - np.dot(closing, z) * z
    norm = np.linalg.norm(closing)
    if norm < 1e-9:
        raise DegenerateControlPoints("closing direction collinear with approach")
    y = closing / norm
    x = np.cross(y, z)

    return Pose.from_matrix(np.stack([x, y, z], axis=1), palm)


def frame_from_axes(approach, closing):
    """Rotation matrix whose z column is ``approach`` and y column is
    ``closing`` (orthogonalized)."""
    z = np.asarray(approach, dtype=float)
    z = z / np.linalg.norm(z)
    y = np.asarray(closing, dtype=float)
    y = y - np.dot(y, z) * z
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return np.stack([x, y, z], axis=1)
