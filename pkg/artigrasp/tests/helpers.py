import os

import numpy as np

from artigrasp import artobj, graspgen
from artigrasp.config import GraspConfig
from artigrasp.geom import GripperModel

SLOW = bool(os.environ.get("ARTIGRASP_SLOW"))

SMALL_GRASPS = GraspConfig(target=20, min_count=5)

_cache = {}


def handle_door(family="refrigerator"):
    """First ``family`` object with a handle in a seed-0 corpus."""
    key = ("object", family)
    if key not in _cache:
        corpus = artobj.generate_corpus(30, 0)
        _cache[key] = next(obj for obj in corpus if obj.family == family and obj.handle is not None)
    return _cache[key]


def door_labels(joint_index=4, family="refrigerator"):
    """Labels of the handle door at a half open joint state."""
    key = ("labels", family, joint_index)
    if key not in _cache:
        obj = handle_door(family)
        _cache[key] = graspgen.generate_grasps(obj, joint_index, SMALL_GRASPS.target, 0, config=SMALL_GRASPS)
    return _cache[key]


def sphere_grid(resolution=48, radius=0.5, bound=1.1):
    """Analytic sphere distances at the voxel centers of ``[-bound, bound]^3``."""
    axis = -bound + (np.arange(resolution) + 0.5) * (2.0 * bound / resolution)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.sqrt(x ** 2 + y ** 2 + z ** 2) - radius


class SphereDecoder(object):
    """Decodes a sphere of radius 0.5 with a grasp palm at every query point,
    approaching along +z."""

    delta = 0.1

    def __init__(self, fail=False):
        self.fail = fail

    def decode(self, z_s, z_j, x):
        if self.fail:
            raise ArithmeticError("decoder exploded")
        x = np.atleast_2d(x)
        sdf = np.clip((np.linalg.norm(x, axis=1) - 0.5) / self.delta, -0.99, 0.99)
        cp = GripperModel().control_points[None, :, :] + x[:, None, :]
        return sdf, cp
