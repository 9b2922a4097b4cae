"""
Run configuration.

One frozen dataclass per section; a JSON file overrides any subset of the
defaults::

    {"grasp": {"target": 150}, "scene": {"walls": false}}

Unknown sections or keys are rejected so that a typo never silently falls
back to a default.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from artigrasp.artobj import FAMILIES
from artigrasp.geom import GripperModel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectsConfig:
    count: int = 10
    families: tuple = FAMILIES
    joint_states: int = 8


@dataclass(frozen=True)
class GraspConfig:
    target: int = 100
    min_count: int = 20
    max_count: int = 500
    budget_factor: int = 50
    antipodal_cone_deg: float = 30.0
    clearance: float = 0.002
    waypoints: int = 5
    cells: int = 8
    min_interest_coverage: float = 0.1
    aperture: float = 0.08
    finger_length: float = 0.05
    palm_depth: float = 0.06
    contact_depth: float = 0.015

    def gripper(self):
        return GripperModel(self.aperture, self.finger_length, self.palm_depth, self.contact_depth)


@dataclass(frozen=True)
class SgdfConfig:
    samples: int = 20000
    near_fraction: float = 0.8
    sigmas: tuple = (0.01, 0.05)
    bound: float = 1.1


@dataclass(frozen=True)
class DecoderConfig:
    width: int = 128
    layers: int = 8
    code_dim: int = 32
    dropout: float = 0.2
    delta: float = 0.1
    w_sdf: float = 1.0
    w_grasp: float = 1.0
    w_code: float = 1e-4
    epochs: int = 600
    batch_size: int = 2048
    lr_max: float = 1e-3
    lr_min: float = 2.5e-4
    lr_decay: float = 0.5
    code_init_std: float = 0.01


@dataclass(frozen=True)
class SceneConfig:
    count: int = 50
    min_objects: int = 1
    max_objects: int = 3
    single_object: bool = False
    walls: bool = True
    room_half_extent: float = 3.0
    room_height: float = 2.5
    clearance: float = 0.02
    yaw_range_deg: float = 30.0
    placement_retries: int = 200
    cameras: int = 4
    width: int = 96
    height: int = 96
    fov_deg: float = 55.0
    camera_distance: tuple = (1.6, 2.4)
    camera_height: tuple = (0.8, 1.5)
    light: tuple = (-0.4, -0.3, 0.87)
    max_steps: int = 128
    hit_tolerance: float = 1e-4
    max_range: float = 10.0
    heat_cov_scale: float = 0.25


@dataclass(frozen=True)
class NoiseConfig:
    sigma0: float = 0.002
    sigma1: float = 0.003
    grazing_incidence: float = 0.2
    dropout: float = 0.5


@dataclass(frozen=True)
class EncoderConfig:
    patch: int = 9
    stride: int = 4
    hidden: tuple = (256, 256, 256)
    epochs: int = 30
    batch_size: int = 2048
    lr: float = 1e-3
    w_heat: float = 1.0
    w_pose: float = 1.0
    w_shape: float = 1.0
    w_joint: float = 1.0
    jitter: bool = True
    brightness: float = 0.1
    contrast: float = 0.2
    validation_fraction: float = 0.2
    threshold: float = 0.3
    nms_radius: int = 5


@dataclass(frozen=True)
class PipelineConfig:
    resolution: int = 48
    epsilon: float = 0.025
    dedup_distance: float = 0.02
    dedup_angle_deg: float = 10.0
    icp_iterations: int = 30
    icp_tolerance: float = 1e-5
    icp_min_points: int = 50
    icp_surface_points: int = 2000
    workers: int = 1


@dataclass(frozen=True)
class EvalConfig:
    match_radius: float = 0.3
    rsr_fraction: float = 0.1
    rsr_initial: float = None
    angle_resolution_deg: float = 0.5
    distance_resolution: float = 0.001


@dataclass(frozen=True)
class Config:
    objects: ObjectsConfig = field(default_factory=ObjectsConfig)
    grasp: GraspConfig = field(default_factory=GraspConfig)
    sgdf: SgdfConfig = field(default_factory=SgdfConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return asdict(self)


def _section(cls, name, values):
    if not isinstance(values, dict):
        raise ConfigError("config section %r must be an object, got %r" % (name, values))

    known = dict((f.name, f) for f in fields(cls))
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError("unknown key %r in config section %r" % (key, name))
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data):
    """Build a :class:`Config` from a (partial) dictionary of sections.

    >>> from artigrasp.config import config_from_dict
    >>> config_from_dict({"grasp": {"target": 50}}).grasp.target
    50
    >>> config_from_dict({"grasp": {"tagret": 50}})
    Traceback (most recent call last):
    ...
    artigrasp.config.ConfigError: unknown key 'tagret' in config section 'grasp'

    Raises:
        ConfigError: unknown section or key
    """
    sections = dict((f.name, f) for f in fields(Config))
    config = Config()
    for name, values in data.items():
        if name not in sections:
            raise ConfigError("unknown config section %r" % name)
        section_type = type(getattr(config, name))
        config = replace(config, **{name: _section(section_type, name, values)})
    _check(config)
    return config


def _check(config):
    grasp = config.grasp
    if not 1 <= grasp.min_count <= grasp.target <= grasp.max_count:
        raise ConfigError("grasp counts must satisfy 1 <= min_count <= target <= max_count, got %d/%d/%d"
                          % (grasp.min_count, grasp.target, grasp.max_count))
    if not 2 <= config.objects.joint_states <= 16:
        raise ConfigError("objects.joint_states must lie in [2, 16], got %r" % config.objects.joint_states)
    if not 0 <= config.decoder.dropout < 1:
        raise ConfigError("decoder.dropout must lie in [0, 1), got %r" % config.decoder.dropout)
    if config.pipeline.resolution < 8:
        raise ConfigError("pipeline.resolution must be >= 8, got %r" % config.pipeline.resolution)
    if not 1 <= config.scene.min_objects <= config.scene.max_objects:
        raise ConfigError("scene object counts must satisfy 1 <= min_objects <= max_objects")
    if config.encoder.patch % 2 != 1:
        raise ConfigError("encoder.patch must be odd, got %r" % config.encoder.patch)


def load_config(path=None):
    """Defaults, overridden by the JSON file at ``path`` if given."""
    if path is None:
        return Config()
    try:
        with open(path) as f:
            data = json.load(f)
    except ValueError as e:
        raise ConfigError("cannot parse config %s: %s" % (path, e))
    if not isinstance(data, dict):
        raise ConfigError("config %s must hold a JSON object" % path)
    return config_from_dict(data)


def config_hash(config):
    """SHA-256 of the canonical JSON dump of ``config``."""
    text = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
