import logging
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import maximum_filter

from artigrasp import net
from artigrasp.config import EncoderConfig
from artigrasp.geom import Pose, rotation_from_6d

logger = logging.getLogger(__name__)

OUTPUTS = 44
TAG = "percept-v1"
HEAT, POSE, SHAPE, JOINT = slice(0, 1), slice(1, 11), slice(11, 43), slice(43, 44)


def feature_size(patch):
    return 2 * patch * patch + 5


def pixel_features(depth, shaded, camera, pixels=None, patch=9, stride=4):
    """Per-pixel encoder input.

    For each pixel: a ``patch x patch`` grid of depth values and one of
    shaded values sampled every ``stride`` pixels around it (indices clamped
    at the border), the pixel center in ``[-1, 1]`` image coordinates and the
    unit camera ray through it.

    Args:
        depth (numpy.ndarray): ``(H, W)`` depth in meters
        shaded (numpy.ndarray): ``(H, W)`` shading in ``[0, 1]``
        camera (artigrasp.scene.Camera): Intrinsics of the frame
        pixels (tuple): ``(rows, cols)`` to featurize; all pixels if omitted

    Returns:
        numpy.ndarray: ``(N, 2 * patch^2 + 5)`` features
    """
    height, width = depth.shape
    if pixels is None:
        rows, cols = [a.ravel() for a in np.mgrid[0:height, 0:width]]
    else:
        rows, cols = [np.asarray(a, dtype=np.int64) for a in pixels]

    offsets = (np.arange(patch) - patch // 2) * stride
    patch_rows = np.clip(rows[:, None, None] + offsets[None, :, None], 0, height - 1)
    patch_cols = np.clip(cols[:, None, None] + offsets[None, None, :], 0, width - 1)
    depth_patch = depth[patch_rows, patch_cols].reshape(len(rows), -1)
    shaded_patch = shaded[patch_rows, patch_cols].reshape(len(rows), -1)

    coords = np.stack([(cols + 0.5) / width * 2.0 - 1.0, (rows + 0.5) / height * 2.0 - 1.0], axis=1)
    rays = camera.pixel_rays()[rows, cols]
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    return np.concatenate([depth_patch, shaded_patch, coords, rays], axis=1)


def encoder_spec(config=None):
    config = config or EncoderConfig()
    widths = list(config.hidden) + [OUTPUTS]
    activations = ["relu"] * len(config.hidden) + ["linear"]
    return net.MlpSpec(feature_size(config.patch), widths, activations)


class EncoderModel(object):
    """Patch encoder with its input and target normalization.

    The network predicts normalized targets; :meth:`predict` maps them back.
    """

    def __init__(self, spec, params, feature_mean, feature_std, target_mean, target_std, config=None, log=None):
        self.spec = spec
        self.params = params
        self.feature_mean = np.asarray(feature_mean, dtype=float)
        self.feature_std = np.asarray(feature_std, dtype=float)
        self.target_mean = np.asarray(target_mean, dtype=float)
        self.target_std = np.asarray(target_std, dtype=float)
        self.config = config or EncoderConfig()
        self.log = list(log or ())

    def predict_normalized(self, features, mode="eval", rng=None):
        return net.forward(self.spec, self.params, (features - self.feature_mean) / self.feature_std, mode, rng)

    def predict(self, features, batch_size=16384):
        outputs = np.empty((len(features), OUTPUTS))
        for start in range(0, len(features), batch_size):
            raw, _ = self.predict_normalized(features[start:start + batch_size])
            outputs[start:start + batch_size] = raw * self.target_std + self.target_mean
        return outputs

    def save(self, path):
        extra = {"patch": self.config.patch, "stride": self.config.stride,
                 "feature_mean": self.feature_mean.tolist(), "feature_std": self.feature_std.tolist(),
                 "target_mean": self.target_mean.tolist(), "target_std": self.target_std.tolist()}
        net.save_checkpoint(path, self.spec, self.params, TAG, extra)

    @classmethod
    def load(cls, path, config=None):
        spec, params, header = net.load_checkpoint(path, TAG)
        extra = header["extra"]
        config = replace(config or EncoderConfig(), patch=extra["patch"], stride=extra["stride"])
        return cls(spec, params, extra["feature_mean"], extra["feature_std"],
                   extra["target_mean"], extra["target_std"], config)


def untrained_encoder(config=None, seed=0):
    """Randomly initialized encoder with identity normalization."""
    config = config or EncoderConfig()
    spec = encoder_spec(config)
    params = net.init_params(spec, np.random.default_rng(seed))
    size = feature_size(config.patch)
    return EncoderModel(spec, params, np.zeros(size), np.ones(size), np.zeros(OUTPUTS), np.ones(OUTPUTS), config)


def encode(encoder, frame, camera, depth=None):
    """Per-pixel predictions for a whole frame.

    Args:
        encoder (EncoderModel): Trained encoder
        frame (artigrasp.scene.RenderedFrame): Input frame
        camera (artigrasp.scene.Camera): Frame intrinsics
        depth (numpy.ndarray): Depth to use instead of ``frame.depth``
            (e.g. the noisy map)

    Returns:
        numpy.ndarray: ``(H, W, 44)`` maps (heat, pose 10, shape 32, joint)

    Raises:
        ValueError: Frame resolution differs from the camera's
    """
    depth = frame.depth if depth is None else depth
    if depth.shape != (camera.height, camera.width) or frame.shaded.shape != depth.shape:
        raise ValueError("frame of shape %r does not match a %dx%d camera"
                         % (depth.shape, camera.width, camera.height))
    features = pixel_features(depth, frame.shaded, camera, None, encoder.config.patch, encoder.config.stride)
    return encoder.predict(features).reshape(depth.shape + (OUTPUTS,))


def encoder_loss(pred, target, supervision, config=None):
    """Four-term encoder loss.

    Heat MSE runs over every pixel; pose, shape and joint MSE only over
    supervised (object) pixels and are 0 without any.

    Args:
        pred (numpy.ndarray): ``(..., 44)`` predictions
        target (numpy.ndarray): ``(..., 44)`` targets
        supervision (numpy.ndarray): Boolean mask over the leading axes
        config (EncoderConfig): Loss weights

    Returns:
        tuple: total and an ``OrderedDict`` with ``heat``, ``pose``,
        ``shape`` and ``joint`` terms
    """
    config = config or EncoderConfig()
    pred = np.asarray(pred, dtype=float).reshape(-1, OUTPUTS)
    target = np.asarray(target, dtype=float).reshape(-1, OUTPUTS)
    supervised = np.asarray(supervision, dtype=bool).reshape(-1)

    terms = OrderedDict()
    terms["heat"] = float(np.mean((pred[:, HEAT] - target[:, HEAT]) ** 2))
    for name, channels in (("pose", POSE), ("shape", SHAPE), ("joint", JOINT)):
        if np.any(supervised):
            terms[name] = float(np.mean((pred[supervised, channels] - target[supervised, channels]) ** 2))
        else:
            terms[name] = 0.0
    total = (config.w_heat * terms["heat"] + config.w_pose * terms["pose"]
             + config.w_shape * terms["shape"] + config.w_joint * terms["joint"])
    return total, terms


def encoder_loss_grad(pred, target, supervision, config=None):
    config = config or EncoderConfig()
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    supervised = np.asarray(supervision, dtype=bool)
    grad = np.zeros_like(pred)
    count = len(pred)
    grad[:, HEAT] = config.w_heat * 2.0 * (pred[:, HEAT] - target[:, HEAT]) / count

    supervised_count = int(supervised.sum())
    if supervised_count:
        for weight, channels in ((config.w_pose, POSE), (config.w_shape, SHAPE), (config.w_joint, JOINT)):
            width = channels.stop - channels.start
            diff = pred[supervised, channels] - target[supervised, channels]
            grad[supervised, channels] = weight * 2.0 * diff / (supervised_count * width)
    return grad


def detect_peaks(heat, threshold=0.3, nms_radius=5):
    """Object centers in a heatmap.

    Candidates are pixels at least ``threshold`` that equal the maximum of
    their ``(2 * nms_radius + 1)`` window. The comparison is not strict, so
    every pixel of a flat plateau is a candidate. Candidates are kept
    greedily in descending value, ties in row-major order, and each kept
    peak suppresses the candidates within ``nms_radius`` (Chebyshev) of it:
    a plateau yields its first pixel in row-major order, plus further pixels
    only where it is wider than ``nms_radius``.

    >>> import numpy as np
    >>> from artigrasp.percept import detect_peaks
    >>> heat = np.zeros((20, 20))
    >>> heat[5, 5], heat[5, 7], heat[15, 12] = 0.9, 0.8, 0.6
    >>> detect_peaks(heat, 0.3, 3)
    [(5, 5), (15, 12)]

    Raises:
        ValueError: ``threshold`` outside (0, 1) or ``nms_radius`` < 1
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("detection threshold must lie in (0, 1), got %r" % threshold)
    if nms_radius < 1:
        raise ValueError("nms radius must be >= 1, got %r" % nms_radius)

    heat = np.asarray(heat, dtype=float)
    window = maximum_filter(heat, size=2 * nms_radius + 1, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero((heat == window) & (heat >= threshold))
    values = heat[rows, cols]
    order = np.lexsort((cols, rows, -values))

    kept = []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        if all(max(abs(r - kr), abs(c - kc)) > nms_radius for kr, kc in kept):
            kept.append((r, c))
    return kept


@dataclass(frozen=True)
class Detection:
    """One detected object: camera-frame pose of its canonical frame,
    meters per canonical unit, and its codes."""

    row: int
    col: int
    score: float
    pose: Pose
    scale: float
    z_s: np.ndarray
    z_j: float


def extract_detections(maps, peaks, min_scale=1e-3):
    """Read the 44 channels at each peak.

    Rotations are re-orthonormalized from their 6D encoding, ``z_j`` is
    clipped to ``[0, 1]`` and the scale to at least ``min_scale``. Peaks whose
    rotation columns are degenerate are skipped with a warning.

    Args:
        maps (numpy.ndarray): ``(H, W, 44)`` predicted or target maps
        peaks (list): ``(row, col)`` pixels

    Returns:
        list: :class:`Detection` in peak order
    """
    maps = np.asarray(maps, dtype=float)
    height, width = maps.shape[:2]
    detections = []
    for row, col in peaks:
        if not (0 <= row < height and 0 <= col < width):
            raise ValueError("peak (%d, %d) outside a %dx%d map" % (row, col, width, height))
        values = maps[row, col]
        pose = values[POSE]
        try:
            rotation = rotation_from_6d(pose[3:9])
        except ValueError as e:
            logger.warning("skipping peak (%d, %d): %s", row, col, e)
            continue
        detections.append(Detection(
            row=int(row),
            col=int(col),
            score=float(values[0]),
            pose=Pose.from_matrix(rotation, pose[:3]),
            scale=float(max(pose[9], min_scale)),
            z_s=values[SHAPE].copy(),
            z_j=float(np.clip(values[43], 0.0, 1.0)),
        ))
    return detections


def sample_pixels(mask, rng):
    """All object pixels plus as many random background pixels."""
    objects = np.flatnonzero(mask.ravel() > 0)
    background = np.flatnonzero(mask.ravel() == 0)
    count = min(len(objects), len(background)) if len(objects) else min(64, len(background))
    chosen = np.concatenate([objects, rng.choice(background, size=count, replace=False)])
    return np.unravel_index(np.sort(chosen), mask.shape)


def jitter_shading(shaded, rng, config):
    """Brightness/contrast jitter on object pixels of the shaded map."""
    contrast = 1.0 + rng.uniform(-config.contrast, config.contrast)
    brightness = rng.uniform(-config.brightness, config.brightness)
    jittered = np.clip((shaded - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)
    return np.where(shaded > 0.0, jittered, shaded)


def _frame_samples(record, rng, config, jitter):
    pixels = sample_pixels(record.frame.mask, rng)
    shaded = jitter_shading(record.frame.shaded, rng, config) if jitter else record.frame.shaded
    features = pixel_features(record.frame.depth, shaded, record.camera, pixels, config.patch, config.stride)
    targets = record.targets.stacked()[pixels]
    supervised = record.targets.supervision[pixels]
    return features, targets, supervised


def _collect(records, rng, config, jitter):
    parts = [_frame_samples(record, rng, config, jitter) for record in records]
    return [np.concatenate([p[i] for p in parts]) for i in range(3)]


def train_encoder(records, config=None, seed=0):
    """Train the patch encoder on rendered frames and their target maps.

    A ``validation_fraction`` of the frames is held out and never used for
    gradient steps. Each epoch samples every object pixel of every training
    frame plus as many background pixels, with shading jitter from the
    first epoch on when ``config.jitter`` is set. Inputs and targets are
    standardized with statistics of an unjittered sample.

    Args:
        records (list): Objects with ``frame``, ``camera`` and ``targets``
            (e.g. :class:`artigrasp.scene.FrameRecord`)
        config (EncoderConfig): Layout, schedule and loss weights
        seed (int): Run seed

    Returns:
        EncoderModel: Trained model; ``model.log`` holds the initial losses
        (epoch -1) and one entry per epoch

    Raises:
        ValueError: no frames
        FloatingPointError: The loss became non-finite
    """
    config = config or EncoderConfig()
    if not records:
        raise ValueError("no frames to train the encoder on")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))

    order = rng.permutation(len(records))
    held = int(round(config.validation_fraction * len(records))) if len(records) > 1 else 0
    validation = [records[i] for i in sorted(order[:held])]
    train = [records[i] for i in sorted(order[held:])]

    features, targets, supervised = _collect(train, rng, config, jitter=False)
    feature_mean, feature_std = features.mean(axis=0), features.std(axis=0)
    feature_std[feature_std < 1e-6] = 1.0
    target_mean = np.zeros(OUTPUTS)
    target_std = np.ones(OUTPUTS)
    if np.any(supervised):
        target_mean[1:] = targets[supervised, 1:].mean(axis=0)
        target_std[1:] = targets[supervised, 1:].std(axis=0)
    target_std[target_std < 1e-6] = 1.0

    spec = encoder_spec(config)
    params = net.init_params(spec, rng)
    state = net.AdamState(params)
    model = EncoderModel(spec, params, feature_mean, feature_std, target_mean, target_std, config)

    val_samples = _collect(validation, np.random.default_rng(np.random.SeedSequence([seed, 5, 1])),
                           config, jitter=False) if validation else None

    def evaluate(samples):
        outputs = model.predict(samples[0])
        _, terms = encoder_loss(outputs, samples[1], samples[2], config)
        return terms

    initial = evaluate((features, targets, supervised))
    model.log.append(OrderedDict([("epoch", -1)] + [("train_" + k, v) for k, v in initial.items()]))

    for epoch in range(config.epochs):
        lr = net.lr_schedule(epoch, config)
        if epoch or config.jitter:
            features, targets, supervised = _collect(train, rng, config, config.jitter)
        normalized = (targets - target_mean) / target_std
        permutation = rng.permutation(len(features))
        for batch, start in enumerate(range(0, len(permutation), config.batch_size)):
            idx = permutation[start:start + config.batch_size]
            outputs, cache = model.predict_normalized(features[idx], "train", rng)
            total, _ = encoder_loss(outputs, normalized[idx], supervised[idx], config)
            if not np.isfinite(total):
                raise FloatingPointError("encoder loss is not finite at epoch %d batch %d" % (epoch, batch))
            grads, _ = net.backward(spec, params, cache, encoder_loss_grad(outputs, normalized[idx],
                                                                          supervised[idx], config))
            net.adam_step(params, grads, state, lr)

        terms = evaluate((features, targets, supervised))
        entry = OrderedDict([("epoch", epoch), ("lr", lr)] + [("train_" + k, v) for k, v in terms.items()])
        if val_samples is not None:
            entry.update(("val_" + k, v) for k, v in evaluate(val_samples).items())
        model.log.append(entry)
        logger.info("epoch %d: %s", epoch, ", ".join("%s=%.5g" % item for item in list(entry.items())[1:]))
    return model
