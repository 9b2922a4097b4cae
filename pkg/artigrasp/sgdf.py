import logging
from collections import OrderedDict

import numpy as np

from artigrasp import artobj, net
from artigrasp.config import DecoderConfig, GraspConfig, SgdfConfig
from artigrasp.formats import read_blob, write_blob
from artigrasp.geom import grasp_control_points, grasp_positions

logger = logging.getLogger(__name__)

OUTPUTS = 16
TAG = "sgdf-v1"


def clamp_sdf(s, delta):
    """Clamp signed distances to ``[-delta, delta]``.

    >>> from artigrasp.sgdf import clamp_sdf
    >>> clamp_sdf(0.5, 0.1), clamp_sdf(-0.5, 0.1), clamp_sdf(0.05, 0.1)
    (0.1, -0.1, 0.05)
    """
    if not delta > 0:
        raise ValueError("clamp bound must be > 0, got %r" % delta)
    if np.ndim(s) == 0:
        return min(delta, max(-delta, s))
    return np.clip(s, -delta, delta)


def closest_indices(points, positions):
    """Index of the nearest position for every point (lowest index on ties)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    positions = np.asarray(positions, dtype=float)
    result = np.empty(len(points), dtype=np.int64)
    for start in range(0, len(points), 4096):
        chunk = points[start:start + 4096]
        d2 = np.sum((chunk[:, None, :] - positions[None, :, :]) ** 2, axis=2)
        result[start:start + 4096] = np.argmin(d2, axis=1)
    return result


def closest_grasp(x, group, gripper=None):
    """Label of ``group`` whose grasp position is nearest to ``x`` (object
    frame, meters); ties go to the lowest index.

    Raises:
        ValueError: empty group
    """
    if not group:
        raise ValueError("closest grasp in an empty group")
    gripper = gripper or GraspConfig().gripper()
    positions = grasp_positions([label.pose for label in group], gripper)
    return group[int(closest_indices(x, positions)[0])]


class SgdfSamples(object):
    """SGDF training samples of one (object, joint state) pair, in canonical
    units: ``x`` ``(n, 3)``, unclamped ``sdf`` ``(n,)`` and ``cp`` ``(n, 5, 3)``."""

    def __init__(self, object_id, joint_index, z_j, x, sdf, cp):
        self.object_id = object_id
        self.joint_index = int(joint_index)
        self.z_j = float(z_j)
        self.x = np.asarray(x, dtype=float)
        self.sdf = np.asarray(sdf, dtype=float)
        self.cp = np.asarray(cp, dtype=float).reshape(-1, 5, 3)
        if not (len(self.x) == len(self.sdf) == len(self.cp)):
            raise ValueError("sample arrays disagree in length: %d/%d/%d" % (len(self.x), len(self.sdf), len(self.cp)))

    def __len__(self):
        return len(self.x)

    @property
    def key(self):
        return self.object_id, self.joint_index

    def to_array(self):
        return np.concatenate([self.x, self.sdf[:, None], self.cp.reshape(-1, 15)], axis=1)

    def save(self, prefix):
        write_blob(prefix, self.to_array(), {"object_id": self.object_id, "joint_index": self.joint_index,
                                              "z_j": self.z_j, "count": len(self)})

    @classmethod
    def load(cls, prefix):
        header, data = read_blob(prefix)
        if data.shape[1:] != (19,):
            raise ValueError("%s: sample rows must hold 19 values, got %r" % (prefix, data.shape))
        return cls(header["object_id"], header["joint_index"], header["z_j"],
                   data[:, :3], data[:, 3], data[:, 4:])


def sample_sgdf(obj, q_index, group, n, seed, config=None, gripper=None):
    """Draw SGDF samples for one (object, joint state) pair.

    ``near_fraction`` of the points are surface points perturbed by Gaussian
    noise (one of ``config.sigmas`` per point, canonical units), the rest are
    uniform in the ``[-bound, bound]^3`` box. Each sample carries its exact
    signed distance and the control points of the closest label, both in
    canonical units.

    Args:
        obj (ArticulatedObject): Object
        q_index (int): Joint state index of ``group``
        group (list): Validated :class:`artigrasp.graspgen.GraspLabel` of the pair
        n (int): Number of samples
        seed: Anything accepted by :func:`numpy.random.default_rng`

    Returns:
        SgdfSamples: Samples in canonical units
    """
    config = config or SgdfConfig()
    gripper = gripper or GraspConfig().gripper()
    if n < 1:
        raise ValueError("sample count must be >= 1, got %r" % n)
    if not group:
        raise ValueError("no grasp labels for %s joint %d" % (obj.id, q_index))

    q = group[0].q
    scale = obj.canonical_scale
    rng = np.random.default_rng(seed)

    near = int(round(config.near_fraction * n))
    surface_seed = int(rng.integers(2 ** 63))
    surface = artobj.surface_points(obj, q, near, "whole", seed=surface_seed) * scale if near else np.zeros((0, 3))
    sigma = np.asarray(config.sigmas, dtype=float)[rng.integers(len(config.sigmas), size=near)]
    x = np.concatenate([
        surface + rng.normal(size=(near, 3)) * sigma[:, None],
        rng.uniform(-config.bound, config.bound, size=(n - near, 3)),
    ])
    x = np.clip(x, -config.bound, config.bound)
    sdf = artobj.canonical_sdf(obj, q, x)

    positions = grasp_positions([label.pose for label in group], gripper)
    nearest = closest_indices(x / scale, positions)
    templates = np.array([grasp_control_points(label.pose, gripper) for label in group]) * scale

    return SgdfSamples(obj.id, q_index, artobj.normalize_joint(q, obj.joint), x, sdf, templates[nearest])


def decoder_spec(config=None):
    """Decoder layout: layer 1 reads ``[z_s, x]``, layer 2 appends ``z_j``
    and layer 5 appends ``[z_s, z_j, x]``; hidden ReLU, 16 tanh outputs.

    The network input vector is ``[z_s, z_j, x]``.

    >>> from artigrasp.config import DecoderConfig
    >>> decoder_spec(DecoderConfig(width=512)).layer_input_sizes()
    [35, 513, 512, 512, 548, 512, 512, 512]
    """
    config = config or DecoderConfig()
    if config.layers < 6:
        raise ValueError("the decoder needs at least 6 layers, got %d" % config.layers)
    c = config.code_dim
    z_s = list(range(c))
    z_j = [c]
    x = [c + 1, c + 2, c + 3]

    appends = [[] for _ in range(config.layers)]
    appends[0] = z_s + x
    appends[1] = z_j
    appends[4] = z_s + z_j + x
    widths = [config.width] * (config.layers - 1) + [OUTPUTS]
    activations = ["relu"] * (config.layers - 1) + ["tanh"]
    dropout = [config.dropout] * (config.layers - 1) + [0.0]
    return net.MlpSpec(c + 4, widths, activations, appends, dropout)


def decoder_inputs(z_s, z_j, x):
    """Stack ``[z_s, z_j, x]`` rows; any argument may be a single vector
    broadcast over the batch."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    count = len(x)
    z_s = np.asarray(z_s, dtype=float)
    z_s = np.broadcast_to(z_s, (count, z_s.shape[-1]))
    z_j = np.broadcast_to(np.asarray(z_j, dtype=float).reshape(-1, 1), (count, 1))
    return np.concatenate([z_s, z_j, x], axis=1)


def split_outputs(outputs):
    outputs = np.atleast_2d(outputs)
    return outputs[:, 0], outputs[:, 1:].reshape(-1, 5, 3)


def decode(spec, params, z_s, z_j, x):
    """Eval-mode decoder output for one point or a batch of points.

    Returns:
        tuple: ``sdf_pred`` in (-1, 1) (multiply by ``delta`` for canonical
        units) and ``cp_pred`` ``(5, 3)`` (or batched)
    """
    single = np.ndim(x) == 1
    if np.shape(z_s)[-1] != spec.input_size - 4:
        raise ValueError("shape code of length %d, decoder expects %d" % (np.shape(z_s)[-1], spec.input_size - 4))
    outputs, _ = net.forward(spec, params, decoder_inputs(z_s, z_j, x), "eval")
    sdf, cp = split_outputs(outputs)
    return (sdf[0], cp[0]) if single else (sdf, cp)


def decoder_loss(outputs, sdf, cp, z_s, config=None):
    """Weighted decoder loss.

    * ``L_SDF``: mean ``|delta * sdf_pred - clamp(sdf, delta)|``
    * ``L_grasp``: mean control point distance
    * ``L_code``: mean squared shape code entry

    Args:
        outputs (numpy.ndarray): ``(batch, 16)`` raw decoder outputs
        sdf (numpy.ndarray): ``(batch,)`` target distances
        cp (numpy.ndarray): ``(batch, 5, 3)`` target control points
        z_s (numpy.ndarray): ``(batch, code_dim)`` shape codes used
        config (DecoderConfig): Weights and ``delta``

    Returns:
        tuple: total loss and an ``OrderedDict`` with ``sdf``, ``grasp``
        and ``code`` terms
    """
    config = config or DecoderConfig()
    sdf_pred, cp_pred = split_outputs(outputs)
    l_sdf = float(np.mean(np.abs(sdf_pred * config.delta - clamp_sdf(np.asarray(sdf, dtype=float), config.delta))))
    l_grasp = float(np.mean(np.abs(cp_pred - np.asarray(cp).reshape(-1, 5, 3)).sum(axis=2).mean(axis=1)))
    l_code = float(np.mean(np.square(z_s)))
    total = config.w_sdf * l_sdf + config.w_grasp * l_grasp + config.w_code * l_code
    return total, OrderedDict([("sdf", l_sdf), ("grasp", l_grasp), ("code", l_code)])


def decoder_loss_grad(outputs, sdf, cp, z_s, config=None):
    """Gradients of :func:`decoder_loss` with respect to the raw outputs and
    the shape codes (``|.|`` has zero derivative at 0)."""
    config = config or DecoderConfig()
    outputs = np.atleast_2d(outputs)
    count = len(outputs)
    sdf_pred, cp_pred = split_outputs(outputs)

    d_outputs = np.empty_like(outputs)
    residual = sdf_pred * config.delta - clamp_sdf(np.asarray(sdf, dtype=float), config.delta)
    d_outputs[:, 0] = config.w_sdf * np.sign(residual) * config.delta / count
    d_cp = config.w_grasp * np.sign(cp_pred - np.asarray(cp).reshape(-1, 5, 3)) / (5.0 * count)
    d_outputs[:, 1:] = d_cp.reshape(count, 15)
    z_s = np.asarray(z_s, dtype=float)
    d_codes = config.w_code * 2.0 * z_s / z_s.size
    return d_outputs, d_codes


class DecoderModel(object):
    """Trained decoder and its learned shape code table."""

    def __init__(self, spec, params, codes, config=None, log=None, validation=None):
        self.spec = spec
        self.params = params
        self.codes = OrderedDict(codes)
        self.config = config or DecoderConfig()
        self.log = list(log or ())
        self.validation = dict(validation or {})

    @property
    def delta(self):
        return self.config.delta

    def code(self, object_id):
        try:
            return self.codes[object_id]
        except KeyError:
            raise KeyError("no shape code for object %r" % object_id)

    def decode(self, z_s, z_j, x):
        return decode(self.spec, self.params, z_s, z_j, x)

    def save(self, path):
        blocks = list(self.params.items())
        blocks.append(("codes", np.array(list(self.codes.values()))))
        extra = {"objects": list(self.codes), "delta": self.config.delta, "validation": self.validation}
        net.save_checkpoint(path, self.spec, net.Parameters(blocks), TAG, extra)

    @classmethod
    def load(cls, path, config=None):
        spec, params, header = net.load_checkpoint(path, TAG)
        codes = params.blocks.pop("codes")
        extra = header["extra"]
        config = config or DecoderConfig()
        if abs(config.delta - extra["delta"]) > 1e-12:
            logger.warning("decoder trained with delta %g, configured %g", extra["delta"], config.delta)
        return cls(spec, params, zip(extra["objects"], codes), config, validation=extra.get("validation"))


def _stack(pairs, object_index):
    x = np.concatenate([p.x for p in pairs])
    sdf = np.concatenate([p.sdf for p in pairs])
    cp = np.concatenate([p.cp for p in pairs])
    z_j = np.concatenate([np.full(len(p), p.z_j) for p in pairs])
    owner = np.concatenate([np.full(len(p), object_index[p.object_id], dtype=np.int64) for p in pairs])
    return x, sdf, cp, z_j, owner


def evaluate_decoder(model, pairs, batch_size=8192):
    """Mean loss terms of ``model`` over ``pairs`` in eval mode."""
    totals = OrderedDict([("sdf", 0.0), ("grasp", 0.0), ("code", 0.0)])
    count = 0
    for pair in pairs:
        z_s = model.code(pair.object_id)
        for start in range(0, len(pair), batch_size):
            stop = min(start + batch_size, len(pair))
            outputs, _ = net.forward(model.spec, model.params, decoder_inputs(z_s, pair.z_j, pair.x[start:stop]))
            _, terms = decoder_loss(outputs, pair.sdf[start:stop], pair.cp[start:stop],
                                    np.broadcast_to(z_s, (stop - start, len(z_s))), model.config)
            for name, value in terms.items():
                totals[name] += value * (stop - start)
            count += stop - start
    return OrderedDict((name, value / max(count, 1)) for name, value in totals.items())


def train_decoder(pairs, config=None, seed=0, hold_out=True):
    """Auto-decoder training of network weights and per-object shape codes.

    One joint state pair per object is held out for validation (drawn from
    the run's generator); training and validation ``L_SDF``/``L_grasp`` are
    logged every epoch.

    Args:
        pairs (list): :class:`SgdfSamples`, at least two per object when
            ``hold_out`` is set
        config (DecoderConfig): Layout, loss weights and schedule
        seed (int): Run seed
        hold_out (bool): Keep one pair per object for validation

    Returns:
        DecoderModel: Trained model; ``model.log`` holds one dict per epoch
        and ``model.validation`` maps object ids to held-out joint indices

    Raises:
        ValueError: An object has fewer than two pairs
        FloatingPointError: The loss became non-finite
    """
    config = config or DecoderConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))

    by_object = OrderedDict()
    for pair in sorted(pairs, key=lambda p: p.key):
        by_object.setdefault(pair.object_id, []).append(pair)
    if not by_object:
        raise ValueError("no SGDF samples to train on")

    train, held_out, validation = [], [], {}
    for object_id, group in by_object.items():
        if hold_out:
            if len(group) < 2:
                raise ValueError("object %s has %d joint state pair(s), need at least 2" % (object_id, len(group)))
            k = int(rng.integers(len(group)))
            validation[object_id] = group[k].joint_index
            held_out.append(group[k])
            train.extend(p for i, p in enumerate(group) if i != k)
        else:
            train.extend(group)

    object_index = dict((object_id, i) for i, object_id in enumerate(by_object))
    x, sdf, cp, z_j, owner = _stack(train, object_index)

    spec = decoder_spec(config)
    params = net.init_params(spec, rng)
    codes = net.Parameters([("codes", rng.normal(0.0, config.code_init_std, size=(len(by_object), config.code_dim)))])
    state = net.AdamState(params)
    code_state = net.AdamState(codes)
    model = DecoderModel(spec, params, zip(by_object, codes["codes"]), config, validation=validation)

    c = config.code_dim
    for epoch in range(config.epochs):
        lr = net.lr_schedule(epoch, config)
        order = rng.permutation(len(x))
        sums = np.zeros(2)
        for batch, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            z_s = codes["codes"][owner[idx]]
            inputs = np.concatenate([z_s, z_j[idx, None], x[idx]], axis=1)
            outputs, cache = net.forward(spec, params, inputs, "train", rng)
            total, terms = decoder_loss(outputs, sdf[idx], cp[idx], z_s, config)
            if not np.isfinite(total):
                raise FloatingPointError("decoder loss is not finite at epoch %d batch %d" % (epoch, batch))

            d_outputs, d_code_loss = decoder_loss_grad(outputs, sdf[idx], cp[idx], z_s, config)
            grads, d_inputs = net.backward(spec, params, cache, d_outputs)
            d_codes = np.zeros_like(codes["codes"])
            np.add.at(d_codes, owner[idx], d_inputs[:, :c] + d_code_loss)

            net.adam_step(params, grads, state, lr)
            net.adam_step(codes, {"codes": d_codes}, code_state, lr)
            sums += np.array([terms["sdf"], terms["grasp"]]) * len(idx)

        model.codes = OrderedDict(zip(by_object, codes["codes"]))
        entry = OrderedDict([("epoch", epoch), ("lr", lr),
                             ("train_sdf", sums[0] / len(x)), ("train_grasp", sums[1] / len(x))])
        if held_out:
            terms = evaluate_decoder(model, held_out)
            entry["val_sdf"] = terms["sdf"]
            entry["val_grasp"] = terms["grasp"]
        model.log.append(entry)
        logger.info("epoch %d: %s", epoch, ", ".join("%s=%.5g" % item for item in list(entry.items())[1:]))

    model.codes = OrderedDict((object_id, code.copy()) for object_id, code in model.codes.items())
    return model
