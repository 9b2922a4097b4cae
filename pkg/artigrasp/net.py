"""
Dense multi-layer perceptrons with exact gradients.

Layers are weight-normalized (``W = g * v / |v|`` per output row). A layer's
input is the previous layer's output followed by an optional slice of the
network input, which is how skip connections are expressed::

    >>> from artigrasp.net import MlpSpec
    >>> spec = MlpSpec(6, [4, 4, 2], ["relu", "relu", "tanh"], [[0, 1, 2], [3], [4, 5]])
    >>> spec.layer_input_sizes()
    [3, 5, 6]

Batches are ``(batch, features)`` arrays; gradients are summed over the
batch, so a loss that averages over samples divides its output gradient by
the batch size itself.
"""

import json
import logging
import struct
from collections import OrderedDict

import numpy as np

from artigrasp.config import EncoderConfig

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "linear")

MAGIC = b"ARTG"

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


class StaleCacheError(RuntimeError):
    pass


class MlpSpec(object):
    """Network layout.

    Args:
        input_size (int): Length of the network input vector
        widths (list): Output width of each layer
        activations (list): ``relu``, ``tanh`` or ``linear`` per layer
        appends (list): Per layer, indices of network inputs appended to the
            layer input (after the previous layer's output); layer 0 reads
            only its appended inputs
        dropout (list): Dropout probability per layer, applied after the
            activation in train mode
    """

    def __init__(self, input_size, widths, activations, appends=None, dropout=None):
        layers = len(widths)
        appends = appends if appends is not None else [list(range(input_size))] + [[]] * (layers - 1)
        dropout = dropout if dropout is not None else [0.0] * layers

        if not (len(activations) == len(appends) == len(dropout) == layers):
            raise ValueError("layer count mismatch: %d widths, %d activations, %d appends, %d dropout"
                             % (layers, len(activations), len(appends), len(dropout)))
        for activation in activations:
            if activation not in ACTIVATIONS:
                raise ValueError("unknown activation %r" % activation)
        for p in dropout:
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout must lie in [0, 1), got %r" % p)
        if not appends[0]:
            raise ValueError("the first layer must read network inputs")
        for indices in appends:
            if any(not 0 <= i < input_size for i in indices) or len(set(indices)) != len(indices):
                raise ValueError("append indices %r invalid for input size %d" % (indices, input_size))

        self.input_size = int(input_size)
        self.widths = [int(w) for w in widths]
        self.activations = list(activations)
        self.appends = [np.asarray(indices, dtype=np.int64) for indices in appends]
        self.dropout = [float(p) for p in dropout]

    @property
    def output_size(self):
        return self.widths[-1]

    def layer_input_sizes(self):
        sizes = []
        for l, indices in enumerate(self.appends):
            sizes.append((self.widths[l - 1] if l else 0) + len(indices))
        return sizes

    def to_dict(self):
        return {"input_size": self.input_size, "widths": self.widths, "activations": self.activations,
                "appends": [indices.tolist() for indices in self.appends], "dropout": self.dropout}

    @classmethod
    def from_dict(cls, data):
        return cls(data["input_size"], data["widths"], data["activations"], data["appends"], data["dropout"])

    def __eq__(self, other):
        return isinstance(other, MlpSpec) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "MlpSpec(%r)" % self.to_dict()


class Parameters(object):
    """Named parameter blocks in a fixed order.

    ``version`` increases with every in-place update so that activation caches
    taken before an update can be recognized.
    """

    def __init__(self, blocks):
        self.blocks = OrderedDict(blocks)
        self.version = 0

    def __getitem__(self, name):
        return self.blocks[name]

    def __setitem__(self, name, value):
        self.blocks[name] = value
        self.touch()

    def __contains__(self, name):
        return name in self.blocks

    def names(self):
        return list(self.blocks)

    def items(self):
        return self.blocks.items()

    def touch(self):
        self.version += 1

    def copy(self):
        return Parameters((name, value.copy()) for name, value in self.blocks.items())

    def size(self):
        return sum(value.size for value in self.blocks.values())


def _names(l):
    return "layer%d.v" % l, "layer%d.g" % l, "layer%d.b" % l


def init_params(spec, rng):
    """Direction rows from N(0, 2 / fan_in), unit gains, zero biases."""
    blocks = []
    for l, (fan_in, fan_out) in enumerate(zip(spec.layer_input_sizes(), spec.widths)):
        v_name, g_name, b_name = _names(l)
        blocks.append((v_name, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))))
        blocks.append((g_name, np.ones(fan_out)))
        blocks.append((b_name, np.zeros(fan_out)))
    return Parameters(blocks)


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def forward(spec, params, inputs, mode="eval", rng=None):
    """Run the network on one input vector or a batch.

    Train mode applies inverted dropout (kept units scaled by ``1 / (1 - p)``)
    drawn from ``rng``; eval mode is deterministic.

    Args:
        spec (MlpSpec): Layout
        params (Parameters): Weights
        inputs (numpy.ndarray): ``(input_size,)`` or ``(batch, input_size)``
        mode (str): ``train`` or ``eval``
        rng (numpy.random.Generator): Dropout masks (train mode only)

    Returns:
        tuple: output array (shaped like ``inputs``) and the activation cache

    Raises:
        ValueError: Input length or mode invalid, or a zero direction row
    """
    if mode not in ("train", "eval"):
        raise ValueError("unknown mode %r" % mode)
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_size:
        raise ValueError("input shape %r does not match input size %d" % (np.shape(inputs), spec.input_size))

    layers = []
    h = None
    for l, activation in enumerate(spec.activations):
        v_name, g_name, b_name = _names(l)
        v, g, b = params[v_name], params[g_name], params[b_name]
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("zero direction row in %s" % v_name)
        weight = (g / norms)[:, None] * v

        parts = [h] if l else []
        if len(spec.appends[l]):
            parts.append(x[:, spec.appends[l]])
        a_in = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]

        z = a_in @ weight.T + b
        a = _activate(activation, z)
        mask = None
        p = spec.dropout[l]
        if mode == "train" and p > 0.0:
            if rng is None:
                raise ValueError("train mode with dropout needs an rng")
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
            h = a * mask
        else:
            h = a
        layers.append({"input": a_in, "z": z, "a": a, "mask": mask, "weight": weight, "norms": norms})

    cache = {"version": params.version, "mode": mode, "single": single, "inputs": x, "layers": layers}
    return (h[0] if single else h), cache


def backward(spec, params, cache, grad_output):
    """Exact gradients of ``sum(grad_output * output)`` for a cached forward.

    Returns:
        tuple: (``OrderedDict`` of parameter gradients named like
        ``params``, gradient with respect to the network input)

    Raises:
        StaleCacheError: ``params`` changed since the forward pass
    """
    if cache["version"] != params.version:
        raise StaleCacheError("activation cache from parameter version %d, parameters are at version %d"
                              % (cache["version"], params.version))
    x = cache["inputs"]
    dh = np.asarray(grad_output, dtype=float)
    if cache["single"]:
        dh = dh[None, :]
    if dh.shape != (x.shape[0], spec.output_size):
        raise ValueError("output gradient shape %r does not match the forward pass" % (np.shape(grad_output),))

    grads = OrderedDict()
    grad_input = np.zeros_like(x)
    for l in reversed(range(len(spec.widths))):
        layer = cache["layers"][l]
        v_name, g_name, b_name = _names(l)
        if layer["mask"] is not None:
            dh = dh * layer["mask"]
        dz = dh * _activation_grad(spec.activations[l], layer["z"], layer["a"])

        d_weight = dz.T @ layer["input"]
        direction = params[v_name] / layer["norms"][:, None]
        d_gain = np.sum(d_weight * direction, axis=1)
        grads[v_name] = (params[g_name] / layer["norms"])[:, None] * (d_weight - d_gain[:, None] * direction)
        grads[g_name] = d_gain
        grads[b_name] = dz.sum(axis=0)

        d_input = dz @ layer["weight"]
        width = spec.widths[l - 1] if l else 0
        if len(spec.appends[l]):
            grad_input[:, spec.appends[l]] += d_input[:, width:]
        dh = d_input[:, :width]

    ordered = OrderedDict((name, grads[name]) for name in params.names() if name in grads)
    return ordered, (grad_input[0] if cache["single"] else grad_input)


class AdamState(object):
    def __init__(self, params):
        self.m = OrderedDict((name, np.zeros_like(value)) for name, value in params.items())
        self.v = OrderedDict((name, np.zeros_like(value)) for name, value in params.items())
        self.step = 0


def adam_step(params, grads, state, lr):
    """One bias-corrected ADAM update, in place.

    See also:
        * Adam: A Method for Stochastic Optimization: https://arxiv.org/abs/1412.6980

    Raises:
        FloatingPointError: A gradient block contains non-finite values
        ValueError: A gradient block does not match its parameter shape
    """
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ValueError("gradient %s has shape %r, parameter has %r" % (name, grad.shape, params[name].shape))
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient in parameter block %s" % name)

    state.step += 1
    correction1 = 1.0 - BETA1 ** state.step
    correction2 = 1.0 - BETA2 ** state.step
    for name, grad in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * grad
        v *= BETA2
        v += (1.0 - BETA2) * grad * grad
        params.blocks[name] -= lr * (m / correction1) / (np.sqrt(v / correction2) + EPSILON)
    params.touch()


def lr_schedule(epoch, config):
    """Learning rate at ``epoch``.

    The decoder profile (:class:`artigrasp.config.DecoderConfig`) multiplies
    ``lr_max`` by ``lr_decay`` at a quarter, half and three quarters of the
    configured epochs and never drops below ``lr_min``; the encoder profile
    (:class:`artigrasp.config.EncoderConfig`) is constant.

    >>> from artigrasp.config import DecoderConfig
    >>> [lr_schedule(e, DecoderConfig(epochs=600)) for e in (0, 150, 300, 599)]
    [0.001, 0.0005, 0.00025, 0.00025]
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0, got %r" % epoch)
    if isinstance(config, EncoderConfig):
        return config.lr

    milestones = [config.epochs // 4, config.epochs // 2, (3 * config.epochs) // 4]
    decays = sum(1 for m in milestones if epoch >= m)
    lr = config.lr_max * config.lr_decay ** decays
    return min(max(lr, config.lr_min), config.lr_max)


def save_checkpoint(path, spec, params, tag, extra=None):
    """Write ``MAGIC``, the header length (uint32 LE), a UTF-8 JSON header and
    the parameter blocks as one little-endian float32 blob in header order."""
    header = {
        "tag": tag,
        "spec": spec.to_dict(),
        "blocks": [[name, list(value.shape)] for name, value in params.items()],
        "extra": extra or {},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        for _, value in params.items():
            f.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    logger.debug("saved %s checkpoint %s (%d parameters)", tag, path, params.size())


def load_checkpoint(path, tag=None):
    """Inverse of :func:`save_checkpoint`.

    Returns:
        tuple: ``(spec, params, header)``

    Raises:
        ValueError: Bad magic, tag mismatch or truncated blob
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError("%s is not a checkpoint (magic %r)" % (path, magic))
        (length,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(length).decode("utf-8"))
        blob = np.frombuffer(f.read(), dtype="<f4")

    if tag is not None and header["tag"] != tag:
        raise ValueError("%s holds a %r checkpoint, expected %r" % (path, header["tag"], tag))

    blocks = []
    offset = 0
    for name, shape in header["blocks"]:
        size = int(np.prod(shape))
        if offset + size > blob.size:
            raise ValueError("%s: parameter blob truncated at block %s" % (path, name))
        blocks.append((name, blob[offset:offset + size].reshape(shape).astype(np.float64)))
        offset += size
    if offset != blob.size:
        raise ValueError("%s: %d trailing floats after the last block" % (path, blob.size - offset))

    return MlpSpec.from_dict(header["spec"]), Parameters(blocks), header
