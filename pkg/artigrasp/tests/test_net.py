import os
import shutil
import tempfile
import unittest

import numpy as np

from artigrasp import net
from artigrasp.config import DecoderConfig, EncoderConfig
from artigrasp.net import MlpSpec


def numeric_grad(f, array, step=1e-6):
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        saved = array[index]
        array[index] = saved + step
        up = f()
        array[index] = saved - step
        down = f()
        array[index] = saved
        grad[index] = (up - down) / (2.0 * step)
    return grad


class TestSpec(unittest.TestCase):

    def test_sizes(self):
        spec = MlpSpec(5, [3, 4, 1], ["relu", "tanh", "linear"], [[0, 1], [2, 3, 4], []])
        self.assertEqual(spec.layer_input_sizes(), [2, 6, 4])
        self.assertEqual(spec.output_size, 1)
        self.assertEqual(MlpSpec.from_dict(spec.to_dict()), spec)

    def test_default_appends(self):
        spec = MlpSpec(3, [2, 2], ["relu", "linear"])
        self.assertEqual(spec.layer_input_sizes(), [3, 2])

    def test_invalid(self):
        self.assertRaises(ValueError, MlpSpec, 3, [2, 2], ["relu"])
        self.assertRaises(ValueError, MlpSpec, 3, [2], ["sigmoid"])
        self.assertRaises(ValueError, MlpSpec, 3, [2], ["relu"], [[0, 3]])
        self.assertRaises(ValueError, MlpSpec, 3, [2], ["relu"], [[0, 0]])
        self.assertRaises(ValueError, MlpSpec, 3, [2, 2], ["relu", "relu"], [[], [0]])
        self.assertRaises(ValueError, MlpSpec, 3, [2], ["relu"], None, [1.0])


class TestGradients(unittest.TestCase):

    def setUp(self):
        # tanh everywhere keeps the loss smooth for finite differences
        self.spec = MlpSpec(4, [5, 6, 2], ["tanh", "tanh", "linear"], [[0, 1, 2], [3], [0, 3]])
        self.params = net.init_params(self.spec, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        self.inputs = rng.normal(size=(7, 4))
        self.weights = rng.normal(size=(7, 2))

    def loss(self):
        out, _ = net.forward(self.spec, self.params, self.inputs)
        return float(np.sum(self.weights * out))

    def test_parameter_gradients(self):
        _, cache = net.forward(self.spec, self.params, self.inputs)
        grads, _ = net.backward(self.spec, self.params, cache, self.weights)
        self.assertEqual(list(grads), self.params.names())
        for name, value in self.params.items():
            expected = numeric_grad(self.loss, value)
            np.testing.assert_allclose(grads[name], expected, atol=1e-6, err_msg=name)

    def test_input_gradient(self):
        _, cache = net.forward(self.spec, self.params, self.inputs)
        _, grad_input = net.backward(self.spec, self.params, cache, self.weights)
        np.testing.assert_allclose(grad_input, numeric_grad(self.loss, self.inputs), atol=1e-6)

    def test_single_vector(self):
        out, cache = net.forward(self.spec, self.params, self.inputs[0])
        batch, _ = net.forward(self.spec, self.params, self.inputs)
        self.assertEqual(out.shape, (2,))
        np.testing.assert_allclose(out, batch[0])
        _, grad_input = net.backward(self.spec, self.params, cache, self.weights[0])
        self.assertEqual(grad_input.shape, (4,))

    def test_stale_cache(self):
        _, cache = net.forward(self.spec, self.params, self.inputs)
        self.params["layer0.b"] = self.params["layer0.b"] + 0.1
        self.assertRaises(net.StaleCacheError, net.backward, self.spec, self.params, cache, self.weights)

    def test_bad_shapes(self):
        self.assertRaises(ValueError, net.forward, self.spec, self.params, np.zeros((2, 3)))
        self.assertRaises(ValueError, net.forward, self.spec, self.params, self.inputs, "test")
        _, cache = net.forward(self.spec, self.params, self.inputs)
        self.assertRaises(ValueError, net.backward, self.spec, self.params, cache, np.zeros((7, 3)))

    def test_weight_norm_gain_invariance(self):
        before, _ = net.forward(self.spec, self.params, self.inputs)
        self.params["layer1.v"] = self.params["layer1.v"] * 3.0
        after, _ = net.forward(self.spec, self.params, self.inputs)
        np.testing.assert_allclose(before, after, atol=1e-12)

    def test_zero_direction_row(self):
        self.params["layer2.v"] = np.zeros_like(self.params["layer2.v"])
        self.assertRaises(ValueError, net.forward, self.spec, self.params, self.inputs)


class TestDropout(unittest.TestCase):

    def setUp(self):
        self.spec = MlpSpec(3, [64, 1], ["relu", "linear"], None, [0.5, 0.0])
        self.params = net.init_params(self.spec, np.random.default_rng(0))
        self.inputs = np.random.default_rng(1).normal(size=(4, 3))

    def test_eval_is_deterministic(self):
        a, _ = net.forward(self.spec, self.params, self.inputs)
        b, _ = net.forward(self.spec, self.params, self.inputs)
        np.testing.assert_array_equal(a, b)

    def test_train_needs_rng(self):
        self.assertRaises(ValueError, net.forward, self.spec, self.params, self.inputs, "train")

    def test_masks_follow_rng(self):
        a, _ = net.forward(self.spec, self.params, self.inputs, "train", np.random.default_rng(5))
        b, _ = net.forward(self.spec, self.params, self.inputs, "train", np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)
        c, cache = net.forward(self.spec, self.params, self.inputs, "train", np.random.default_rng(6))
        self.assertFalse(np.array_equal(a, c))
        mask = cache["layers"][0]["mask"]
        self.assertTrue(set(np.unique(mask)) <= {0.0, 2.0})


class TestAdam(unittest.TestCase):

    def test_first_step_moves_by_lr(self):
        params = net.Parameters([("w", np.array([1.0, -2.0, 3.0]))])
        state = net.AdamState(params)
        net.adam_step(params, {"w": np.array([0.5, -4.0, 0.0])}, state, 0.01)
        np.testing.assert_allclose(params["w"], [0.99, -1.99, 3.0], atol=1e-6)
        self.assertEqual(state.step, 1)
        self.assertEqual(params.version, 1)

    def test_minimizes_quadratic(self):
        params = net.Parameters([("w", np.array([2.0, -3.0]))])
        state = net.AdamState(params)
        for _ in range(2000):
            net.adam_step(params, {"w": 2.0 * params["w"]}, state, 0.01)
        np.testing.assert_allclose(params["w"], 0.0, atol=0.05)

    def test_rejects_bad_gradients(self):
        params = net.Parameters([("w", np.zeros(2))])
        state = net.AdamState(params)
        self.assertRaises(FloatingPointError, net.adam_step, params, {"w": np.array([np.nan, 0.0])}, state, 0.1)
        self.assertRaises(ValueError, net.adam_step, params, {"w": np.zeros(3)}, state, 0.1)
        self.assertEqual(state.step, 0)
        np.testing.assert_array_equal(params["w"], 0.0)


class TestSchedule(unittest.TestCase):

    def test_decoder_milestones(self):
        config = DecoderConfig(epochs=100)
        rates = [net.lr_schedule(e, config) for e in (0, 24, 25, 50, 75, 99)]
        np.testing.assert_allclose(rates, [1e-3, 1e-3, 5e-4, 2.5e-4, 2.5e-4, 2.5e-4])

    def test_encoder_constant(self):
        config = EncoderConfig(lr=3e-4)
        self.assertEqual(net.lr_schedule(0, config), 3e-4)
        self.assertEqual(net.lr_schedule(29, config), 3e-4)

    def test_negative_epoch(self):
        self.assertRaises(ValueError, net.lr_schedule, -1, DecoderConfig())


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.path = os.path.join(self.directory, "model.ckpt")
        self.spec = MlpSpec(3, [4, 2], ["relu", "linear"])
        self.params = net.init_params(self.spec, np.random.default_rng(0))

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_roundtrip(self):
        net.save_checkpoint(self.path, self.spec, self.params, "decoder", {"codes": 3})
        spec, params, header = net.load_checkpoint(self.path, "decoder")
        self.assertEqual(spec, self.spec)
        self.assertEqual(params.names(), self.params.names())
        for name, value in self.params.items():
            np.testing.assert_allclose(params[name], value, rtol=1e-6, atol=1e-7)
        self.assertEqual(header["extra"], {"codes": 3})

    def test_tag_mismatch(self):
        net.save_checkpoint(self.path, self.spec, self.params, "encoder")
        self.assertRaises(ValueError, net.load_checkpoint, self.path, "decoder")

    def test_bad_magic(self):
        with open(self.path, "wb") as f:
            f.write(b"NOPE" + b"\0" * 16)
        self.assertRaises(ValueError, net.load_checkpoint, self.path)

    def test_truncated(self):
        net.save_checkpoint(self.path, self.spec, self.params, "decoder")
        size = os.path.getsize(self.path)
        with open(self.path, "r+b") as f:
            f.truncate(size - 8)
        self.assertRaises(ValueError, net.load_checkpoint, self.path)


if __name__ == "__main__":
    unittest.main()
