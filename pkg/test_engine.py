# Dependencies:
# pip install pytest
import numpy as np
import pytest

from engine import functional as F
from engine.gradcheck import check_gradients, default_cases, relative_error, run_suite
from engine.optim import Adam
from engine.tensor import ComputationRecord, Tensor, backward_pass
from engine.weights import (MAGIC, decode_weights, encode_weights, load_weights, parameter_hash,
                            save_weights)
from models.loss import gradcheck_cases
from utils.error_utils import ConfigurationError, ShapeError, UsageError, WeightFormatError


def conv_oracle(x, w, b, stride, padding, dilation):
    batch, cin, height, width = x.shape
    cout, _, k, _ = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out_w = (width + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((batch, cout, out_h, out_w))
    for n in range(batch):
        for o in range(cout):
            for i in range(out_h):
                for j in range(out_w):
                    total = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                total += w[o, c, u, v] * padded[n, c, i * stride + u * dilation,
                                                                j * stride + v * dilation]
                    out[n, o, i, j] = total
    return out


class TestTensor:

    # Non-float input is stored as float32, float64 is kept
    def test_dtype_policy(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64

    # item() only works on single-element tensors
    def test_item_requires_scalar(self):
        assert Tensor([[2.5]]).item() == 2.5
        with pytest.raises(UsageError):
            Tensor([1.0, 2.0]).item()

    # Every operation's inputs precede it in the record
    def test_record_is_topological(self):
        # Setup
        x = Tensor(np.ones(3), requires_grad=True)
        y = F.mul(x, 2.0)
        z = F.add(y, x)
        loss = F.sum(z)

        # Execute
        record = ComputationRecord(loss)

        # Assert
        position = {id(node): i for i, node in enumerate(record.nodes)}
        for node in record.nodes:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]
        assert record.nodes[-1] is loss

    # d/dx sum(x * x) = 2x, accumulated through a shared input
    def test_backward_square(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        loss = F.sum(F.mul(x, x))
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    # Full reductions stay 0-d and backpropagate to every element
    def test_mean_is_scalar(self):
        # Setup
        x = Tensor(np.arange(3.0), requires_grad=True)

        # Execute
        loss = F.mean(x)
        backward_pass(ComputationRecord(loss), loss)

        # Assert
        assert loss.shape == ()
        assert Tensor(2.5).shape == ()
        np.testing.assert_allclose(x.grad, np.full(3, 1.0 / 3.0))

    # Non-contiguous views are stored contiguously with their shape intact
    def test_transposed_input_copied(self):
        view = np.arange(6.0).reshape(2, 3).T
        tensor = Tensor(view)
        assert tensor.data.flags.c_contiguous
        np.testing.assert_array_equal(tensor.data, view)

    # Backward from a non-scalar is refused
    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = F.mul(x, 2.0)
        with pytest.raises(UsageError):
            backward_pass(ComputationRecord(y), y)

    # The first op producing NaN from finite inputs is named
    def test_first_nonfinite_names_log(self):
        # Setup
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        with np.errstate(invalid="ignore"):
            loss = F.sum(F.mul(F.log(x), 3.0))

        # Execute
        culprit = ComputationRecord(loss).first_nonfinite()

        # Assert
        assert culprit is not None
        assert culprit.op == "log"

    # A finite graph has no culprit
    def test_first_nonfinite_none_when_finite(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        assert ComputationRecord(F.sum(F.exp(x))).first_nonfinite() is None


class TestFunctional:

    # conv2d matches the brute-force loop on random geometries
    def test_conv2d_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            # Setup
            cin, cout, k = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.choice([1, 3]))
            stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
            size = int(rng.integers(k + 1, 7))
            x = rng.standard_normal((1, cin, size, size))
            w = rng.standard_normal((cout, cin, k, k))
            b = rng.standard_normal(cout)

            # Execute
            out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)

            # Assert
            np.testing.assert_allclose(out.data, conv_oracle(x, w, b, stride, padding, 1), atol=1e-6)

    # Dilated convolution with padding = dilation keeps the extent and matches the oracle
    def test_dilated_conv_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            dilation = int(rng.integers(1, 4))
            size = int(rng.integers(2 * dilation + 1, 9))
            x = rng.standard_normal((1, 2, size, size))
            w = rng.standard_normal((2, 2, 3, 3))
            out = F.conv2d(Tensor(x), Tensor(w), None, 1, dilation, dilation)
            assert out.shape == (1, 2, size, size)
            np.testing.assert_allclose(out.data, conv_oracle(x, w, None, 1, dilation, dilation), atol=1e-6)

    # A geometry with no output pixels is a configuration error
    def test_conv2d_empty_output(self):
        with pytest.raises(ConfigurationError):
            F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    # Kernel channel mismatch is a shape error
    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    # Max pooling picks the window maximum with -inf padding
    def test_max_pool(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        out = F.max_pool2d(x, 2, 2, 0)
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    # Half-pixel bilinear weights for a 2 -> 4 upsample
    def test_interpolation_matrix(self):
        matrix = F.interpolation_matrix(2, 4, np.float64)
        np.testing.assert_allclose(matrix, [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])

    # Resizing to the same size is the identity
    def test_bilinear_identity(self, rng):
        x = rng.standard_normal((1, 2, 5, 3))
        np.testing.assert_array_equal(F.bilinear_resize(Tensor(x), 5, 3).data, x)

    # Softmax rows sum to one, log_softmax agrees with log(softmax)
    def test_softmax(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)) * 10)
        probs = F.softmax(x, axis=1)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(F.log_softmax(x, axis=1).data, np.log(probs.data), atol=1e-10)

    # Concat followed by split gives the parts back
    def test_concat_split(self, rng):
        a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 4, 3, 3))
        first, second = F.split(F.concat([Tensor(a), Tensor(b)], axis=1), [2, 4], axis=1)
        np.testing.assert_array_equal(first.data, a)
        np.testing.assert_array_equal(second.data, b)

    # Head count must divide the embedding dimension
    def test_attention_heads_must_divide(self, rng):
        dim = 6
        params = F.AttentionParams(*[Tensor(rng.standard_normal((dim, dim)) if i % 2 == 0 else np.zeros(dim))
                                     for i in range(8)])
        with pytest.raises(ConfigurationError):
            F.multi_head_self_attention(Tensor(rng.standard_normal((1, 4, dim))), params, heads=4)

    # Attention weights are row-stochastic
    def test_attention_weights(self, rng):
        dim = 8
        params = F.AttentionParams(*[Tensor(rng.standard_normal((dim, dim)) if i % 2 == 0 else np.zeros(dim))
                                     for i in range(8)])
        out, weights = F.multi_head_self_attention(Tensor(rng.standard_normal((2, 5, dim))), params, 2,
                                                   return_weights=True)
        assert out.shape == (2, 5, dim)
        assert weights.shape == (2, 2, 5, 5)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


class TestGradcheck:

    # Every differentiable op passes the finite-difference check in double precision
    def test_default_suite_passes(self):
        results = run_suite(default_cases(), trials=10, seed=0)
        failed = {r.name: r.max_relative_error for r in results if not r.passed}
        assert failed == {}

    # The training objective passes as well
    def test_loss_cases_pass(self):
        results = run_suite(gradcheck_cases(), trials=10, seed=3)
        assert all(r.passed for r in results)

    # A wrong backward rule is caught
    def test_detects_wrong_gradient(self):
        # Setup
        from engine.tensor import make_result

        def broken_square(x):
            return make_result(x.data ** 2, (x,), "broken_square", lambda g: (g * x.data,))

        # Execute
        error = check_gradients(broken_square, [np.array([0.5, 1.5, -2.0])])

        # Assert
        assert error > 1e-3

    # Rounding noise on a gradient that is identically zero is not an error
    def test_vanishing_gradient_passes(self, rng):
        # Setup: softmax ignores a per-row shift, so d/d(shift) is exactly zero
        logits = rng.standard_normal((4, 5)) * 3.0
        shift = rng.standard_normal((4, 1))

        # Execute
        error = check_gradients(lambda x, b: F.softmax(F.add(x, b), axis=-1), [logits, shift])

        # Assert
        assert error < 1e-6
        assert relative_error(np.zeros(3), np.full(3, 1e-11)) < 1e-6

    # The attention case with its key bias passes on its own
    def test_attention_key_bias(self):
        results = run_suite({'attention': default_cases()['multi_head_self_attention']}, trials=10)
        assert results[0].passed


class TestWeights:

    # Save then load gives identical float32 arrays in the same order
    def test_round_trip(self, tmp_path, rng):
        tensors = {'a.weight': rng.standard_normal((2, 3)).astype(np.float32), 'b': np.float32([1.5])}
        path = str(tmp_path / "w.aqsw")
        save_weights(path, tensors)
        loaded = load_weights(path)
        assert list(loaded) == ['a.weight', 'b']
        np.testing.assert_array_equal(loaded['a.weight'], tensors['a.weight'])

    # Bad magic is reported at offset 0
    def test_bad_magic(self):
        with pytest.raises(WeightFormatError) as error:
            decode_weights(b"NOPE" + b"\x00" * 8)
        assert error.value.details['offset'] == 0

    # A truncated payload reports where reading stopped
    def test_truncated(self):
        buffer = encode_weights({'x': np.ones((2, 2), dtype=np.float32)})
        with pytest.raises(WeightFormatError) as error:
            decode_weights(buffer[:-3])
        assert error.value.details['offset'] == len(buffer) - 16
        assert buffer[:4] == MAGIC

    # Trailing bytes are rejected
    def test_trailing_bytes(self):
        buffer = encode_weights({'x': np.ones(1, dtype=np.float32)})
        with pytest.raises(WeightFormatError):
            decode_weights(buffer + b"\x00")

    # The hash depends on values and names, not on object identity
    def test_parameter_hash(self):
        a = {'x': np.ones(3, dtype=np.float32)}
        assert parameter_hash(a) == parameter_hash({'x': np.ones(3, dtype=np.float32)})
        assert parameter_hash(a) != parameter_hash({'x': np.full(3, 2.0, dtype=np.float32)})
        assert parameter_hash(a) != parameter_hash({'y': np.ones(3, dtype=np.float32)})


class TestAdam:

    # First step moves each parameter by about lr against the gradient sign
    def test_first_step(self):
        # Setup
        param = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        optimizer = Adam([param], lr=0.1)
        param.grad = np.array([0.5, -2.0])

        # Execute
        optimizer.step()

        # Assert
        np.testing.assert_allclose(param.data, [0.9, -0.9], atol=1e-6)

    # Frozen tensors are refused
    def test_rejects_frozen(self):
        with pytest.raises(UsageError):
            Adam([Tensor(np.ones(2), requires_grad=False)])

    # zero_grad clears gradients
    def test_zero_grad(self):
        param = Tensor(np.ones(2), requires_grad=True)
        param.grad = np.ones(2)
        optimizer = Adam([param])
        optimizer.zero_grad()
        assert param.grad is None
