import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from specdet import tensor_core as tc
from specdet.tensor_core import DimensionError, InvalidLogitsError, Tensor


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=grad)


class TestTensor:
    def test_zero_dimension_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 0)))

    def test_item_requires_single_element(self):
        assert t([3.0]).item() == 3.0
        with pytest.raises(DimensionError):
            t([1.0, 2.0]).item()

    def test_operator_sugar(self):
        a, b = t([1.0, 2.0]), t([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, [4, 7])
        np.testing.assert_array_equal((a - b).data, [-2, -3])
        np.testing.assert_array_equal((a * b).data, [3, 10])
        np.testing.assert_array_equal((2 * a).data, [2, 4])
        np.testing.assert_array_equal((1 - a).data, [0, -1])
        np.testing.assert_array_equal((a / 2).data, [0.5, 1])
        with pytest.raises(DimensionError):
            a + t([1.0, 2.0, 3.0])


class TestActivations:
    def test_silu_values(self):
        # oracle: x / (1 + exp(-x)) in double precision
        np.testing.assert_allclose(tc.silu(t([0.0, 1.0, -1.0])).data, [0.0, 0.7310585786, -0.2689414214], atol=1e-6)

    def test_silu_is_x_times_sigmoid_exactly(self):
        x = t(np.random.default_rng(0).normal(scale=4, size=100))
        np.testing.assert_array_equal(tc.silu(x).data - x.data * tc.sigmoid(x).data, 0)

    def test_sigmoid_values(self):
        y = tc.sigmoid(Tensor(np.array([0.0, 50.0, -50.0]), dtype=np.float64)).data
        assert y[0] == 0.5
        assert abs(y[1] - 1.0) < 1e-9
        assert abs(y[2]) < 1e-9

    def test_sigmoid_no_overflow(self):
        with np.errstate(over="raise"):
            y = tc.sigmoid(t([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(y, [0.0, 1.0])

    def test_softmax_values(self):
        np.testing.assert_allclose(tc.softmax(t([2.0, 2.0, 2.0])).data, [1 / 3] * 3, atol=1e-7)
        np.testing.assert_allclose(tc.softmax(t([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-7)
        y = tc.softmax(Tensor(np.array([1000.0, 0.0]), dtype=np.float64)).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-9)

    def test_softmax_empty(self):
        with pytest.raises(InvalidLogitsError):
            tc.softmax(Tensor(np.zeros(0)))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)), st.floats(-100, 100))
    def test_softmax_normalized_and_shift_invariant(self, x, c):
        y = tc.softmax(Tensor(x, dtype=np.float64)).data
        assert abs(y.sum() - 1) < 1e-6
        np.testing.assert_allclose(tc.softmax(Tensor(x + c, dtype=np.float64)).data, y, atol=1e-6)
        # order preserving
        assert np.all(np.diff(y[np.argsort(x, kind="stable")]) >= -1e-12)

    def test_log_softmax_matches_log_of_softmax(self):
        x = t([[0.3, -1.0, 2.0], [5.0, 5.0, 5.0]])
        np.testing.assert_allclose(tc.log_softmax(x).data, np.log(tc.softmax(x).data), atol=1e-6)

    def test_smooth_l1(self):
        y = tc.smooth_l1(t([0.0, 0.5, 3.0]), np.zeros(3), beta=1.0).data
        np.testing.assert_allclose(y, [0.0, 0.125, 2.5])


class TestLinearAlgebra:
    def test_linear_examples(self):
        np.testing.assert_array_equal(tc.linear(t([2.0, 3.0]), t(np.eye(2)), t([0.0, 0.0])).data, [2, 3])
        np.testing.assert_array_equal(tc.linear(t([2.0, 3.0]), t([[1.0, 1.0]]), t([1.0])).data, [6])
        np.testing.assert_array_equal(tc.linear(t([7.0, -3.0]), t(np.zeros((1, 2))), t([5.0])).data, [5])

    def test_linear_shape_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3,\).*\(2, 2\)"):
            tc.linear(t([1.0, 2.0, 3.0]), t(np.eye(2)))

    def test_conv_identity_1x1_bit_exact(self):
        x = t(np.random.default_rng(1).normal(size=(2, 1, 5, 5)))
        y = tc.conv2d(x, t(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(y.data, x.data)

    def test_conv_3x3_ones(self):
        y = tc.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), padding=0)
        assert y.shape == (1, 1, 1, 1)
        assert y.data.item() == 9.0

    def test_conv_1x1_channel_mix(self):
        x = np.random.default_rng(2).normal(size=(1, 2, 3, 3)).astype(np.float32)
        a, b = 0.7, -1.3
        y = tc.conv2d(t(x), t(np.array([a, b]).reshape(1, 2, 1, 1)))
        np.testing.assert_allclose(y.data[0, 0], a * x[0, 0] + b * x[0, 1], rtol=1e-6)

    @pytest.mark.parametrize("size,stride,pad,k", [(5, 1, 1, 3), (6, 2, 1, 3), (7, 2, 0, 3), (4, 1, 0, 1)])
    def test_conv_output_dims(self, size, stride, pad, k):
        y = tc.conv2d(t(np.zeros((1, 2, size, size))), t(np.zeros((3, 2, k, k))), stride=stride, padding=pad)
        expect = (size + 2 * pad - k) // stride + 1
        assert y.shape == (1, 3, expect, expect)

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(2, 2, 3, 3))
        y = tc.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 2, 3, 3))
        for o in range(2):
            for i in range(3):
                for j in range(3):
                    ref[0, o, i, j] = (xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_conv_errors(self):
        with pytest.raises(DimensionError, match="channels"):
            tc.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))
        with pytest.raises(DimensionError):
            tc.conv2d(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 5, 5))))


class TestPooling:
    def test_pool_examples(self):
        x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert tc.pool2d(x, "max", 2).data.item() == 4.0
        assert tc.pool2d(x, "avg", 2).data.item() == 2.5
        assert tc.pool2d(t(np.full((1, 1, 4, 4), 1.5)), "max", 2).data.tolist() == [[[[1.5, 1.5], [1.5, 1.5]]]]

    def test_window_too_large(self):
        with pytest.raises(DimensionError):
            tc.pool2d(t(np.zeros((1, 1, 2, 2))), "max", 3)

    def test_max_pool_tie_routes_to_first(self):
        x = t(np.full((1, 1, 2, 2), 7.0), grad=True)
        tc.backward(tc.sum(tc.pool2d(x, "max", 2)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_upsample_and_gap(self):
        x = t(np.arange(4.0).reshape(1, 1, 2, 2))
        up = tc.upsample_nearest(x, 2)
        np.testing.assert_array_equal(up.data[0, 0, :2, :2], [[0, 0], [0, 0]])
        np.testing.assert_array_equal(up.data[0, 0, 2:, 2:], [[3, 3], [3, 3]])
        np.testing.assert_allclose(tc.global_avg_pool(x).data, [[1.5]])


class TestNormalization:
    def test_standardize_moments(self):
        x = t(np.random.default_rng(4).normal(3.0, 2.0, size=(4, 3, 5, 5)))
        y, mu, var = tc.standardize(x, (0, 2, 3))
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-3)
        np.testing.assert_allclose(mu, x.data.mean(axis=(0, 2, 3)), rtol=1e-5)
        np.testing.assert_allclose(var, x.data.var(axis=(0, 2, 3)), rtol=1e-4)

    def test_standardize_single_value_rejected(self):
        with pytest.raises(DimensionError):
            tc.standardize(t(np.zeros((1, 2, 1, 1))))

    def test_channel_affine(self):
        x = t(np.ones((1, 2, 2, 2)))
        y = tc.channel_affine(x, t([2.0, 3.0]), t([0.5, -1.0]))
        np.testing.assert_array_equal(y.data[0, 0], 2.5)
        np.testing.assert_array_equal(y.data[0, 1], 2.0)

    def test_l2_normalize(self):
        y = tc.l2_normalize(t([[3.0, 4.0], [0.0, 0.0]])).data
        np.testing.assert_allclose(y, [[0.6, 0.8], [0.0, 0.0]])

    def test_euclidean_distance_zero_subgradient(self):
        a = t([[1.0, 2.0]], grad=True)
        b = t([[1.0, 2.0]], grad=True)
        d = tc.euclidean_distance(a, b)
        tc.backward(tc.sum(d))
        assert d.data.item() == 0.0
        np.testing.assert_array_equal(a.grad, 0)
        np.testing.assert_array_equal(b.grad, 0)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t(np.zeros((2, 3, 4)), grad=True)
        tc.backward(tc.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_silu_gradient_at_zero(self):
        x = t([0.0], grad=True)
        tc.backward(tc.sum(tc.silu(x)))
        assert x.grad.item() == 0.5

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(DimensionError):
            tc.backward(t([1.0, 2.0], grad=True))

    def test_accumulates_without_clearing(self):
        x = t([1.0, 2.0], grad=True)
        loss = tc.sum(tc.mul(x, x))
        tc.backward(loss)
        tc.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_repeat_with_clearing_is_identical(self):
        rng = np.random.default_rng(5)
        x = t(rng.normal(size=(1, 2, 4, 4)), grad=True)
        w = t(rng.normal(size=(3, 2, 3, 3)), grad=True)
        loss = tc.sum(tc.silu(tc.conv2d(x, w, padding=1)))
        tc.backward(loss)
        first = (x.grad.copy(), w.grad.copy())
        tc.zero_grad([x, w])
        tc.backward(loss)
        np.testing.assert_array_equal(x.grad, first[0])
        np.testing.assert_array_equal(w.grad, first[1])

    def test_shared_subexpression(self):
        x = t([3.0], grad=True)
        y = tc.mul(x, x)
        tc.backward(tc.sum(tc.add(y, y)))
        assert x.grad.item() == 12.0

    def test_tape_topological_order(self):
        x = t([1.0], grad=True)
        y = tc.exp(x)
        z = tc.add(tc.mul(y, x), y)
        tape = tc.ComputationTape.record(tc.sum(z))
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        assert len(pos) == len(tape.nodes)

    def test_no_grad_records_nothing(self):
        x = t([1.0], grad=True)
        with tc.no_grad():
            y = tc.exp(x)
        assert not y.requires_grad and y._parents == ()

    def test_finite_outputs_on_finite_inputs(self):
        x = t(np.linspace(-80, 80, 33))
        for op in (tc.sigmoid, tc.silu, tc.softplus, lambda v: tc.softmax(v), lambda v: tc.log_softmax(v)):
            assert np.all(np.isfinite(op(x).data))


class TestTnsr:
    def test_layout(self):
        buf = io.BytesIO()
        tc.write_tnsr(buf, np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
        raw = buf.getvalue()
        assert raw[:4] == b"TNSR"
        assert raw[4:8] == (2).to_bytes(4, "little")
        assert raw[8:16] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert np.frombuffer(raw[16:], dtype="<f4").tolist() == [1.0, 2.0, 3.0]

    def test_roundtrip_many(self, tmp_path):
        rng = np.random.default_rng(6)
        arrays = [rng.normal(size=s).astype(np.float32) for s in [(3,), (2, 4), (1, 2, 3, 3), ()]]
        tc.save_tnsr(tmp_path / "x.tnsr", arrays)
        back = tc.load_tnsr(tmp_path / "x.tnsr")
        assert len(back) == 4
        for a, b in zip(arrays, back):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic(self):
        with pytest.raises(tc.TensorFormatError):
            tc.read_tnsr(io.BytesIO(b"XXXX\x00\x00\x00\x00"))

    def test_truncated(self):
        buf = io.BytesIO()
        tc.write_tnsr(buf, np.ones(4, dtype=np.float32))
        with pytest.raises(tc.TensorFormatError):
            tc.read_tnsr(io.BytesIO(buf.getvalue()[:-2]))
