import numpy as np
import pytest

from style_recal import tensor as T
from style_recal.tensor import GradCheckError, ShapeError, Tape, Tensor, grad_check, using_dtype


def naive_conv2d(x, w, stride=1, padding=0):
    """Direct quadruple-loop convolution oracle, deliberately obvious."""
    n, cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wid + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for oc in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += x[ni, ic, oy * stride + ky, ox * stride + kx] * w[oc, ic, ky, kx]
                    out[ni, oc, oy, ox] = acc
    return out


class TestConv2d:
    def test_all_ones_center_and_corners(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=1, padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        for cy, cx in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out.data[0, 0, cy, cx] == 4.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 1, 4, 4)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        out = T.conv2d(x, w)
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_naive_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        want = naive_conv2d(x, w, stride=stride, padding=padding)
        rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-12)
        assert rel.max() < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((3, 5, 3, 3)))
        with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
            T.conv2d(x, w)

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


class TestElementwiseAndReductions:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor(np.zeros(3))).data[0] == 0.5

    def test_sigmoid_stable_in_tails(self):
        out = T.sigmoid(Tensor(np.array([-1000.0, 1000.0])))
        assert np.isfinite(out.data).all()
        assert out.data[0] == 0.0 and out.data[1] == 1.0

    def test_mean_of_constant_channel(self):
        x = Tensor(np.full((1, 1, 4, 4), 7.0))
        assert T.tmean(x, axis=(2, 3)).data[0, 0] == 7.0

    def test_channel_broadcast_multiply_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4, 4))
        vec = np.array([1.0, 0.0, 2.0])
        got = (Tensor(x) * Tensor(vec.reshape(1, 3, 1, 1))).data
        for n in range(2):
            for c in range(3):
                for i in range(4):
                    for j in range(4):
                        assert got[n, c, i, j] == x[n, c, i, j] * vec[c]
        assert (got[:, 1] == 0).all()

    def test_non_broadcastable_rejected(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_scale_channels_zeroes_and_doubles(self):
        x = Tensor(np.ones((1, 3, 2, 2)))
        g = Tensor(np.array([[1.0, 0.0, 2.0]]))
        out = T.scale_channels(x, g).data
        assert (out[0, 0] == 1).all() and (out[0, 1] == 0).all() and (out[0, 2] == 2).all()

    def test_amax_ge_mean(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(3, 4, 5, 5)))
        assert (T.amax(x, axis=(2, 3)).data >= T.tmean(x, axis=(2, 3)).data).all()


class TestTape:
    def test_fanout_accumulates(self):
        with using_dtype(np.float64):
            x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
            with Tape() as tape:
                f = T.tsum(x * x)
                g = T.tsum(3.0 * x)
                loss = f + g
            tape.backward(loss)
            np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)

    def test_grad_of_product_sum_is_other_operand(self):
        with using_dtype(np.float64):
            x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
            y = Tensor(np.array([4.0, 5.0, 6.0]), requires_grad=True)
            with Tape() as tape:
                loss = T.tsum(x * y)
            tape.backward(loss)
            np.testing.assert_array_equal(x.grad, y.data)
            np.testing.assert_array_equal(y.grad, x.data)

    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = x + 1.0
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_no_tape_no_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        assert y.requires_grad
        tape = Tape()
        with tape:
            pass
        assert len(tape) == 0

    def test_forward_bit_identical_across_runs(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)

        def run():
            out = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=1)
            out = T.relu(out)
            return T.tmean(out, axis=(2, 3)).data.tobytes()

        assert run() == run()


class TestGradCheck:
    def test_sigmoid_gradient_quarter_at_zero(self):
        with using_dtype(np.float64):
            x = Tensor(np.zeros(1), dtype=np.float64)
            err = grad_check(lambda ts: T.tsum(T.sigmoid(ts[0])), [x])
            assert err < 1e-7
            assert abs(x.grad[0] - 0.25) < 1e-12

    def test_rejects_float32_inputs(self):
        x = Tensor(np.zeros(1, dtype=np.float32))
        with pytest.raises(ValueError, match="float64"):
            grad_check(lambda ts: T.tsum(ts[0]), [x])

    def test_rejects_nonpositive_eps(self):
        x = Tensor(np.zeros(1), dtype=np.float64)
        with pytest.raises(ValueError):
            grad_check(lambda ts: T.tsum(ts[0]), [x], eps=0.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # deliberate 0/0
    def test_nonfinite_loss_aborts(self):
        x = Tensor(np.zeros(1), dtype=np.float64)

        def fn(ts):
            return T.tsum(ts[0] / ts[0])  # 0/0

        with pytest.raises(GradCheckError):
            grad_check(fn, [x])

    @pytest.mark.parametrize("seed", range(10))
    def test_conv_via_finite_differences(self, seed):
        with using_dtype(np.float64):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=(2, 2, 4, 4)), dtype=np.float64)
            w = Tensor(rng.normal(size=(3, 2, 3, 3)), dtype=np.float64)
            err = grad_check(
                lambda ts: T.tsum(T.mul(T.conv2d(ts[0], ts[1], 1, 1), T.conv2d(ts[0], ts[1], 1, 1))),
                [x, w],
                eps=1e-5,
            )
            assert err < 1e-4


class TestDtypeModes:
    def test_default_dtype_switch(self):
        with using_dtype(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_invalid_dtype_rejected(self):
        with pytest.raises(ValueError):
            T.set_default_dtype(np.int32)

    def test_tensor_invariant_size(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 and t.shape == (2, 3, 4)

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError, match="extents"):
            Tensor(np.zeros((2, 0, 3)))
