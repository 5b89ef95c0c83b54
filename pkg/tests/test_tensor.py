import cv2
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import signal

from recurflow import tensor as T
from recurflow.errors import ContractError, DimensionError
from recurflow.gradcheck import check_function
from recurflow.tensor import Parameter, Tensor, no_grad


def conv_oracle(x, w, b, stride, padding):
    """Direct scipy cross-correlation per (batch, out, in) triple."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    bsz, cout = x.shape[0], w.shape[0]
    full = np.zeros((bsz, cout, xp.shape[2] - w.shape[2] + 1, xp.shape[3] - w.shape[3] + 1))
    for n in range(bsz):
        for o in range(cout):
            for i in range(x.shape[1]):
                full[n, o] += signal.correlate2d(xp[n, i], w[o, i], mode="valid")
            full[n, o] += b[o]
    return full[:, :, ::stride, ::stride]


class TestConv2d:
    def test_ones_center_is_nine(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
        assert out.values[0, 0, 1, 1] == 9.0
        assert out.values[0, 0, 0, 0] == 4.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 4))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.values, x)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_scipy(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).values
        np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)

    def test_dilation_matches_expanded_kernel(self, rng):
        x = rng.normal(size=(1, 2, 9, 9))
        w = rng.normal(size=(3, 2, 3, 3))
        wide = np.zeros((3, 2, 5, 5))
        wide[:, :, ::2, ::2] = w
        got = T.conv2d(Tensor(x), Tensor(w), None, padding=2, dilation=2).values
        want = T.conv2d(Tensor(x), Tensor(wide), None, padding=2).values
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_gradients_finite_differences(self, rng):
        res = check_function(
            "conv2d",
            lambda x, w, b: T.conv2d(x, w, b, padding=1),
            [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)],
            rng,
            samples=12,
        )
        assert res.max_rel_error < 1e-4

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match="axis 1"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractError):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_bias_shape_checked(self):
        with pytest.raises(DimensionError, match="bias"):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))


class TestElementwise:
    def test_leaky_relu_values(self):
        out = T.leaky_relu(Tensor(np.array([2.0, -2.0, 0.0])), 0.1).values
        np.testing.assert_allclose(out, [2.0, -0.2, 0.0])

    def test_leaky_relu_kink_subgradient_is_slope(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        T.tsum(T.leaky_relu(x, 0.1)).backward()
        assert x.grad[0] == pytest.approx(0.1)

    def test_sigmoid_values(self):
        out = T.sigmoid(Tensor(np.array([0.0, 50.0, -50.0, -800.0]))).values
        assert out[0] == 0.5
        assert abs(out[1] - 1.0) < 1e-9
        assert 0.0 <= out[2] < 1e-9
        assert np.isfinite(out).all()

    def test_sqrt_subgradient_zero_at_origin(self):
        x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
        T.tsum(T.sqrt(x)).backward()
        np.testing.assert_allclose(x.grad, [0.0, 0.25])

    @pytest.mark.parametrize(
        "name,fn,shapes",
        [
            ("leaky_relu", lambda x: T.leaky_relu(x, 0.1), [(3, 4)]),
            ("sigmoid", T.sigmoid, [(3, 4)]),
            ("mul", T.mul, [(2, 3), (3,)]),
            ("div", T.div, [(2, 3), (2, 1)]),
            ("getitem", lambda x: x[:, 1:3], [(2, 4)]),
        ],
    )
    def test_finite_differences(self, rng, name, fn, shapes):
        inputs = [rng.uniform(-1, 1, size=s) for s in shapes]
        if name == "div":
            inputs[1] = np.abs(inputs[1]) + 0.5
        if name == "leaky_relu":
            inputs[0] = np.where(np.abs(inputs[0]) < 1e-3, 0.5, inputs[0])
        assert check_function(name, fn, inputs, rng, samples=6).max_rel_error < 1e-4


class TestConcat:
    def test_flow_and_occlusion_channels(self):
        out = T.concat([Tensor(np.zeros((2, 2, 4, 4))), Tensor(np.ones((2, 1, 4, 4)))], axis=1)
        assert out.shape == (2, 3, 4, 4)

    def test_single_input_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 3, 3)))
        assert T.concat([x], axis=1) is x

    def test_gradient_is_split(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 1, 3)), requires_grad=True)
        w = rng.normal(size=(1, 3, 3))
        T.tsum(T.concat([a, b], axis=1) * Tensor(w)).backward()
        np.testing.assert_array_equal(a.grad, w[:, :2])
        np.testing.assert_array_equal(b.grad, w[:, 2:])

    def test_mismatched_extent(self):
        with pytest.raises(DimensionError, match="axis 2"):
            T.concat([Tensor(np.zeros((1, 1, 3))), Tensor(np.zeros((1, 1, 4)))], axis=1)


class TestResampling:
    def test_constant_preserved(self):
        out = T.upsample2x(Tensor(np.full((1, 2, 3, 5), 1.7))).values
        assert out.shape == (1, 2, 6, 10)
        np.testing.assert_allclose(out, 1.7, rtol=0, atol=1e-15)

    def test_row_interpolates_monotonically(self):
        out = T.upsample2x(Tensor(np.array([[[[0.0, 2.0]]]]))).values[0, 0, 0]
        np.testing.assert_allclose(out, [0.0, 0.5, 1.5, 2.0])
        assert np.all(np.diff(out) > 0)

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-10, 10)))
    def test_matches_opencv_bilinear(self, img):
        h, w = img.shape
        want = cv2.resize(img, (2 * w, 2 * h), interpolation=cv2.INTER_LINEAR)
        got = T.upsample2x(Tensor(img[None, None])).values[0, 0]
        # opencv evaluates the weights in reduced precision
        np.testing.assert_allclose(got, want, atol=1e-4 * (1 + np.abs(img).max()))

    def test_upsample_adjoint(self, rng):
        x = rng.normal(size=(1, 2, 3, 4))
        y = rng.normal(size=(1, 2, 6, 8))
        xt = Tensor(x, requires_grad=True)
        T.tsum(T.upsample2x(xt) * Tensor(y)).backward()
        lhs = np.vdot(T.upsample2x(Tensor(x)).values, y)
        assert np.vdot(x, xt.grad) == pytest.approx(lhs, rel=1e-12)

    def test_avg_pool_odd_rejected(self):
        with pytest.raises(DimensionError):
            T.avg_pool2x(Tensor(np.zeros((1, 1, 3, 4))))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_at_three(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        T.tsum(x * x).backward()
        assert x.grad[0] == 6.0

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_repeated_calls_accumulate(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = T.tsum(x * x)
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_diamond_graph_visits_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * 3.0
        z = y + y * y
        T.tsum(z).backward()
        assert x.grad[0] == pytest.approx(3.0 + 2 * 6.0 * 3.0)

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        T.tsum(y).backward()
        assert x.grad[0] == 1.0

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, a, b):
        rng = np.random.default_rng(0)
        xv = rng.normal(size=(2, 3))

        def grad_of(fn):
            x = Tensor(xv, requires_grad=True)
            T.tsum(fn(x)).backward()
            return x.grad

        def f(x):
            return T.sigmoid(x) * x

        def g(x):
            return T.leaky_relu(x * 2.0, 0.1)

        combo = grad_of(lambda x: f(x) * a + g(x) * b)
        np.testing.assert_allclose(combo, a * grad_of(f) + b * grad_of(g), atol=1e-12)

    def test_shared_parameter_sums_sites(self, rng):
        w = Parameter(rng.normal(size=(2, 2, 3, 3)), "shared.weight")
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        y1 = T.conv2d(x, w, padding=1)
        y2 = T.conv2d(T.leaky_relu(y1, 0.1), w, padding=1)
        T.tsum(y2).backward()
        both = w.grad.copy()

        # each site on its own, with the other site's weights frozen as constants
        w1 = Tensor(w.values.copy(), requires_grad=True)
        T.tsum(T.conv2d(T.leaky_relu(T.conv2d(x, w1, padding=1), 0.1), Tensor(w.values), padding=1)).backward()
        w2 = Tensor(w.values.copy(), requires_grad=True)
        T.tsum(T.conv2d(T.leaky_relu(T.conv2d(x, Tensor(w.values), padding=1), 0.1), w2, padding=1)).backward()
        np.testing.assert_allclose(both, w1.grad + w2.grad, rtol=1e-12)

    def test_mutating_shared_parameter_affects_all_sites(self, rng):
        w = Parameter(np.ones((1, 1, 1, 1)), "w")
        x = Tensor(np.ones((1, 1, 2, 2)))
        before = T.conv2d(T.conv2d(x, w), w).values.copy()
        w.values = w.values * 3.0
        after = T.conv2d(T.conv2d(x, w), w).values
        np.testing.assert_array_equal(after, before * 9.0)

    def test_deterministic(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        wv = rng.normal(size=(3, 2, 3, 3))

        def run():
            w = Tensor(wv, requires_grad=True)
            T.tsum(T.sigmoid(T.conv2d(Tensor(x), w, padding=1))).backward()
            return w.grad

        np.testing.assert_array_equal(run(), run())

    def test_grad_shapes_match_values(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3, 1, 1)), requires_grad=True)
        T.tsum(T.upsample2x(a * b)).backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape
