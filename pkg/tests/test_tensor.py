import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featenhancer import tensor as T
from featenhancer.gradcheck import NonDeterministicError, finite_diff_grad, relative_error
from featenhancer.tensor import ConvSpec, ShapeError, Tape, TapeError, Tensor


def param(x):
    return Tensor(x, requires_grad=True)


def tape_grad(build, *params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [p.grad for p in params]


def fd_check(build, *params, eps=1e-5):
    analytic = tape_grad(build, *params)
    numeric = finite_diff_grad(lambda: build().item(), params, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def conv_loops(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    c_out, c_in, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (x.shape[1] + 2 * pad - k) // stride + 1
    wo = (x.shape[2] + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                win = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(win * w[o]) + b[o]
    return out


class TestConv2d:
    def test_window_sums(self):
        x = Tensor(np.ones((1, 3, 3)))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), ConvSpec(1, 1, 3))
        assert out.data[0, 1, 1] == 9.0
        assert out.data[0, 0, 0] == 4.0

    def test_quarter_scale_shape(self):
        x = Tensor(np.zeros((3, 256, 256)))
        spec = ConvSpec(3, 3, 7, 4)
        out = T.conv2d(x, Tensor(np.zeros(spec.weight_shape)), Tensor(np.zeros(3)), spec)
        assert out.shape == (3, 64, 64)

    @pytest.mark.parametrize("k,s", [(1, 1), (3, 1), (3, 2), (7, 4), (3, 4)])
    def test_matches_loops(self, k, s):
        rng = np.random.default_rng(k * 10 + s)
        x, w, b = rng.normal(size=(2, 9, 11)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
        spec = ConvSpec(3, 2, k, s)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), spec)
        np.testing.assert_allclose(out.data, conv_loops(x, w, b, s, k // 2), atol=1e-12)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(4, 2, 8, 8)), rng.normal(size=(5, 2, 3, 3)), rng.normal(size=5)
        spec = ConvSpec(5, 2, 3, 2)
        batched = T.conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
        for i in range(4):
            np.testing.assert_allclose(batched[i], T.conv2d(Tensor(x[i]), Tensor(w), Tensor(b), spec).data,
                                       atol=1e-13)

    def test_weight_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 8, 8)))
        w, b = param(rng.normal(size=(3, 2, 3, 3))), param(rng.normal(size=3))
        spec = ConvSpec(3, 2, 3)
        assert fd_check(lambda: T.sum_all(T.conv2d(x, w, b, spec)), w, b) < 1e-6

    @pytest.mark.parametrize("k,s", [(3, 1), (3, 2), (7, 4), (1, 1)])
    def test_input_gradient_matches_fd(self, k, s):
        rng = np.random.default_rng(k + s)
        x = param(rng.normal(size=(2, 2, 8, 8)))
        w, b = param(rng.normal(size=(3, 2, k, k))), param(rng.normal(size=3))
        g = Tensor(rng.normal(size=(2, 3, (8 - 1) // s + 1, (8 - 1) // s + 1)))
        spec = ConvSpec(3, 2, k, s)
        assert fd_check(lambda: T.sum_all(T.mul(T.conv2d(x, w, b, spec), g)), x, w, b) < 1e-6

    def test_shape_errors(self):
        spec = ConvSpec(2, 3, 3)
        w, b = Tensor(np.zeros(spec.weight_shape)), Tensor(np.zeros(2))
        with pytest.raises(ShapeError, match="input channels"):
            T.conv2d(Tensor(np.zeros((4, 5, 5))), w, b, spec)
        with pytest.raises(ShapeError, match="weight shape"):
            T.conv2d(Tensor(np.zeros((3, 5, 5))), Tensor(np.zeros((2, 3, 5, 5))), b, spec)
        with pytest.raises(ShapeError, match="zero-size"):
            spec0 = ConvSpec(1, 1, 7, 1, padding=0)
            T.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros(spec0.weight_shape)), Tensor([0.0]), spec0)

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(1, 20), w=st.integers(1, 20), k=st.sampled_from([1, 3, 5, 7]),
           s=st.integers(1, 4))
    def test_output_size_formula(self, h, w, k, s):
        spec = ConvSpec(1, 1, k, s)
        out = T.conv2d(Tensor(np.zeros((1, h, w))), Tensor(np.zeros(spec.weight_shape)), Tensor([0.0]), spec)
        p = k // 2
        assert out.shape == (1, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_add_zero_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3))
        np.testing.assert_array_equal(T.add(Tensor(x), Tensor(np.zeros((2, 3)))).data, x)

    def test_relu_gradient(self):
        x = param([-1.0, 2.0])
        (g,) = tape_grad(lambda: T.sum_all(T.relu(x)), x)
        np.testing.assert_array_equal(g, [0.0, 1.0])
        numeric = finite_diff_grad(lambda: T.sum_all(T.relu(x)).item(), [x])[0]
        np.testing.assert_allclose(numeric, [0.0, 1.0], atol=1e-9)

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
        with pytest.raises(ShapeError):
            T.mul(Tensor(np.zeros(2)), Tensor(np.zeros((2, 1))))

    def test_dispatch(self):
        a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
        np.testing.assert_array_equal(T.elementwise("mul", a, b).data, [3.0, -8.0])
        np.testing.assert_array_equal(T.elementwise("scale", a, 2.0).data, [2.0, -4.0])
        with pytest.raises(ValueError):
            T.elementwise("tanh", a)

    def test_mul_scale_gradients(self):
        rng = np.random.default_rng(1)
        a, b = param(rng.normal(size=5)), param(rng.normal(size=5))
        assert fd_check(lambda: T.sum_all(T.scale(T.mul(a, b), 3.0)), a, b) < 1e-8


class TestChannels:
    def test_concat(self):
        a = Tensor(np.array([1.0, 2.0]).reshape(2, 1, 1))
        b = Tensor(np.array([3.0]).reshape(1, 1, 1))
        np.testing.assert_array_equal(T.concat_channels(a, b).data.ravel(), [1.0, 2.0, 3.0])

    def test_concat_slice_round_trip(self):
        rng = np.random.default_rng(2)
        a, b = Tensor(rng.normal(size=(3, 4, 5))), Tensor(rng.normal(size=(2, 4, 5)))
        c = T.concat_channels(a, b)
        assert np.array_equal(T.slice_channels(c, 0, 3).data, a.data)
        assert np.array_equal(T.slice_channels(c, 3, 5).data, b.data)

    def test_concat_gradient_is_ones(self):
        a, b = param(np.zeros((2, 2, 2))), param(np.zeros((1, 2, 2)))
        ga, gb = tape_grad(lambda: T.sum_all(T.concat_channels(a, b)), a, b)
        np.testing.assert_array_equal(ga, np.ones((2, 2, 2)))
        np.testing.assert_array_equal(gb, np.ones((1, 2, 2)))
        na, nb = finite_diff_grad(lambda: T.sum_all(T.concat_channels(a, b)).item(), [a, b])
        np.testing.assert_allclose(na, 1.0, atol=1e-9)
        np.testing.assert_allclose(nb, 1.0, atol=1e-9)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 3))))

    def test_full_slice_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 2, 2))
        assert np.array_equal(T.slice_channels(Tensor(x), 0, 4).data, x)

    def test_blocks_tile_channels(self):
        x = Tensor(np.arange(32.0).reshape(32, 1, 1))
        parts = [T.slice_channels(x, 4 * n, 4 * (n + 1)).data.ravel() for n in range(8)]
        np.testing.assert_array_equal(np.concatenate(parts), np.arange(32.0))

    def test_split_gradients_sum_to_whole(self):
        rng = np.random.default_rng(4)
        x = param(rng.normal(size=(6, 2, 2)))
        weights = [Tensor(rng.normal(size=(2, 2, 2))) for _ in range(3)]

        def split_loss():
            terms = [T.sum_all(T.mul(T.slice_channels(x, 2 * n, 2 * n + 2), weights[n])) for n in range(3)]
            return T.add(T.add(terms[0], terms[1]), terms[2])

        (g,) = tape_grad(split_loss, x)
        whole = np.concatenate([w.data for w in weights])
        np.testing.assert_allclose(g, whole, atol=1e-14)
        assert fd_check(split_loss, x) < 1e-8

    @pytest.mark.parametrize("lo,hi", [(-1, 2), (2, 2), (0, 5), (3, 1)])
    def test_slice_range_errors(self, lo, hi):
        with pytest.raises(ShapeError):
            T.slice_channels(Tensor(np.zeros((4, 1, 1))), lo, hi)


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.eye(4))).data, a)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_frobenius_gradient(self):
        rng = np.random.default_rng(5)
        a, b = param(rng.normal(size=(5, 3))), param(rng.normal(size=(3, 4)))

        def frob():
            p = T.matmul(a, b)
            return T.sum_all(T.mul(p, p))

        assert fd_check(frob, a, b) < 1e-6

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_values(self):
        np.testing.assert_allclose(T.softmax_last_dim(Tensor([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(T.softmax_last_dim(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3],
                                   atol=1e-15)

    def test_overflow_safe(self):
        y = T.softmax_last_dim(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(y))
        assert y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0, abs=1e-300)

    @settings(max_examples=50, deadline=None)
    @given(rows=st.integers(1, 6), length=st.integers(1, 9), shift=st.floats(-50, 50),
           seed=st.integers(0, 2 ** 16))
    def test_rows_normalised_and_shift_invariant(self, rows, length, shift, seed):
        x = np.random.default_rng(seed).normal(scale=5, size=(rows, length))
        y = T.softmax_last_dim(Tensor(x)).data
        assert np.all(y > 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(T.softmax_last_dim(Tensor(x + shift)).data, y, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x, w = param(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 5)))
        assert fd_check(lambda: T.sum_all(T.mul(T.softmax_last_dim(x), w)), x) < 1e-6


class TestResampling:
    def test_constant_upsample(self):
        out = T.bilinear_upsample(Tensor(np.full((2, 3, 4), 1.5)), 12, 16)
        np.testing.assert_allclose(out.data, 1.5, atol=1e-15)

    def test_row_upsample(self):
        out = T.bilinear_upsample(Tensor(np.array([[[1.0, 3.0]]])), 1, 4)
        np.testing.assert_allclose(out.data.ravel(), [1.0, 1.5, 2.5, 3.0])

    @staticmethod
    def _sample(src, out_n):
        # direct evaluation of the half-pixel formula with edge clamping
        n = len(src)
        res = []
        for i in range(out_n):
            s = min(max((i + 0.5) * n / out_n - 0.5, 0.0), n - 1)
            i0 = int(math.floor(s))
            i1 = min(i0 + 1, n - 1)
            res.append(src[i0] * (1 - (s - i0)) + src[i1] * (s - i0))
        return np.array(res)

    @pytest.mark.parametrize("n,factor", [(8, 2), (8, 4), (9, 8), (16, 8)])
    def test_mean_preserved_on_ramps(self, n, factor):
        ramp = np.arange(n, dtype=float)
        for src in (np.full(n, 2.0), ramp, 3 * ramp - 1):
            brute = self._sample(src, n * factor)
            assert brute.mean() == pytest.approx(src.mean(), abs=1e-9)
            img = np.outer(src, np.ones(n))[None]
            up = T.bilinear_upsample(Tensor(img), n * factor, n * factor).data
            np.testing.assert_allclose(up[0, :, 0], brute, atol=1e-12)
            assert up.mean() == pytest.approx(img.mean(), abs=1e-9)

    def test_upsample_gradient(self):
        rng = np.random.default_rng(7)
        x, w = param(rng.normal(size=(2, 3, 5))), Tensor(rng.normal(size=(2, 9, 11)))
        assert fd_check(lambda: T.sum_all(T.mul(T.bilinear_upsample(x, 9, 11), w)), x) < 1e-6

    def test_upsample_errors(self):
        with pytest.raises(ShapeError):
            T.bilinear_upsample(Tensor(np.zeros((1, 4, 4))), 0, 4)
        with pytest.raises(ShapeError):
            T.bilinear_upsample(Tensor(np.zeros((1, 4, 4))), 2, 4)

    def test_max_pool(self):
        out = T.pool2d("max", Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 2)
        assert out.data.ravel().tolist() == [4.0]

    def test_adaptive_avg_global_mean(self):
        x = np.random.default_rng(8).normal(size=(3, 5, 7))
        out = T.pool2d("adaptive_avg", Tensor(x), (1, 1))
        np.testing.assert_allclose(out.data[:, 0, 0], x.mean(axis=(1, 2)), atol=1e-14)

    def test_adaptive_avg_ramp(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        out = T.pool2d("adaptive_avg", Tensor(x), (2, 2))
        np.testing.assert_allclose(out.data[0], [[2.5, 4.5], [10.5, 12.5]])

    def test_pool_gradients(self):
        rng = np.random.default_rng(9)
        x = param(rng.normal(size=(2, 6, 6)))
        w = Tensor(rng.normal(size=(2, 3, 3)))
        assert fd_check(lambda: T.sum_all(T.mul(T.max_pool2d(x, 2), w)), x) < 1e-6
        w4 = Tensor(rng.normal(size=(2, 4, 4)))
        assert fd_check(lambda: T.sum_all(T.mul(T.adaptive_avg_pool2d(x, 4, 4), w4)), x) < 1e-6

    def test_invalid_targets(self):
        with pytest.raises(ShapeError):
            T.pool2d("max", Tensor(np.zeros((1, 5, 5))), 2)
        with pytest.raises(ShapeError):
            T.pool2d("adaptive_avg", Tensor(np.zeros((1, 4, 4))), (0, 2))
        with pytest.raises(ValueError):
            T.pool2d("median", Tensor(np.zeros((1, 4, 4))), 2)


class TestTape:
    def test_sum_gradient_is_ones(self):
        x = param(np.arange(6.0).reshape(2, 3))
        (g,) = tape_grad(lambda: T.sum_all(x), x)
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_relu_negative_gives_zero(self):
        x = param(-np.arange(1.0, 5.0))
        (g,) = tape_grad(lambda: T.sum_all(T.relu(x)), x)
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_second_backward_requires_reset(self):
        x = param([1.0, 2.0])
        with Tape() as tape:
            loss = T.sum_all(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_non_scalar_loss(self):
        x = param([1.0, 2.0])
        with Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)

    def test_detached_loss(self):
        with Tape() as tape:
            loss = T.sum_all(Tensor([1.0, 2.0]))
        with pytest.raises(TapeError, match="detached"):
            tape.backward(loss)

    def test_topological_order_and_single_visit(self):
        x = param([1.0, -2.0, 3.0])
        with Tape() as tape:
            y = T.relu(x)
            loss = T.sum_all(T.mul(y, y))
        seen = set()
        for node in tape.nodes:
            for i in node.inputs:
                assert i is None or i in seen or i == x.node_id
            seen.add(node.output)
        assert len(seen) == len(tape.nodes)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 6.0])

    def test_reused_parameter_accumulates(self):
        x = param([3.0])
        (g,) = tape_grad(lambda: T.sum_all(T.mul(x, x)), x)
        np.testing.assert_allclose(g, [6.0])

    def test_no_recording_without_tape(self):
        x = param([1.0])
        y = T.scale(x, 2.0)
        assert y.node_id is None

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        spec = ConvSpec(4, 3, 3)
        w, b = Tensor(rng.normal(size=spec.weight_shape)), Tensor(rng.normal(size=4))
        outs = [T.softmax_last_dim(T.conv2d(x, w, b, spec)).data for _ in range(2)]
        assert outs[0].tobytes() == outs[1].tobytes()


class TestFiniteDiff:
    def test_square(self):
        p = Tensor([3.0])
        g = finite_diff_grad(lambda: float(p.data[0] ** 2), [p], eps=1e-5)[0]
        assert g[0] == pytest.approx(6.0, abs=1e-8)

    def test_constant(self):
        p = Tensor(np.ones(4))
        np.testing.assert_array_equal(finite_diff_grad(lambda: 1.0, [p])[0], np.zeros(4))

    def test_detects_nondeterminism(self):
        rng = np.random.default_rng(0)
        with pytest.raises(NonDeterministicError):
            finite_diff_grad(lambda: float(rng.random()), [Tensor([1.0])])

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda: 0.0, [Tensor([1.0])], eps=0.0)

    def test_three_layer_network(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        specs = [ConvSpec(4, 3, 3), ConvSpec(4, 4, 3, 2), ConvSpec(2, 4, 3)]
        params = []
        for s in specs:
            params += [param(rng.normal(size=s.weight_shape) * 0.5), param(rng.normal(size=s.out_channels))]

        def net():
            y = x
            for i, s in enumerate(specs):
                y = T.conv2d(y, params[2 * i], params[2 * i + 1], s)
                if i < 2:
                    y = T.relu(y)
            return T.sum_all(T.mul(y, y))

        assert fd_check(net, *params) < 1e-6


def test_relu_propagates_nan():
    out = T.relu(Tensor([np.nan, -1.0, np.inf])).data
    assert np.isnan(out[0]) and out[1] == 0.0 and out[2] == np.inf
