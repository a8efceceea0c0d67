"""Layer forward values against independent oracles, plus gradient checks
for every differentiable op."""

import numpy as np
import pytest

from latup import nn
from latup import tensor as T
from latup.errors import ConfigError, ShapeError


def randt(shape, seed=0, lo=-1.0, hi=1.0, requires_grad=False):
    rng = np.random.default_rng(seed)
    return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=requires_grad)


def conv3d_oracle(x, kernel, bias):
    """Nested-loop direct convolution with same padding (stride 1)."""
    kd, kh, kw, cin, cout = kernel.shape
    _, D, H, W, _ = x.shape
    pads = [nn.same_padding(k)[0] for k in (kd, kh, kw)]
    out = np.zeros((1, D, H, W, cout))
    for z in range(D):
        for y in range(H):
            for w_ in range(W):
                for a in range(kd):
                    for b in range(kh):
                        for c in range(kw):
                            zz, yy, ww = z + a - pads[0], y + b - pads[1], w_ + c - pads[2]
                            if 0 <= zz < D and 0 <= yy < H and 0 <= ww < W:
                                out[0, z, y, w_] += x[0, zz, yy, ww] @ kernel[a, b, c]
    return out + bias


class TestConv3d:
    def test_identity_kernel(self):
        p = nn.Conv3dParams(
            kernel=T.Tensor(np.eye(3).reshape(1, 1, 1, 3, 3)),
            bias=T.Tensor(np.zeros(3)))
        x = randt((1, 4, 4, 4, 3), seed=1)
        np.testing.assert_array_equal(nn.conv3d(x, p).data, x.data)

    def test_constant_field_interior(self):
        p = nn.Conv3dParams(
            kernel=T.Tensor(np.ones((3, 3, 3, 1, 1))), bias=T.Tensor(np.zeros(1)))
        x = T.Tensor(np.full((1, 5, 5, 5, 1), 2.0))
        out = nn.conv3d(x, p)
        assert out.data[0, 2, 2, 2, 0] == pytest.approx(27 * 2.0)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = T.Tensor(rng.uniform(-1, 1, (1, 4, 4, 4, 2)))
        p = nn.conv3d_params(3, 2, 3, seed=2, dtype=np.float64)
        got = nn.conv3d(x, p).data
        want = conv3d_oracle(x.data, p.kernel.data, p.bias.data)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_shape_preserved_all_kernels(self, k):
        x = randt((1, 4, 6, 8, 2), seed=4)
        p = nn.conv3d_params(k, 2, 3, seed=5)
        assert nn.conv3d(x, p).shape == (1, 4, 6, 8, 3)

    def test_even_kernel_matches_oracle(self):
        # floor padding before, ceil after
        rng = np.random.default_rng(6)
        x = T.Tensor(rng.uniform(-1, 1, (1, 4, 4, 4, 1)))
        p = nn.conv3d_params(2, 1, 1, seed=7, dtype=np.float64)
        np.testing.assert_allclose(
            nn.conv3d(x, p).data,
            conv3d_oracle(x.data, p.kernel.data, p.bias.data), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nn.conv3d(randt((1, 4, 4, 4, 2)), nn.conv3d_params(3, 3, 1))

    def test_param_count(self):
        assert nn.conv3d_params(3, 96, 64).param_count == 165952
        assert nn.conv3d_params(2, 128, 128).param_count == 131200

    def test_gradients(self):
        x = randt((1, 4, 4, 4, 2), seed=8, requires_grad=True)
        p = nn.conv3d_params(3, 2, 2, seed=9, dtype=np.float64)
        w = randt((1, 4, 4, 4, 2), seed=10)
        f = lambda t: T.reduce_sum(T.mul(nn.conv3d(t, p), w))
        assert T.finite_diff_check(f, x, h=1e-5, max_coords=30) <= 1e-6
        fk = lambda k: T.reduce_sum(T.mul(nn.conv3d(x, nn.Conv3dParams(k, p.bias)), w))
        assert T.finite_diff_check(fk, p.kernel, h=1e-5, max_coords=30) <= 1e-6
        fb = lambda b: T.reduce_sum(T.mul(nn.conv3d(x, nn.Conv3dParams(p.kernel, b)), w))
        assert T.finite_diff_check(fb, p.bias, h=1e-5) <= 1e-6


class TestMaxPool:
    def test_constant(self):
        out = nn.maxpool3d(T.Tensor(np.full((1, 4, 4, 4, 2), 3.0)))
        assert out.shape == (1, 2, 2, 2, 2)
        assert (out.data == 3.0).all()

    def test_block_max(self):
        x = np.arange(8.0).reshape(1, 2, 2, 2, 1)
        assert nn.maxpool3d(T.Tensor(x)).data.item() == 7.0

    def test_matches_blockwise_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, (1, 4, 4, 4, 3))
        got = nn.maxpool3d(T.Tensor(x)).data
        want = x.reshape(1, 2, 2, 2, 2, 2, 2, 3).max(axis=(2, 4, 6))
        np.testing.assert_array_equal(got, want)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            nn.maxpool3d(randt((1, 3, 4, 4, 1)))

    def test_gradient_away_from_ties(self):
        # distinct values guarantee a unique argmax per block
        rng = np.random.default_rng(12)
        vals = rng.permutation(4 * 4 * 4 * 2).astype(np.float64)
        x = T.Tensor((vals / vals.size).reshape(1, 4, 4, 4, 2), requires_grad=True)
        w = randt((1, 2, 2, 2, 2), seed=13)
        f = lambda t: T.reduce_sum(T.mul(nn.maxpool3d(t), w))
        assert T.finite_diff_check(f, x, h=1e-6, max_coords=40) <= 1e-6

    def test_tie_routes_to_first_in_scan_order(self):
        x = T.Tensor(np.ones((1, 2, 2, 2, 1)), requires_grad=True)
        T.backward(T.reduce_sum(nn.maxpool3d(x)))
        expected = np.zeros((1, 2, 2, 2, 1))
        expected[0, 0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(x.grad, expected)


class TestUpsample:
    def test_constant(self):
        out = nn.upsample_trilinear2x(T.Tensor(np.full((1, 2, 2, 2, 3), 1.5)))
        assert out.shape == (1, 4, 4, 4, 3)
        np.testing.assert_allclose(out.data, 1.5)

    def test_extent_one_replicates(self):
        x = T.Tensor(np.array([2.0]).reshape(1, 1, 1, 1, 1))
        out = nn.upsample_trilinear2x(x)
        assert out.shape == (1, 2, 2, 2, 1)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2, 1), 2.0))

    def test_1d_slice_formula(self):
        x = T.Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2, 1))
        out = nn.upsample_trilinear2x(x)
        np.testing.assert_allclose(out.data[0, 0, 0, :, 0], [0.0, 0.25, 0.75, 1.0])

    def test_linearity(self):
        a, b = 1.7, -0.4
        x = randt((1, 3, 3, 3, 2), seed=14)
        z = randt((1, 3, 3, 3, 2), seed=15)
        lhs = nn.upsample_trilinear2x(
            T.Tensor(a * x.data + b * z.data)).data
        rhs = (a * nn.upsample_trilinear2x(x).data
               + b * nn.upsample_trilinear2x(z).data)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_backward_is_transpose(self):
        # <up(x), y> == <x, up^T(y)> for a linear operator
        rng = np.random.default_rng(16)
        x = T.Tensor(rng.uniform(-1, 1, (1, 2, 3, 2, 2)), requires_grad=True)
        y = rng.uniform(-1, 1, (1, 4, 6, 4, 2))
        out = nn.upsample_trilinear2x(x)
        T.backward(T.reduce_sum(T.mul(out, T.Tensor(y))))
        lhs = float((out.data * y).sum())
        rhs = float((x.data * x.grad).sum())
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_gradient(self):
        x = randt((1, 2, 2, 2, 2), seed=17, requires_grad=True)
        w = randt((1, 4, 4, 4, 2), seed=18)
        f = lambda t: T.reduce_sum(T.mul(nn.upsample_trilinear2x(t), w))
        assert T.finite_diff_check(f, x, h=1e-5, max_coords=16) <= 1e-6


class TestInstanceNorm:
    def test_standardizes(self):
        x = randt((1, 4, 4, 4, 3), seed=19, lo=-2, hi=5)
        p = nn.instance_norm_params(3, dtype=np.float64)
        out = nn.instance_norm(x, p).data
        mean = out.mean(axis=(1, 2, 3))
        var = out.var(axis=(1, 2, 3))
        assert np.abs(mean).max() <= 1e-5
        assert np.abs(var - 1.0).max() <= 1e-3

    def test_constant_channel_gives_beta(self):
        p = nn.InstanceNormParams(
            gamma=T.Tensor(np.array([2.0])), beta=T.Tensor(np.array([0.7])))
        out = nn.instance_norm(T.Tensor(np.full((1, 2, 2, 2, 1), 5.0)), p)
        np.testing.assert_allclose(out.data, 0.7)

    def test_affine_invariance(self):
        # scale well above eps so the stabilizer stays negligible
        x = randt((1, 4, 4, 4, 2), seed=20, lo=-3.0, hi=3.0)
        p = nn.instance_norm_params(2, dtype=np.float64)
        base = nn.instance_norm(x, p).data
        shifted = nn.instance_norm(T.Tensor(3.0 * x.data + 1.25), p).data
        np.testing.assert_allclose(base, shifted, atol=1e-5)

    def test_gradients(self):
        x = randt((1, 3, 3, 3, 2), seed=21, requires_grad=True)
        p = nn.instance_norm_params(2, dtype=np.float64)
        w = randt((1, 3, 3, 3, 2), seed=22)
        f = lambda t: T.reduce_sum(T.mul(nn.instance_norm(t, p), w))
        assert T.finite_diff_check(f, x, h=1e-5, max_coords=30) <= 1e-5
        fg = lambda g: T.reduce_sum(T.mul(
            nn.instance_norm(x, nn.InstanceNormParams(g, p.beta)), w))
        assert T.finite_diff_check(fg, p.gamma, h=1e-5) <= 1e-6
        fb = lambda b: T.reduce_sum(T.mul(
            nn.instance_norm(x, nn.InstanceNormParams(p.gamma, b)), w))
        assert T.finite_diff_check(fb, p.beta, h=1e-5) <= 1e-6

    def test_param_count(self):
        assert nn.instance_norm_params(64).param_count == 128


class TestActivations:
    def test_leaky_relu_slope(self):
        out = nn.leaky_relu(T.Tensor([-1.0, 2.0]))
        np.testing.assert_allclose(out.data, [-0.1, 2.0])

    def test_softmax_equal_logits(self):
        out = nn.softmax_channels(T.Tensor(np.zeros((1, 1, 1, 1, 4))))
        np.testing.assert_allclose(out.data, 0.25)

    def test_sigmoid_zero(self):
        assert nn.sigmoid(T.Tensor([0.0])).data.item() == 0.5

    def test_sigmoid_extreme_values_finite(self):
        out = nn.sigmoid(T.Tensor([-500.0, 500.0]))
        assert np.isfinite(out.data).all()

    def test_dispatcher(self):
        x = T.Tensor([1.0])
        assert nn.activation("relu", x).data.item() == 1.0
        with pytest.raises(ValueError):
            nn.activation("tanh", x)

    @pytest.mark.parametrize("kind", ["leaky_relu", "relu", "sigmoid", "softmax_channels"])
    def test_gradients(self, kind):
        x = randt((1, 2, 2, 2, 4), seed=23, requires_grad=True)
        # keep leaky/relu inputs away from the kink at 0
        x.data[np.abs(x.data) < 0.05] = 0.1
        w = randt((1, 2, 2, 2, 4), seed=24)
        f = lambda t: T.reduce_sum(T.mul(nn.activation(kind, t), w))
        assert T.finite_diff_check(f, x, h=1e-6, max_coords=32) <= 1e-5


class TestDropout:
    def test_inference_identity(self):
        x = randt((1, 4, 4, 4, 2), seed=25)
        assert nn.dropout(x, 0.5, training=False, seed=1) is x

    def test_rate_zero_identity(self):
        x = randt((1, 4, 4, 4, 2), seed=26)
        assert nn.dropout(x, 0.0, training=True, seed=1) is x

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            nn.dropout(randt((2, 2)), 1.0, training=True)

    def test_statistics(self):
        x = T.Tensor(np.ones(100_000))
        out = nn.dropout(x, 0.2, training=True, seed=77)
        zero_fraction = float((out.data == 0).mean())
        assert abs(zero_fraction - 0.2) <= 0.01
        assert abs(float(out.data.mean()) - 1.0) <= 0.02

    def test_deterministic(self):
        x = randt((64,), seed=27)
        a = nn.dropout(x, 0.3, training=True, seed=5).data
        b = nn.dropout(x, 0.3, training=True, seed=5).data
        np.testing.assert_array_equal(a, b)

    def test_gradient_with_frozen_mask(self):
        x = randt((1, 2, 2, 2, 3), seed=28, requires_grad=True)
        f = lambda t: T.reduce_sum(T.mul(nn.dropout(t, 0.3, True, seed=9),
                                         nn.dropout(t, 0.3, True, seed=9)))
        assert T.finite_diff_check(f, x, h=1e-5, max_coords=20) <= 1e-6


class TestPoolingDense:
    def test_gap_constant(self):
        out = nn.global_avg_pool(T.Tensor(np.full((1, 2, 2, 2, 3), 4.0)))
        assert out.shape == (1, 1, 1, 1, 3)
        np.testing.assert_allclose(out.data, 4.0)

    def test_gap_single_voxel_identity(self):
        x = randt((1, 1, 1, 1, 5), seed=29)
        np.testing.assert_array_equal(nn.global_avg_pool(x).data, x.data)

    def test_gap_matches_mean(self):
        x = randt((1, 2, 2, 2, 2), seed=30)
        np.testing.assert_allclose(
            nn.global_avg_pool(x).data[0, 0, 0, 0],
            x.data.mean(axis=(1, 2, 3))[0])

    def test_dense_identity_and_zero(self):
        x = randt((4, 3), seed=31)
        np.testing.assert_allclose(nn.dense(x, T.Tensor(np.eye(3))).data, x.data)
        assert (nn.dense(x, T.Tensor(np.zeros((3, 2)))).data == 0).all()

    def test_dense_hand_product(self):
        x = T.Tensor([[1.0, 2.0]])
        w = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
        b = T.Tensor([0.5, -0.5])
        np.testing.assert_allclose(nn.dense(x, w, b).data, [[13.5, 15.5]])

    def test_dense_mismatch(self):
        with pytest.raises(ShapeError):
            nn.dense(randt((4, 3)), T.Tensor(np.zeros((2, 2))))


class TestConcat:
    def test_channel_stacking(self):
        xs = [randt((1, 2, 2, 2, 32), seed=s) for s in (1, 2, 3)]
        out = nn.concat_channels(xs)
        assert out.shape == (1, 2, 2, 2, 96)
        np.testing.assert_array_equal(out.data[..., 32:64], xs[1].data)

    def test_singleton(self):
        x = randt((1, 2, 2, 2, 4), seed=4)
        np.testing.assert_array_equal(nn.concat_channels([x]).data, x.data)

    def test_gradient_split_roundtrip(self):
        a = randt((1, 2, 2, 2, 2), seed=5, requires_grad=True)
        b = randt((1, 2, 2, 2, 3), seed=6, requires_grad=True)
        w = randt((1, 2, 2, 2, 5), seed=7)
        T.backward(T.reduce_sum(T.mul(nn.concat_channels([a, b]), w)))
        np.testing.assert_array_equal(a.grad, w.data[..., :2])
        np.testing.assert_array_equal(b.grad, w.data[..., 2:])

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            nn.concat_channels([randt((1, 2, 2, 2, 1)), randt((1, 2, 2, 4, 1))])


class TestSEBlock:
    def test_zero_weights_halve(self):
        p = nn.SEParams(
            w_reduce=T.Tensor(np.zeros((8, 1))),
            w_expand=T.Tensor(np.zeros((1, 8))),
            reduction=8)
        x = randt((1, 2, 2, 2, 8), seed=8)
        np.testing.assert_allclose(nn.se_block(x, p).data, 0.5 * x.data, rtol=1e-6)

    def test_param_counts_match_published_rows(self):
        assert nn.se_params(96, 8).param_count == 2304
        assert nn.se_params(64, 8).param_count == 1024
        assert nn.se_params(128, 8).param_count == 4096

    def test_indivisible_channels_rejected(self):
        with pytest.raises(ConfigError):
            nn.se_params(10, 8)
        with pytest.raises(ConfigError):
            nn.se_block(randt((1, 2, 2, 2, 10)), nn.se_params(8, 8))

    def test_output_bounded_by_input(self):
        x = randt((1, 2, 2, 2, 8), seed=9, lo=-3, hi=3)
        p = nn.se_params(8, 4, seed=10, dtype=np.float64)
        out = nn.se_block(x, p).data
        assert (np.abs(out) <= np.abs(x.data) + 1e-12).all()
        gate = out / np.where(x.data == 0, 1.0, x.data)
        inside = np.abs(x.data) > 1e-9
        assert (gate[inside] > 0).all() and (gate[inside] < 1).all()

    def test_gradients(self):
        x = randt((1, 2, 2, 2, 8), seed=11, requires_grad=True)
        p = nn.se_params(8, 4, seed=12, dtype=np.float64)
        w = randt((1, 2, 2, 2, 8), seed=13)
        f = lambda t: T.reduce_sum(T.mul(nn.se_block(t, p), w))
        assert T.finite_diff_check(f, x, h=1e-5, max_coords=30) <= 1e-5
        fr = lambda r: T.reduce_sum(T.mul(
            nn.se_block(x, nn.SEParams(r, p.w_expand, 4)), w))
        assert T.finite_diff_check(fr, p.w_reduce, h=1e-5) <= 1e-5
