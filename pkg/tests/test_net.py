import numpy as np
import pytest

from carkit import cubic, gradcheck
from carkit.layers import CacheError, Conv2d, LeakyReLU, PixelShuffle, ResidualBlock, Sequential
from carkit.models import ResamplerNet, SRNet, Topology
from carkit.resampler import ResampleGeometry, normalize_kernels

TINY = Topology(base=4, cap=8, n_res=1, head_ch=4, sr_feats=4, sr_res=1)


def _adjoint_gap(f, x, rng, backward):
    """|<J dx, y> - <dx, J^T y>| relative, with J dx from central perturbation."""
    dx = rng.normal(size=x.shape)
    eps = 1e-4  # piecewise-linear layers: exact unless a kink is crossed
    jdx = (f(x + eps * dx) - f(x - eps * dx)) / (2 * eps)
    y = rng.normal(size=jdx.shape)
    f(x)
    jty = backward(y)
    lhs, rhs = np.sum(jdx * y), np.sum(dx * jty)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs))


class TestConv:
    def test_identity_1x1(self):
        conv = Conv2d(3, 3, 1)
        conv.weight.value[...] = np.eye(3)[:, :, None, None]
        x = np.random.default_rng(0).normal(size=(2, 4, 5, 3))
        np.testing.assert_array_equal(conv.forward(x), x)

    def test_all_ones_counts_overlaps(self):
        conv = Conv2d(1, 1, 3)
        conv.weight.value[...] = 1.0
        out = conv.forward(np.ones((1, 3, 3, 1)))[0, :, :, 0]
        assert out[1, 1] == 9
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
        assert out[0, 1] == 6

    @pytest.mark.parametrize("H,W", [(6, 6), (5, 7)])
    def test_stride_two_halves_with_ceil(self, H, W):
        conv = Conv2d(3, 2, 3, stride=2)
        assert conv.forward(np.zeros((1, H, W, 3))).shape == (1, (H + 1) // 2, (W + 1) // 2, 2)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            Conv2d(3, 2).forward(np.zeros((1, 4, 4, 2)))

    def test_backward_requires_forward(self):
        conv = Conv2d(1, 1)
        with pytest.raises(CacheError):
            conv.backward(np.zeros((1, 2, 2, 1)))

    @pytest.mark.parametrize("stride,k", [(1, 3), (2, 3), (1, 1)])
    def test_adjoint(self, stride, k):
        rng = np.random.default_rng(stride * 10 + k)
        conv = Conv2d(3, 4, k, stride=stride, rng=rng)
        x = rng.normal(size=(2, 5, 6, 3))
        assert _adjoint_gap(conv.forward, x, rng, conv.backward) < 1e-9


class TestActivationAndBlocks:
    def test_leaky_relu_values(self):
        act = LeakyReLU(0.2)
        np.testing.assert_allclose(act.forward(np.array([5.0, -2.0, 0.0])), [5.0, -0.4, 0.0])
        np.testing.assert_array_equal(LeakyReLU(1.0).forward(np.array([-3.0, 2.0])), [-3.0, 2.0])

    def test_leaky_relu_subgradient_at_zero(self):
        act = LeakyReLU(0.2)
        act.forward(np.array([0.0]))
        assert act.backward(np.array([1.0]))[0] == 1.0

    def test_residual_zero_branch_is_identity(self):
        rng = np.random.default_rng(1)
        blocks = [ResidualBlock(3, rng=rng) for _ in range(2)]
        for b in blocks:
            b.conv2.weight.value[...] = 0
        seq = Sequential([("a", blocks[0]), ("b", blocks[1])])
        x = rng.normal(size=(1, 4, 4, 3))
        np.testing.assert_array_equal(seq.forward(x), x)

    def test_residual_adjoint(self):
        rng = np.random.default_rng(2)
        blk = ResidualBlock(3, rng=rng, branch_scale=1.0)
        x = rng.normal(size=(1, 5, 5, 3))
        assert _adjoint_gap(blk.forward, x, rng, blk.backward) < 1e-9

    def test_leaky_adjoint(self):
        rng = np.random.default_rng(3)
        act = LeakyReLU(0.2)
        assert _adjoint_gap(act.forward, rng.normal(size=(3, 4)), rng, act.backward) < 1e-9


class TestPixelShuffle:
    def test_identity_r1(self):
        x = np.random.default_rng(0).normal(size=(1, 3, 4, 5))
        np.testing.assert_array_equal(PixelShuffle(1).forward(x), x)

    def test_channel_order(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)
        np.testing.assert_array_equal(PixelShuffle(2).forward(x)[0, :, :, 0], [[1, 2], [3, 4]])

    def test_inverse(self):
        ps = PixelShuffle(3)
        x = np.random.default_rng(1).normal(size=(2, 3, 4, 18))
        np.testing.assert_array_equal(ps.backward(ps.forward(x)), x)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            PixelShuffle(2).forward(np.zeros((1, 2, 2, 6)))


class TestBicubic:
    def test_constant(self):
        np.testing.assert_allclose(cubic.bicubic_upscale(np.full((5, 6, 3), 0.4), 2), 0.4, atol=1e-14)
        np.testing.assert_allclose(cubic.bicubic_downscale(np.full((8, 6, 3), 0.4), 2), 0.4, atol=1e-14)

    def test_unit_scale(self):
        x = np.random.default_rng(0).random((5, 6, 3))
        np.testing.assert_array_equal(cubic.bicubic_upscale(x, 1), x)

    def test_adjoint_inner_product(self):
        rng = np.random.default_rng(1)
        for s in (2, 3, 4):
            x = rng.random((5, 7, 3))
            y = rng.random((5 * s, 7 * s, 3))
            lhs = np.sum(cubic.bicubic_upscale(x, s) * y)
            rhs = np.sum(x * cubic.bicubic_upscale_backward(y, s))
            assert abs(lhs - rhs) < 1e-10

    def test_against_scalar_formula(self):
        # independent evaluation of one output pixel from the cubic kernel definition
        rng = np.random.default_rng(2)
        lr = rng.random((6, 6, 1))
        up = cubic.bicubic_upscale(lr, 2)
        X, Y = 5, 6
        p, q = (X + 0.5) / 2 - 0.5, (Y + 0.5) / 2 - 0.5

        def k(t):
            t = abs(t)
            if t <= 1:
                return 1.5 * t ** 3 - 2.5 * t ** 2 + 1
            if t < 2:
                return -0.5 * t ** 3 + 2.5 * t ** 2 - 4 * t + 2
            return 0.0

        val = 0.0
        for a in range(int(np.floor(p)) - 1, int(np.floor(p)) + 3):
            for b in range(int(np.floor(q)) - 1, int(np.floor(q)) + 3):
                val += k(p - a) * k(q - b) * lr[min(max(a, 0), 5), min(max(b, 0), 5), 0]
        assert up[X, Y, 0] == pytest.approx(val, abs=1e-14)


class TestResamplerNet:
    def test_output_shapes(self):
        geom = ResampleGeometry(2)
        net = ResamplerNet(geom, TINY)
        raw, dX, dY = net.forward(np.random.default_rng(0).random((1, 64, 64, 3)))
        assert raw.shape == dX.shape == dY.shape == (1, 32, 32, 6, 6)

    def test_zero_heads_give_uniform_kernels(self):
        geom = ResampleGeometry(2)
        net = ResamplerNet(geom, TINY)
        for name, p in net.all_named_params():
            if "head" in name:
                p.value[...] = 0
        raw, dX, dY = net.forward(np.random.default_rng(1).random((2, 8, 8, 3)))
        K, _ = normalize_kernels(raw)
        np.testing.assert_allclose(K, 1 / 36, atol=1e-15)
        assert not dX.any() and not dY.any()

    def test_fresh_offsets_start_at_zero(self):
        net = ResamplerNet(ResampleGeometry(2), TINY)
        _, dX, dY = net.forward(np.random.default_rng(2).random((1, 8, 8, 3)))
        assert not dX.any() and not dY.any()

    def test_offsets_bounded_by_cap(self):
        geom = ResampleGeometry(2, offset_cap=1.5)
        net = ResamplerNet(geom, TINY)
        for _, p in net.offset_head.named_params():
            p.value[...] = 50.0
        _, dX, _ = net.forward(np.random.default_rng(3).random((1, 8, 8, 3)))
        assert np.abs(dX).max() <= 1.5

    def test_indivisible(self):
        with pytest.raises(ValueError):
            ResamplerNet(ResampleGeometry(2), TINY).forward(np.zeros((1, 7, 8, 3)))

    def test_non_power_of_two(self):
        with pytest.raises(ValueError):
            ResamplerNet(ResampleGeometry(3), TINY)

    def test_deterministic(self):
        x = np.random.default_rng(4).random((1, 16, 16, 3))
        a = ResamplerNet(ResampleGeometry(4), TINY, seed=5).forward(x)
        b = ResamplerNet(ResampleGeometry(4), TINY, seed=5).forward(x)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)


class TestSRNet:
    def test_shape(self):
        out = SRNet(3, TINY).forward(np.random.default_rng(0).random((2, 5, 4, 3)))
        assert out.shape == (2, 15, 12, 3)

    def test_zero_weights_zero_image(self):
        net = SRNet(2, TINY)
        for _, p in net.named_params():
            p.value[...] = 0
        assert not net.forward(np.random.default_rng(1).random((1, 4, 4, 3))).any()


def test_gradcheck_layers():
    for r in gradcheck.check_layers(np.random.default_rng(5), size=6, instances=2):
        assert r.max_error < 1e-5, r


def test_gradcheck_networks():
    for r in gradcheck.check_networks(np.random.default_rng(6), size=8, instances=1):
        assert r.max_error < 1e-5, r


def test_gradcheck_networks_16():
    for r in gradcheck.check_networks(np.random.default_rng(7), size=16, instances=1):
        assert r.max_error < 1e-5, r
