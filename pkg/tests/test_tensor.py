"""Autodiff core: op semantics against direct oracles and gradients against finite differences."""
import numpy as np
import pytest

from pyrasal import functional as F
from pyrasal.tensor import (ShapeError, Tape, Tensor, concat_channels, matmul, no_grad, softmax, tsum,
                            wide_precision)

from conftest import assert_gradcheck, leaf


def naive_conv2d(x, w, b, stride, padding, dilation):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[fi]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * stride + u * dilation, j * stride + v * dilation] * w[fi, ci, u, v]
                    out[ni, fi, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 6)).astype(np.float32)
        out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_sum(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1) and out.item() == 9.0

    def test_dilated_ramp_matches_loop_oracle(self, wide):
        x = np.arange(49, dtype=np.float64).reshape(1, 1, 7, 7)
        w = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3) - 4
        out = F.conv2d(Tensor(x), Tensor(w), dilation=2)
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, naive_conv2d(x, w, None, 1, 0, 2))

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 0, 2), (3, 1, 1)])
    def test_random_matches_loop_oracle(self, wide, rng, stride, padding, dilation):
        x = rng.normal(size=(2, 3, 9, 9))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, padding, dilation), rtol=0, atol=1e-12)

    def test_output_size_formula(self):
        out = F.conv2d(Tensor(np.zeros((1, 2, 11, 8))), Tensor(np.zeros((3, 2, 3, 3))), stride=2, padding=1, dilation=2)
        assert out.shape == (1, 3, (11 + 2 - 4 - 1) // 2 + 1, (8 + 2 - 4 - 1) // 2 + 1)

    def test_channel_mismatch_names_dim(self):
        with pytest.raises(ShapeError) as e:
            F.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))
        assert e.value.dim == "C"

    def test_empty_output_raises(self):
        with pytest.raises(ShapeError) as e:
            F.conv2d(Tensor(np.zeros((1, 1, 2, 5))), Tensor(np.zeros((1, 1, 3, 3))))
        assert e.value.dim == "H"

    @pytest.mark.parametrize("shape,stride,padding,dilation",
                             [((1, 2, 5, 5), 1, 1, 1), ((2, 1, 6, 7), 2, 0, 1), ((1, 2, 7, 7), 1, 2, 2),
                              ((2, 3, 4, 4), 1, 0, 1), ((1, 1, 8, 5), 2, 1, 2)])
    def test_gradients(self, wide, rng, shape, stride, padding, dilation):
        x, w, b = leaf(rng.normal(size=shape)), leaf(rng.normal(size=(2, shape[1], 3, 3))), leaf(rng.normal(size=2))
        r = leaf(rng.normal(size=F.conv2d(x, w, b, stride, padding, dilation).shape))
        assert_gradcheck(lambda: tsum(F.conv2d(x, w, b, stride, padding, dilation) * r), [x, w, b])


class TestMatmul:
    def test_identity_and_zero(self, rng):
        a = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal((a @ Tensor(np.eye(4))).data, a.data)
        np.testing.assert_array_equal((a @ Tensor(np.zeros((4, 2)))).data, np.zeros((3, 2)))

    def test_triple_loop_oracle(self, wide):
        a = np.arange(1, 7, dtype=np.float64).reshape(2, 3)
        b = np.arange(1, 7, dtype=np.float64).reshape(3, 2)
        want = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    want[i, j] += a[i, k] * b[k, j]
        np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, want)
        np.testing.assert_array_equal(want, [[22, 28], [49, 64]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    @pytest.mark.parametrize("m,k,n", [(1, 1, 1), (2, 3, 4), (5, 2, 3), (3, 6, 1), (4, 4, 4)])
    def test_gradients(self, wide, rng, m, k, n):
        a, b = leaf(rng.normal(size=(m, k))), leaf(rng.normal(size=(k, n)))
        r = rng.normal(size=(m, n))
        assert_gradcheck(lambda: tsum(matmul(a, b) * Tensor(r)), [a, b])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor(np.full((2, 5), 3.0))).data, 0.2, rtol=1e-6)

    def test_shift_invariance(self, wide, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(softmax(Tensor(x + 7.5)).data, softmax(Tensor(x)).data, atol=1e-15)

    def test_log2_case(self, wide):
        np.testing.assert_allclose(softmax(Tensor([0.0, np.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)

    def test_rows_sum_to_one(self, wide, rng):
        s = softmax(Tensor(rng.normal(scale=30, size=(6, 9))), axis=-1).data
        assert np.all(s > 0)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)

    def test_large_inputs_are_stable(self):
        assert np.all(np.isfinite(softmax(Tensor([1e4, 1e4 + 1.0])).data))

    @pytest.mark.parametrize("shape,axis", [((4,), -1), ((2, 3), -1), ((3, 2), 0), ((2, 2, 5), 1), ((1, 7), -1)])
    def test_gradients(self, wide, rng, shape, axis):
        x = leaf(rng.normal(size=shape))
        r = rng.normal(size=shape)
        assert_gradcheck(lambda: tsum(softmax(x, axis=axis) * Tensor(r)), [x])


def bilinear_point(img, y, x):
    h, w = img.shape
    y, x = min(max(y, 0.0), h - 1), min(max(x, 0.0), w - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    return ((1 - dy) * (1 - dx) * img[y0, x0] + (1 - dy) * dx * img[y0, x1]
            + dy * (1 - dx) * img[y1, x0] + dy * dx * img[y1, x1])


class TestUpsampleBilinear:
    def test_constant(self):
        out = F.upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 0.7)), 7, 5)
        np.testing.assert_allclose(out.data, 0.7, rtol=1e-6)

    def test_same_size_identity(self, rng):
        x = rng.normal(size=(1, 1, 4, 3)).astype(np.float32)
        np.testing.assert_array_equal(F.upsample_bilinear(Tensor(x), 4, 3).data, x)

    def test_2x2_to_4x4_formula_oracle(self, wide):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = F.upsample_bilinear(Tensor(img[None, None]), 4, 4).data[0, 0]
        want = np.array([[bilinear_point(img, (i + 0.5) * 0.5 - 0.5, (j + 0.5) * 0.5 - 0.5) for j in range(4)]
                         for i in range(4)])
        np.testing.assert_allclose(out, want, atol=1e-15)
        np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-15)
        np.testing.assert_allclose(out[1], [0.5, 0.75, 1.25, 1.5], atol=1e-15)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            F.upsample_bilinear(Tensor(np.zeros((1, 1, 2, 2))), 0, 3)

    @pytest.mark.parametrize("shape,out", [((1, 1, 2, 2), (4, 4)), ((2, 2, 3, 4), (6, 8)), ((1, 1, 4, 4), (2, 2)),
                                           ((1, 2, 3, 3), (5, 7)), ((1, 1, 1, 2), (3, 3))])
    def test_gradients(self, wide, rng, shape, out):
        x = leaf(rng.normal(size=shape))
        r = rng.normal(size=shape[:2] + out)
        assert_gradcheck(lambda: tsum(F.upsample_bilinear(x, *out) * Tensor(r)), [x])


class TestConcat:
    def test_singleton(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)))
        np.testing.assert_array_equal(concat_channels([a]).data, a.data)

    def test_slices_recover_inputs(self, rng):
        a, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))
        out = concat_channels([Tensor(a), Tensor(b)]).data
        np.testing.assert_array_equal(out[:, :2], a.astype(np.float32))
        np.testing.assert_array_equal(out[:, 2:], b.astype(np.float32))

    def test_sum_grad_is_ones(self, rng):
        a, b = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True), Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        tsum(concat_channels([a, b])).backward()
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_constant_root_gives_zeros(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        tsum(x * 0.0 + y).backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_non_scalar_root_raises(self):
        with pytest.raises(ValueError):
            (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()

    def test_every_reachable_leaf_gets_grad(self, rng):
        a, b, c = (Tensor(rng.normal(size=(2, 2)), requires_grad=True) for _ in range(3))
        tsum((a @ b).relu() * c + a).backward()
        assert all(t.grad is not None and t.grad.shape == t.shape for t in (a, b, c))

    def test_tape_is_topological_and_visits_once(self, rng):
        a = Tensor(rng.normal(size=(2,)), requires_grad=True)
        b = a * a
        root = tsum(b + b.exp() + a)
        tape = Tape.from_root(root)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        assert len(pos) == len(tape.nodes)
        for n in tape.nodes:
            for p in n._parents:
                if id(p) in pos:
                    assert pos[id(p)] < pos[id(n)]

    def test_shared_subexpression_accumulates(self, wide):
        a = leaf([1.5, -2.0])
        b = a * a
        tsum(b + b).backward()
        np.testing.assert_allclose(a.grad, 4 * a.data)

    def test_no_grad_records_nothing(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            b = a * 3.0
        assert not b.requires_grad

    def test_two_layer_net_loss(self, wide, rng):
        from pyrasal.losses import LossConfig, SSIMConfig, total_loss
        w1, b1 = leaf(rng.normal(scale=0.5, size=(4, 3, 3, 3))), leaf(rng.normal(scale=0.1, size=4))
        w2, b2 = leaf(rng.normal(scale=0.5, size=(1, 4, 3, 3))), leaf(rng.normal(scale=0.1, size=1))
        rgb = Tensor(rng.uniform(size=(1, 3, 8, 8)))
        gt = Tensor((rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(float))
        cfg = LossConfig(ssim=SSIMConfig(window=3))

        def fn():
            h = F.conv2d(rgb, w1, b1, padding=1).relu()
            y = F.conv2d(h, w2, b2, padding=1).sigmoid()
            return total_loss(y, gt, rgb, cfg).objective

        assert_gradcheck(fn, [w1, b1, w2, b2], per_leaf=8)


class TestDeterminism:
    def test_replay_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(5)
            x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
            tsum(F.conv2d(x, w, padding=1).sigmoid()).backward()
            return x.grad.tobytes() + w.grad.tobytes()
        assert run() == run()

    def test_wide_precision_dtype(self):
        with wide_precision():
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32
