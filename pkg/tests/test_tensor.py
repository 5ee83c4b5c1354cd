import math

import numpy as np
import pytest

import tensor as tn
from tensor import NumericsError, Tape, Tensor, backward, float64_mode, grad_check


def naive_conv2d(x, kernel, bias, stride, padding):
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    padded[:, :, padding:padding + h, padding:padding + w] = x
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, out_h, out_w))
    for b in range(n):
        for oc in range(o):
            for i in range(out_h):
                for j in range(out_w):
                    total = bias[oc] if bias is not None else 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                total += padded[b, ic, i * stride + u, j * stride + v] * kernel[oc, ic, u, v]
                    out[b, oc, i, j] = total
    return out


def scalar_bilinear(src, size_out):
    """Half-pixel-center sampling evaluated one output pixel at a time"""
    h, w = src.shape
    out_h, out_w = size_out
    out = np.zeros(size_out)
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * src[y0, x0] + (1 - fy) * fx * src[y0, x1]
                         + fy * (1 - fx) * src[y1, x0] + fy * fx * src[y1, x1])
    return out


def leaf(rng, shape, name=None):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(tn.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_grad_at_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        with Tape():
            loss = tn.sum(tn.relu(x))
        backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_mean_of_ones(self):
        assert tn.mean(Tensor(np.ones((2, 3, 4)))).item() == 1.0
        np.testing.assert_array_equal(tn.mean(Tensor(np.ones((2, 3))), axis=1).data, [1.0, 1.0])

    def test_sum_grad_is_ones(self, rng):
        x = leaf(rng, (3, 4))
        with Tape():
            loss = tn.sum(x)
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(NumericsError):
            tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_broadcast_grad(self, rng):
        a, b = leaf(rng, (2, 3)), leaf(rng, (3,))
        with Tape():
            loss = tn.sum(tn.mul(a, b))
        backward(loss)
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0), rtol=1e-6)

    def test_division_by_zero(self):
        with pytest.raises(NumericsError):
            tn.div(Tensor([1.0]), Tensor([0.0]))

    def test_operators(self):
        x = Tensor([2.0])
        np.testing.assert_array_equal((1.0 - x * 3.0 + x / 2.0).data, [-4.0])
        np.testing.assert_array_equal((-x).data, [-2.0])

    def test_item_needs_scalar(self):
        with pytest.raises(NumericsError):
            Tensor([1.0, 2.0]).item()


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 5)))
        out = tn.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones(self):
        out = tn.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loops(self, rng, stride, padding):
        x = rng.normal(size=(1, 2, 5, 5))
        kernel = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        with float64_mode():
            out = tn.conv2d(Tensor(x), Tensor(kernel), Tensor(bias), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, kernel, bias, stride, padding), atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(NumericsError):
            tn.conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 3, 3, 3))))

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
    def test_gradients(self, rng, stride, padding):
        x, k, b = leaf(rng, (1, 2, 6, 6), "x"), leaf(rng, (3, 2, 3, 3), "kernel"), leaf(rng, (3,), "bias")
        weights = rng.normal(size=(1, 3, 6 // stride, 6 // stride))
        report = grad_check(lambda: tn.sum(tn.mul(tn.conv2d(x, k, b, stride=stride, padding=padding), weights)),
                            [x, k, b])
        assert report.passed, report


class TestBilinearResize:
    def test_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 3, 4)))
        np.testing.assert_array_equal(tn.bilinear_resize(x, (3, 4)).data, x.data)

    def test_constant(self):
        out = tn.bilinear_resize(Tensor(np.full((1, 1, 3, 5), 2.5)), (7, 4))
        np.testing.assert_allclose(out.data, 2.5, rtol=1e-6)

    def test_matches_scalar_formula(self):
        src = np.array([[1.0, 2.0], [3.0, 4.0]])
        with float64_mode():
            out = tn.bilinear_resize(Tensor(src[None, None]), (4, 4)).data[0, 0]
        np.testing.assert_allclose(out, scalar_bilinear(src, (4, 4)), atol=1e-12)
        np.testing.assert_allclose(out[0], [1.0, 1.25, 1.75, 2.0])

    def test_downsample_matches_scalar_formula(self, rng):
        src = rng.normal(size=(6, 5))
        with float64_mode():
            out = tn.bilinear_resize(Tensor(src[None, None]), (3, 2)).data[0, 0]
        np.testing.assert_allclose(out, scalar_bilinear(src, (3, 2)), atol=1e-12)

    def test_gradient(self, rng):
        x = leaf(rng, (1, 2, 3, 3), "x")
        weights = rng.normal(size=(1, 2, 8, 5))
        assert grad_check(lambda: tn.sum(tn.mul(tn.bilinear_resize(x, (8, 5)), weights)), [x]).passed


class TestCosineSimilarity:
    def test_identities(self, rng):
        p = rng.normal(size=4)
        features = np.repeat(p[:, None, None], 6, axis=1).reshape(4, 2, 3)
        np.testing.assert_allclose(tn.cosine_similarity_map(Tensor(features), Tensor(p)).data, 1.0, atol=1e-6)
        flipped = features.copy()
        flipped[:, 0, 0] = -2.0 * p
        assert tn.cosine_similarity_map(Tensor(flipped), Tensor(p)).data[0, 0] == pytest.approx(-1.0, abs=1e-6)

    def test_orthogonal(self):
        features = np.zeros((2, 1, 1))
        features[1] = 1.0
        assert tn.cosine_similarity_map(Tensor(features), Tensor([3.0, 0.0])).item() == pytest.approx(0.0)

    def test_zero_prototype(self):
        with pytest.raises(NumericsError):
            tn.cosine_similarity_map(Tensor(np.ones((2, 2, 2))), Tensor([0.0, 0.0]))

    def test_scale_invariance(self, rng):
        f, p = rng.normal(size=(5, 3, 3)), rng.normal(size=5)
        with float64_mode():
            base = tn.cosine_similarity_map(Tensor(f), Tensor(p)).data
            for factor in (0.01, 7.0, 100.0):
                np.testing.assert_allclose(tn.cosine_similarity_map(Tensor(f * factor), Tensor(p)).data, base,
                                           atol=1e-6)
                np.testing.assert_allclose(tn.cosine_similarity_map(Tensor(f), Tensor(p * factor)).data, base,
                                           atol=1e-6)

    def test_gradient(self, rng):
        f, p = leaf(rng, (4, 3, 3), "features"), leaf(rng, (4,), "prototype")
        weights = rng.normal(size=(3, 3))
        assert grad_check(lambda: tn.sum(tn.mul(tn.cosine_similarity_map(f, p), weights)), [f, p]).passed


class TestSigmoidAndBce:
    def test_sigmoid_values(self):
        assert tn.sigmoid_kappa(Tensor(0.0), 3.0).item() == 0.5
        assert tn.sigmoid_kappa(Tensor(2.0), 0.5).item() == pytest.approx(0.73106, abs=1e-5)
        assert tn.sigmoid_kappa(Tensor(1e4), 0.5).item() == 1.0

    def test_sigmoid_gradient(self, rng):
        z = leaf(rng, (3, 3), "z")
        assert grad_check(lambda: tn.sum(tn.sigmoid_kappa(z, 0.5)), [z]).passed

    def test_perfect_prediction(self):
        target = np.array([[1, 0], [0, 1]])
        loss = tn.weighted_bce(Tensor(target.astype(float)), target, 1.0, 0.1).item()
        assert 0.0 <= loss <= 1e-6

    def test_uniform_half_background(self):
        loss = tn.weighted_bce(Tensor(np.full((4, 4), 0.5)), np.zeros((4, 4)), 1.0, 0.1).item()
        assert loss == pytest.approx(0.1 * math.log(2.0), rel=1e-6)

    def test_single_wrong_pixel(self):
        with float64_mode():
            target = np.zeros((2, 3))
            target[0, 0] = 1
            pred = target.copy()
            pred[1, 2] = 0.3
            loss = tn.weighted_bce(Tensor(pred), target, 1.0, 1.0).item()
        clamp = tn.PROB_CLAMP
        pixel_terms = -math.log(1 - 0.3) - math.log(1 - clamp) * 4 - math.log(1 - clamp)
        assert loss == pytest.approx(pixel_terms / 6, rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(NumericsError):
            tn.weighted_bce(Tensor(np.full((2, 2), 0.5)), np.zeros((3, 3)))

    def test_gradient(self, rng):
        pred = Tensor(rng.uniform(0.1, 0.9, size=(4, 4)), requires_grad=True, name="pred")
        target = rng.integers(0, 2, size=(4, 4))
        assert grad_check(lambda: tn.weighted_bce(pred, target, 1.0, 0.1), [pred]).passed


class TestBackward:
    def test_half_square(self, rng):
        x = leaf(rng, (5,))
        with Tape():
            loss = tn.scale(tn.sum(tn.mul(x, x)), 0.5)
        backward(loss)
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_accumulates(self, rng):
        x = leaf(rng, (3,))
        for _ in range(2):
            with Tape():
                loss = tn.sum(x)
            backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_linearity(self, rng):
        x = leaf(rng, (4,))
        with Tape():
            combined = tn.add(tn.sum(tn.mul(x, x)), tn.sum(tn.relu(x)))
        backward(combined)
        together = x.grad.copy()
        x.zero_grad()
        for build in (lambda: tn.sum(tn.mul(x, x)), lambda: tn.sum(tn.relu(x))):
            with Tape():
                part = build()
            backward(part)
        np.testing.assert_allclose(x.grad, together, rtol=1e-6)

    def test_detached_gets_nothing(self, rng):
        x = leaf(rng, (3,))
        with Tape():
            loss = tn.sum(tn.mul(x.detach(), x))
        backward(loss)
        detached = x.detach()
        assert detached.grad is None and not detached.requires_grad
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_non_scalar(self, rng):
        x = leaf(rng, (3,))
        with Tape():
            out = tn.relu(x)
        with pytest.raises(NumericsError):
            backward(out)

    def test_untaped(self, rng):
        with pytest.raises(NumericsError):
            backward(tn.sum(leaf(rng, (3,))))

    def test_no_recording_without_grad(self):
        with Tape() as tape:
            tn.add(Tensor([1.0]), Tensor([2.0]))
        assert len(tape) == 0

    def test_non_finite_rejected(self):
        with pytest.raises(NumericsError):
            tn.scale(Tensor([1e30]), 1e30)

    def test_composite_finite_differences(self, rng):
        x, w = leaf(rng, (1, 1, 5, 5), "x"), leaf(rng, (2, 1, 3, 3), "w")

        def loss():
            h = tn.relu(tn.conv2d(x, w, padding=1))
            return tn.mean(tn.mul(h, h))

        report = grad_check(loss, [x, w])
        assert report.passed, report


class TestGradCheck:
    def test_linear_function(self, rng):
        x = leaf(rng, (4,))
        coefficients = rng.normal(size=4)
        report = grad_check(lambda: tn.sum(tn.mul(x, coefficients)), [x])
        assert report.max_error < 1e-9
        assert report.names == ["input0"]

    def test_corrupted_gradient_is_caught(self, rng):
        x = leaf(rng, (4,), "x")

        def wrong_square(t):
            return tn.make_op(t.data * t.data, (t,), lambda g: (g * t.data,), "wrong_square")

        report = grad_check(lambda: tn.sum(wrong_square(x)), [x])
        assert not report.passed
        assert report.max_error > report.tolerance

    def test_runs_in_64_bit(self, rng):
        x = leaf(rng, (2,))
        grad_check(lambda: tn.sum(x), [x])
        assert x.data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32
