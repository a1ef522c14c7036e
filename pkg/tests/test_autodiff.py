"""Engine tests: every op against an independent oracle, every gradient
against central finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eeg2env import autodiff as ad
from eeg2env.errors import DimensionError, ParameterError, TapeConsumedError


def conv1d_oracle(x, k, b=None, stride=1, pad=(0, 0), dilation=1):
    """Direct-sum cross-correlation, no vectorization tricks."""
    B, Ci, T = x.shape
    Co, _, K = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), pad))
    span = dilation * (K - 1) + 1
    t_out = (xp.shape[2] - span) // stride + 1
    out = np.zeros((B, Co, t_out))
    for bi in range(B):
        for o in range(Co):
            for t in range(t_out):
                acc = 0.0
                for i in range(Ci):
                    for kk in range(K):
                        acc += xp[bi, i, t * stride + kk * dilation] * k[o, i, kk]
                out[bi, o, t] = acc + (b[o] if b is not None else 0.0)
    return out


def scalar_of(t):
    return ad.sum_all(ad.mul(t, t))


class TestConv1d:
    def test_valid_example(self):
        x = ad.Tensor([[[1.0, 2.0, 3.0, 4.0]]])
        k = ad.Tensor([[[1.0, 1.0]]])
        out = ad.conv1d(x, k, padding="valid")
        np.testing.assert_array_equal(out.data, [[[3.0, 5.0, 7.0]]])

    def test_same_stride2_length(self):
        x = ad.Tensor(np.arange(5.0).reshape(1, 1, 5))
        k = ad.Tensor(np.ones((1, 1, 3)))
        out = ad.conv1d(x, k, stride=2, padding="same")
        assert out.data.shape == (1, 1, 3)

    def test_same_pads_extra_right(self):
        # length 4, K=2: total pad 1 goes entirely to the right
        x = ad.Tensor([[[1.0, 1.0, 1.0, 1.0]]])
        k = ad.Tensor([[[1.0, 1.0]]])
        out = ad.conv1d(x, k, padding="same")
        np.testing.assert_array_equal(out.data, [[[2.0, 2.0, 2.0, 1.0]]])

    @pytest.mark.parametrize("stride,padding,dilation", [
        (1, "valid", 1), (2, "valid", 1), (1, "same", 1),
        (2, "same", 1), (1, "same", 2), (1, "valid", 3),
    ])
    def test_matches_oracle(self, rng, stride, padding, dilation):
        x = rng.normal(size=(2, 3, 17))
        k = rng.normal(size=(4, 3, 3))
        b = rng.normal(size=4)
        out = ad.conv1d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b),
                        stride=stride, padding=padding, dilation=dilation)
        span = dilation * 2 + 1
        if padding == "valid":
            pad = (0, 0)
        else:
            t_out = -(-17 // stride)
            total = max((t_out - 1) * stride + span - 17, 0)
            pad = (total // 2, total - total // 2)
        np.testing.assert_allclose(
            out.data, conv1d_oracle(x, k, b, stride=stride, pad=pad, dilation=dilation),
            rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ad.conv1d(ad.Tensor(rng.normal(size=(1, 3, 8))),
                      ad.Tensor(rng.normal(size=(2, 4, 3))))

    def test_kernel_longer_than_input(self, rng):
        with pytest.raises(DimensionError):
            ad.conv1d(ad.Tensor(rng.normal(size=(1, 1, 4))),
                      ad.Tensor(rng.normal(size=(1, 1, 5))), padding="valid")

    def test_bad_stride_and_padding(self, rng):
        x, k = ad.Tensor(rng.normal(size=(1, 1, 8))), ad.Tensor(rng.normal(size=(1, 1, 3)))
        with pytest.raises(ParameterError):
            ad.conv1d(x, k, stride=0)
        with pytest.raises(ParameterError):
            ad.conv1d(x, k, padding="reflect")

    @pytest.mark.parametrize("wrt", ["x", "k", "b"])
    def test_gradients(self, rng, wrt):
        x = rng.normal(size=(2, 3, 11))
        k = rng.normal(size=(2, 3, 3))
        b = rng.normal(size=2)
        parts = {"x": ad.Tensor(x), "k": ad.Tensor(k), "b": ad.Tensor(b)}

        def f(t):
            parts2 = dict(parts)
            parts2[wrt] = t
            out = ad.conv1d(parts2["x"], parts2["k"], parts2["b"],
                            stride=2, padding="same", dilation=2)
            return scalar_of(out)

        assert ad.finite_difference_check(f, parts[wrt], rng=rng) < 1e-6


class TestMaxPool:
    def test_values_and_routing(self):
        x = ad.Tensor([[[1.0, 3.0, 2.0, 0.0, 5.0, 4.0]]], requires_grad=True)
        out = ad.maxpool1d(x, 2)
        np.testing.assert_array_equal(out.data, [[[3.0, 2.0, 5.0]]])
        ad.backward(ad.sum_all(out))
        np.testing.assert_array_equal(x.grad, [[[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]]])

    def test_tie_goes_to_first(self):
        x = ad.Tensor([[[2.0, 2.0]]], requires_grad=True)
        ad.backward(ad.sum_all(ad.maxpool1d(x, 2)))
        np.testing.assert_array_equal(x.grad, [[[1.0, 0.0]]])

    def test_remainder_dropped(self):
        x = ad.Tensor([[[1.0, 2.0, 3.0, 4.0, 9.0]]], requires_grad=True)
        out = ad.maxpool1d(x, 2)
        np.testing.assert_array_equal(out.data, [[[2.0, 4.0]]])
        ad.backward(ad.sum_all(out))
        assert x.grad[0, 0, 4] == 0.0

    def test_window_larger_than_input(self):
        with pytest.raises(DimensionError):
            ad.maxpool1d(ad.Tensor(np.zeros((1, 1, 3))), 4)

    def test_gradient(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 2, 12)))
        assert ad.finite_difference_check(
            lambda t: scalar_of(ad.maxpool1d(t, 3)), x, rng=rng) < 1e-6


class TestUpsampleNearest:
    def test_values(self):
        out = ad.upsample_nearest(ad.Tensor([[[1.0, 2.0]]]), 3)
        np.testing.assert_array_equal(out.data, [[[1, 1, 1, 2, 2, 2]]])

    def test_gradient_sums(self):
        x = ad.Tensor([[[1.0, 2.0]]], requires_grad=True)
        ad.backward(ad.sum_all(ad.upsample_nearest(x, 3)))
        np.testing.assert_array_equal(x.grad, [[[3.0, 3.0]]])

    def test_pool_inverts_upsample(self, rng):
        x = rng.normal(size=(2, 3, 7))
        out = ad.maxpool1d(ad.upsample_nearest(ad.Tensor(x), 4), 4)
        np.testing.assert_array_equal(out.data, x)


class TestConcatNarrow:
    def test_round_trip(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
        cat = ad.concat(ad.Tensor(a), ad.Tensor(b), axis=1)
        np.testing.assert_array_equal(ad.narrow(cat, 1, 0, 3).data, a)
        np.testing.assert_array_equal(ad.narrow(cat, 1, 3, 5).data, b)

    def test_concat_empty_identity(self, rng):
        a = rng.normal(size=(2, 3))
        out = ad.concat(ad.Tensor(a), ad.Tensor(np.zeros((2, 0))), axis=1)
        np.testing.assert_array_equal(out.data, a)

    def test_grad_split(self, rng):
        a = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        out = ad.concat(a, b, axis=1)
        ad.backward(ad.sum_all(ad.mul(out, out)))
        np.testing.assert_allclose(a.grad, 2 * a.data)
        np.testing.assert_allclose(b.grad, 2 * b.data)

    def test_narrow_grad_scatters(self, rng):
        x = ad.Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        ad.backward(ad.sum_all(ad.narrow(x, 1, 2, 3)))
        expect = np.zeros((3, 6))
        expect[:, 2:5] = 1.0
        np.testing.assert_array_equal(x.grad, expect)

    def test_shape_checks(self, rng):
        with pytest.raises(DimensionError):
            ad.concat(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((3, 3))), axis=1)
        with pytest.raises(DimensionError):
            ad.narrow(ad.Tensor(np.zeros((2, 3))), 1, 2, 5)


class TestDenseAffine:
    def test_example(self):
        out = ad.dense_affine(ad.Tensor([3.0, 4.0]),
                              ad.Tensor([[1.0, 2.0]]), ad.Tensor([1.0]))
        np.testing.assert_array_equal(out.data, [12.0])

    def test_batched_matches_matmul(self, rng):
        x, w, b = rng.normal(size=(4, 7, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
        out = ad.dense_affine(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b))
        np.testing.assert_allclose(out.data, x @ w.T + b, rtol=1e-13)

    @pytest.mark.parametrize("wrt", ["x", "w", "b"])
    def test_gradients(self, rng, wrt):
        parts = {"x": ad.Tensor(rng.normal(size=(4, 5))),
                 "w": ad.Tensor(rng.normal(size=(3, 5))),
                 "b": ad.Tensor(rng.normal(size=3))}

        def f(t):
            p = dict(parts)
            p[wrt] = t
            return scalar_of(ad.dense_affine(p["x"], p["w"], p["b"]))

        assert ad.finite_difference_check(f, parts[wrt], rng=rng) < 1e-6

    def test_feature_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ad.dense_affine(ad.Tensor(np.zeros((2, 4))),
                            ad.Tensor(np.zeros((3, 5))), ad.Tensor(np.zeros(3)))


class TestActivations:
    def test_values(self):
        x = np.array([-2.0, -0.5, 0.5, 2.0])
        np.testing.assert_array_equal(ad.activation(ad.Tensor(x), "relu").data,
                                      np.maximum(x, 0))
        np.testing.assert_allclose(ad.activation(ad.Tensor(x), "tanh").data, np.tanh(x))
        np.testing.assert_allclose(ad.activation(ad.Tensor(x), "sigmoid").data,
                                   1 / (1 + np.exp(-x)), rtol=1e-15)

    def test_sigmoid_stable_in_tails(self):
        y = ad.sigmoid(ad.Tensor([-1e4, 1e4])).data
        assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            ad.activation(ad.Tensor([1.0]), "gelu")

    @pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid"])
    def test_gradients_away_from_kinks(self, rng, kind):
        x = ad.Tensor(np.where(np.abs(z := rng.normal(size=(3, 4))) < 0.1, 0.5, z))
        assert ad.finite_difference_check(
            lambda t: scalar_of(ad.activation(t, kind)), x, rng=rng) < 1e-6

    def test_relu_zero_subgradient(self):
        x = ad.Tensor([0.0], requires_grad=True)
        ad.backward(ad.sum_all(ad.relu(x)))
        assert x.grad[0] == 0.0


class TestSoftmaxFrames:
    def test_example(self):
        out = ad.softmax_frames(ad.Tensor([0.0, math.log(2.0)]))
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-15)

    def test_huge_scores_stable(self):
        out = ad.softmax_frames(ad.Tensor([[1e4, 0.0, -1e4]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [[1.0, 0.0, 0.0]], atol=1e-300)

    @settings(deadline=None, max_examples=30)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-30, 30))
    def test_sums_to_one_and_shift_invariant(self, scores, shift):
        t = ad.Tensor(np.array(scores))
        y = ad.softmax_frames(t).data
        assert abs(y.sum() - 1.0) < 1e-12
        y2 = ad.softmax_frames(ad.add_scalar(t, shift)).data
        np.testing.assert_allclose(y, y2, atol=1e-12)

    def test_gradient(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 3, 5)))
        assert ad.finite_difference_check(
            lambda t: ad.sum_all(ad.square(ad.softmax_frames(t))), x, rng=rng) < 1e-6


class TestCrossEntropy:
    def test_half_probability_is_log2(self):
        logits = ad.Tensor([[0.0, 0.0]])
        out = ad.cross_entropy_logits(logits, np.array([0]))
        assert abs(out.item() - math.log(2.0)) < 1e-12

    def test_matches_direct_formula(self, rng):
        z = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        out = ad.cross_entropy_logits(ad.Tensor(z), labels)
        p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        expect = -np.log(p[np.arange(6), labels]).mean()
        assert abs(out.item() - expect) < 1e-12

    def test_extreme_logits_finite(self):
        out = ad.cross_entropy_logits(ad.Tensor([[1e4, -1e4]]), np.array([1]))
        assert np.isfinite(out.item())

    def test_label_out_of_range(self):
        with pytest.raises(ParameterError):
            ad.cross_entropy_logits(ad.Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradient(self, rng):
        labels = rng.integers(0, 3, size=5)
        x = ad.Tensor(rng.normal(size=(5, 3)))
        assert ad.finite_difference_check(
            lambda t: ad.cross_entropy_logits(t, labels), x, rng=rng) < 1e-6


class TestPairwiseGaussian:
    def oracle(self, mu, lv, z):
        B, D = mu.shape
        out = np.zeros((B, B))
        for i in range(B):
            for j in range(B):
                out[i, j] = -0.5 * sum(
                    (z[j, d] - mu[i, d]) ** 2 / np.exp(lv[i, d]) + lv[i, d] + math.log(2 * math.pi)
                    for d in range(D))
        return out

    def test_matches_oracle(self, rng):
        mu, lv, z = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        out = ad.pairwise_diag_gaussian_loglik(ad.Tensor(mu), ad.Tensor(lv), ad.Tensor(z))
        np.testing.assert_allclose(out.data, self.oracle(mu, lv, z), rtol=1e-12)

    def test_standard_normal_diagonal(self):
        z = np.zeros((1, 1))
        out = ad.pairwise_diag_gaussian_loglik(ad.Tensor(z), ad.Tensor(z), ad.Tensor(z))
        assert abs(out.item() - (-0.5 * math.log(2 * math.pi))) < 1e-12

    @pytest.mark.parametrize("wrt", ["mu", "lv", "z"])
    def test_gradients(self, rng, wrt):
        parts = {"mu": ad.Tensor(rng.normal(size=(3, 2))),
                 "lv": ad.Tensor(rng.normal(size=(3, 2)) * 0.3),
                 "z": ad.Tensor(rng.normal(size=(3, 2)))}
        w = rng.normal(size=(3, 3))

        def f(t):
            p = dict(parts)
            p[wrt] = t
            ll = ad.pairwise_diag_gaussian_loglik(p["mu"], p["lv"], p["z"])
            return ad.sum_all(ad.mul(ll, ad.Tensor(w)))

        assert ad.finite_difference_check(f, parts[wrt], rng=rng) < 1e-6


class TestSmallOps:
    def test_scale_channels(self, rng):
        x, g = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3))
        out = ad.scale_channels(ad.Tensor(x), ad.Tensor(g))
        np.testing.assert_allclose(out.data, x * g[:, :, None])
        xt = ad.Tensor(x)
        assert ad.finite_difference_check(
            lambda t: scalar_of(ad.scale_channels(t, ad.Tensor(g))), xt, rng=rng) < 1e-6
        gt = ad.Tensor(g)
        assert ad.finite_difference_check(
            lambda t: scalar_of(ad.scale_channels(ad.Tensor(x), t)), gt, rng=rng) < 1e-6

    def test_avgpool_last(self, rng):
        x = rng.normal(size=(2, 8))
        out = ad.avgpool_last(ad.Tensor(x), 4)
        np.testing.assert_allclose(out.data, x.reshape(2, 2, 4).mean(-1))
        with pytest.raises(DimensionError):
            ad.avgpool_last(ad.Tensor(x), 3)
        xt = ad.Tensor(x)
        assert ad.finite_difference_check(
            lambda t: scalar_of(ad.avgpool_last(t, 2)), xt, rng=rng) < 1e-6

    def test_center_last_removes_mean(self, rng):
        x = ad.Tensor(rng.normal(size=(3, 9)))
        out = ad.center_last(x)
        np.testing.assert_allclose(out.data.mean(-1), 0, atol=1e-14)
        assert ad.finite_difference_check(
            lambda t: ad.sum_all(ad.square(ad.center_last(t))), x, rng=rng) < 1e-6

    def test_reductions(self, rng):
        x = rng.normal(size=(3, 4))
        assert abs(ad.sum_all(ad.Tensor(x)).item() - x.sum()) < 1e-12
        assert abs(ad.mean_all(ad.Tensor(x)).item() - x.mean()) < 1e-12
        np.testing.assert_allclose(ad.sum_last(ad.Tensor(x)).data, x.sum(-1))
        np.testing.assert_allclose(ad.mean_last(ad.Tensor(x)).data, x.mean(-1))

    def test_clamps(self, rng):
        x = ad.Tensor([-2.0, 0.5, 3.0], requires_grad=True)
        out = ad.clamp(x, 0.0, 1.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])
        ad.backward(ad.sum_all(out))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])
        with pytest.raises(ParameterError):
            ad.clamp(x, 2.0, 1.0)
        y = ad.Tensor([-1.0, 2.0], requires_grad=True)
        ad.backward(ad.sum_all(ad.clamp_min(y, 0.0)))
        np.testing.assert_array_equal(y.grad, [0.0, 1.0])

    def test_sqrt_clamped(self):
        x = ad.Tensor([-1.0, 0.0, 4.0], requires_grad=True)
        out = ad.sqrt_clamped(x)
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])
        ad.backward(ad.sum_all(out))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 0.25])

    def test_elementwise_shape_guard(self, rng):
        with pytest.raises(DimensionError):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))

    def test_swap_axes_grad(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 3, 4)))
        assert ad.finite_difference_check(
            lambda t: scalar_of(ad.swap_axes(t, 1, 2)), x, rng=rng) < 1e-6


class TestBackwardMechanics:
    def test_chain_rule_closed_form(self, rng):
        x = ad.Tensor(rng.normal(size=5), requires_grad=True)
        y = ad.sum_all(ad.square(ad.add_scalar(ad.mul_scalar(x, 2.0), 1.0)))
        ad.backward(y)
        np.testing.assert_allclose(x.grad, 4 * (2 * x.data + 1), rtol=1e-13)

    def test_reused_leaf_accumulates(self, rng):
        x = ad.Tensor(rng.normal(size=4), requires_grad=True)
        y = ad.add(ad.sum_all(x), ad.sum_all(ad.square(x)))
        ad.backward(ad.sum_all(y))
        np.testing.assert_allclose(x.grad, 1 + 2 * x.data, rtol=1e-13)

    def test_second_backward_raises(self, rng):
        x = ad.Tensor(rng.normal(size=3), requires_grad=True)
        y = ad.sum_all(ad.square(x))
        ad.backward(y)
        with pytest.raises(TapeConsumedError):
            ad.backward(y)

    def test_shared_subgraph_cannot_be_replayed(self, rng):
        x = ad.Tensor(rng.normal(size=3), requires_grad=True)
        mid = ad.square(x)
        ad.backward(ad.sum_all(mid))
        with pytest.raises(TapeConsumedError):
            ad.backward(ad.mean_all(mid))

    def test_fresh_passes_on_same_leaf_are_fine(self, rng):
        x = ad.Tensor(rng.normal(size=3), requires_grad=True)
        ad.backward(ad.sum_all(ad.square(x)))
        g1 = x.grad.copy()
        ad.zero_grads([x])
        ad.backward(ad.sum_all(ad.square(x)))
        np.testing.assert_array_equal(x.grad, g1)

    def test_non_scalar_loss_rejected(self, rng):
        x = ad.Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(DimensionError):
            ad.backward(ad.square(x))

    def test_constant_loss_leaves_grads_none(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        loss = ad.sum_all(ad.Tensor([3.0]))  # no dependence on x
        ad.backward(loss)
        assert x.grad is None

    def test_no_grad_forward_records_nothing(self, rng):
        x = ad.Tensor(rng.normal(size=(1, 2, 8)))
        out = ad.conv1d(x, ad.Tensor(rng.normal(size=(2, 2, 3))))
        assert out._backward is None and not out.requires_grad


class TestFiniteDifferenceFacility:
    def test_quadratic_is_nearly_exact(self, rng):
        x = ad.Tensor(rng.normal(size=6))
        err = ad.finite_difference_check(lambda t: ad.sum_all(ad.square(t)), x)
        assert err < 1e-9

    def test_bad_eps(self, rng):
        x = ad.Tensor(rng.normal(size=3))
        with pytest.raises(ParameterError):
            ad.finite_difference_check(lambda t: ad.sum_all(t), x, eps=0.0)

    def test_restores_state(self, rng):
        x = ad.Tensor(rng.normal(size=4))
        before = x.data.copy()
        ad.finite_difference_check(lambda t: ad.sum_all(ad.square(t)), x, max_entries=2, rng=rng)
        np.testing.assert_array_equal(x.data, before)
        assert not x.requires_grad
