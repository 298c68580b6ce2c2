import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsadapt.alignment import (
    BatchSizeError,
    DiagCovariance,
    GrlConfig,
    LatentBatch,
    bregman_divergence,
    bregman_gradients,
    domain_adversarial_loss,
    domain_adversarial_terms,
    estimate_diag_covariance,
    gaussian_kernel,
    grl_forward,
)
from dsadapt.autodiff import Tensor, backward, dense
from dsadapt.autodiff.nn import Dense

from oracles import bregman_loops, central_diff, rel_err


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def pinned(v, d=1):
    return DiagCovariance(np.full(d, float(v)))


class TestCovariance:
    def test_identical_points_hit_ridge(self):
        cov = estimate_diag_covariance(LatentBatch(t64(np.ones((5, 3)))))
        assert np.all(cov.variances == 0.001)

    def test_hand_variance(self):
        cov = estimate_diag_covariance(LatentBatch(t64([[-1.0], [1.0]])))
        assert cov.variances[0] == pytest.approx(1.001)
        assert cov.inverse[0] == pytest.approx(0.999001, abs=1e-6)

    def test_standardized_batch(self):
        x = np.random.default_rng(0).standard_normal((20000, 4))
        x = (x - x.mean(0)) / x.std(0)
        np.testing.assert_allclose(estimate_diag_covariance(LatentBatch(t64(x))).variances, 1.001, atol=1e-9)

    def test_too_small(self):
        with pytest.raises(BatchSizeError):
            estimate_diag_covariance(LatentBatch(t64([[0.0, 1.0]])))

    def test_no_gradient_through_covariance(self):
        # pinning the covariance to the estimated value must not change the gradient
        rng = np.random.default_rng(1)
        ys, yt = rng.standard_normal((6, 2)), rng.standard_normal((5, 2))
        a = bregman_gradients(t64(ys), t64(yt))
        cs = estimate_diag_covariance(LatentBatch(t64(ys)))
        ct = estimate_diag_covariance(LatentBatch(t64(yt)))
        b = bregman_gradients(t64(ys), t64(yt), cs, ct)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestKernel:
    def test_peak_and_scalar(self):
        assert gaussian_kernel([0.0, 0.0], pinned(1.0, 2)) == 1.0
        assert gaussian_kernel([1.0], [2.0]) == pytest.approx(math.exp(-0.25))
        assert gaussian_kernel([1.0], [2.0]) == pytest.approx(0.7788, abs=1e-4)

    def test_symmetric(self):
        d = np.array([0.3, -1.2, 2.0])
        s = np.array([0.5, 1.0, 3.0])
        assert gaussian_kernel(d, s) == gaussian_kernel(-d, s)


class TestDivergence:
    def test_identical_sets_are_zero(self):
        y = np.random.default_rng(2).standard_normal((7, 3))
        assert bregman_divergence(t64(y), t64(y.copy())).item() == 0.0

    def test_single_point_hand_value(self):
        d = bregman_divergence(t64([[0.0]]), t64([[1.0]]), pinned(1), pinned(1))
        assert d.item() == pytest.approx(2 - 2 * math.exp(-0.25), abs=1e-12)
        assert d.item() == pytest.approx(0.44239, abs=1e-5)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        ys, yt = rng.standard_normal((5, 3)), rng.standard_normal((4, 3)) + 0.5
        vs, vt = ys.var(0) + 1e-3, yt.var(0) + 1e-3
        got = bregman_divergence(t64(ys), t64(yt)).item()
        assert got == pytest.approx(bregman_loops(ys, yt, vs, vt), rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            bregman_divergence(t64(np.zeros((3, 2))), t64(np.zeros((3, 3))))

    def test_translation_response_monotone(self):
        rng = np.random.default_rng(4)
        ys = rng.standard_normal((10, 1))
        cov = pinned(1.0)
        seps = np.linspace(0, 5, 51)
        values = [bregman_divergence(t64(ys), t64(ys + s), cov, cov).item() for s in seps]
        assert np.all(np.diff(values) >= -1e-12)

    @settings(max_examples=50, deadline=None)
    @given(a=arrays(np.float64, (6, 2), elements=st.floats(-3, 3)),
           b=arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
    def test_symmetry(self, a, b):
        assert abs(bregman_divergence(t64(a), t64(b)).item() - bregman_divergence(t64(b), t64(a)).item()) <= 1e-6

    @settings(max_examples=50, deadline=None)
    @given(a=arrays(np.float64, (5, 3), elements=st.floats(-3, 3)),
           b=arrays(np.float64, (7, 3), elements=st.floats(-3, 3)),
           v=st.floats(0.01, 4.0))
    def test_nonnegative_with_shared_covariance(self, a, b, v):
        cov = pinned(v, 3)
        assert bregman_divergence(t64(a), t64(b), cov, cov).item() >= -1e-9


class TestGradients:
    def test_single_point_hand_value(self):
        gs, gt = bregman_gradients(t64([[0.0]]), t64([[1.0]]), pinned(1), pinned(1))
        assert gs[0, 0] == pytest.approx(-math.exp(-0.25), abs=1e-12)
        assert gt[0, 0] == pytest.approx(math.exp(-0.25), abs=1e-12)
        assert gs[0, 0] == pytest.approx(-0.77880, abs=1e-5)

    def test_zero_at_identity(self):
        y = np.random.default_rng(5).standard_normal((8, 3))
        gs, gt = bregman_gradients(t64(y), t64(y.copy()))
        assert np.linalg.norm(gs) <= 1e-12 and np.linalg.norm(gt) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        ys, yt = rng.standard_normal((8, 3)), rng.standard_normal((8, 3)) * 0.7 + 0.4
        cs = DiagCovariance(ys.var(0) + 1e-3)
        ct = DiagCovariance(yt.var(0) + 1e-3)
        gs, gt = bregman_gradients(t64(ys), t64(yt))

        def f():
            return bregman_divergence(t64(ys, False), t64(yt, False), cs, ct).item()

        fd_s = central_diff(f, ys)
        fd_t = central_diff(f, yt)
        assert rel_err(gs.ravel(), [fd_s[i] for i in range(ys.size)], floor=1e-4).max() <= 1e-4
        assert rel_err(gt.ravel(), [fd_t[i] for i in range(yt.size)], floor=1e-4).max() <= 1e-4

    def test_backward_matches_analytic(self):
        rng = np.random.default_rng(6)
        a, b = t64(rng.standard_normal((5, 2))), t64(rng.standard_normal((6, 2)))
        backward(bregman_divergence(a, b) * 3.0)
        gs, gt = bregman_gradients(a.data, b.data)
        np.testing.assert_allclose(a.grad, 3 * gs, rtol=1e-13)
        np.testing.assert_allclose(b.grad, 3 * gt, rtol=1e-13)

    def test_float32_path(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.standard_normal((16, 3)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.standard_normal((16, 3)).astype(np.float32), requires_grad=True)
        d = bregman_divergence(a, b)
        backward(d)
        assert d.dtype == np.float32 and a.grad.dtype == np.float32


class TestGradientReversal:
    def test_forward_identity(self):
        x = t64(np.random.default_rng(0).standard_normal((3, 2)))
        assert grl_forward(x, 0.1).data.tobytes() == x.data.tobytes()

    def test_scaled_reversal(self):
        x = t64([1.0, 1.0])
        y = grl_forward(x, 0.1)
        backward((y * Tensor(np.array([1.0, -2.0]))).sum())
        np.testing.assert_allclose(x.grad, [-0.1, 0.2], rtol=1e-15)

    def test_alpha_zero_blocks(self):
        x = t64([1.0, 2.0])
        backward(grl_forward(x, 0.0).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GrlConfig(-1.0)
        with pytest.warns(UserWarning):
            GrlConfig(0.5)


class TestDomainAdversarial:
    def _head(self, d):
        head = Dense(d, 2, np.random.default_rng(0))
        head.weight.data = np.zeros((2, d))
        head.bias.data = np.zeros(2)
        return head

    def test_zero_head_is_ln2(self):
        rng = np.random.default_rng(1)
        loss = domain_adversarial_loss(t64(rng.standard_normal((4, 3))), t64(rng.standard_normal((6, 3))),
                                       self._head(3), GrlConfig(0.1))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_encoder_gradient_is_reversed_and_scaled(self):
        rng = np.random.default_rng(2)
        head = Dense(3, 2, rng)
        head.weight.data = head.weight.data.astype(np.float64)
        head.bias.data = head.bias.data.astype(np.float64)
        xs, xt = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))

        a, b = t64(xs), t64(xt)
        backward(domain_adversarial_loss(a, b, head, GrlConfig(0.1)))
        c, d = t64(xs), t64(xt)
        backward(_plain_domain_loss(c, d, head))
        np.testing.assert_allclose(a.grad, -0.1 * c.grad, atol=1e-7, rtol=0)
        np.testing.assert_allclose(b.grad, -0.1 * d.grad, atol=1e-7, rtol=0)

    def test_separable_latents_saturate(self):
        # training only the head on well separated latents drives the loss to zero and
        # the gradient reaching the encoder vanishes with it
        rng = np.random.default_rng(3)
        src = rng.standard_normal((32, 2)) * 0.1 + [3.0, 0.0]
        tgt = rng.standard_normal((32, 2)) * 0.1 - [3.0, 0.0]
        head = self._head(2)  # uninformed start: loss ln 2, largest reversed gradient
        norms, losses = [], []
        for _ in range(300):
            a, b = t64(src), t64(tgt)
            loss = domain_adversarial_loss(a, b, head, GrlConfig(0.1))
            backward(loss)
            losses.append(loss.item())
            norms.append(np.linalg.norm(a.grad) + np.linalg.norm(b.grad))
            for p in head.parameters():
                p.data -= 0.5 * p.grad
                p.grad = None
        assert losses[-1] < 1e-2
        assert norms[-1] < 0.1 * max(norms)

    def test_terms_per_domain(self):
        rng = np.random.default_rng(4)
        da_s, da_t = domain_adversarial_terms(t64(rng.standard_normal((3, 2))), t64(rng.standard_normal((5, 2))),
                                              self._head(2), GrlConfig(0.1))
        assert da_s.item() == pytest.approx(math.log(2))
        assert da_t.item() == pytest.approx(math.log(2))


def _plain_domain_loss(src, tgt, head):
    """Same pooled domain cross-entropy without the reversal layer."""
    from dsadapt.autodiff import softmax_cross_entropy

    ns, nt = src.shape[0], tgt.shape[0]
    ls = softmax_cross_entropy(dense(src, head.weight, head.bias), np.zeros(ns, dtype=int))
    lt = softmax_cross_entropy(dense(tgt, head.weight, head.bias), np.ones(nt, dtype=int))
    return ls * (ns / (ns + nt)) + lt * (nt / (ns + nt))
