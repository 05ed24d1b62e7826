"""Gradient checks for every tape op against central differences (float64)."""

import numpy as np
import pytest

from icuseq import autodiff as ad
from icuseq.errors import ShapeMismatch

RNG = np.random.default_rng(7)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f()
        flat[i] = orig - eps
        f_minus = f()
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2 * eps)
    return g


def check_op(build_loss, *shapes, atol=1e-8, rtol=1e-5):
    """build_loss(tensors...) -> scalar Tensor; verifies grads of every input."""
    tensors = [ad.parameter(RNG.standard_normal(s), f"x{i}") for i, s in enumerate(shapes)]
    loss = build_loss(*tensors)
    ad.backward(loss)
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda t=t: build_loss(*tensors).item(), t.data)
        np.testing.assert_allclose(analytic, numeric, atol=atol, rtol=rtol)


def weighted(x: ad.Tensor) -> ad.Tensor:
    """Project to a scalar with fixed random weights so every entry matters."""
    w = ad.constant(np.random.default_rng(x.data.size).standard_normal(x.data.shape))
    return ad.sum_all(ad.mul(x, w))


class TestElementwise:
    def test_add_broadcast(self):
        check_op(lambda a, b: weighted(ad.add(a, b)), (3, 4), (4,))

    def test_sub_broadcast(self):
        check_op(lambda a, b: weighted(ad.sub(a, b)), (2, 3, 4), (3, 4))

    def test_mul(self):
        check_op(lambda a, b: weighted(ad.mul(a, b)), (5, 2), (5, 2))

    def test_scale(self):
        check_op(lambda a: weighted(ad.scale(a, -2.5)), (4, 3))

    def test_gelu(self):
        check_op(lambda a: weighted(ad.gelu(a)), (6, 5))

    def test_diamond_graph_accumulates(self):
        x = ad.parameter(np.array([1.5, -2.0]), "x")
        loss = ad.sum_all(ad.add(ad.mul(x, x), x))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)


class TestMatmul:
    def test_plain(self):
        check_op(lambda a, b: weighted(ad.matmul(a, b)), (3, 4), (4, 5))

    def test_batched(self):
        check_op(lambda a, b: weighted(ad.matmul(a, b)), (2, 3, 4), (2, 4, 5))

    def test_broadcast_rhs(self):
        # (B, L, K) @ (K, D): the shared right factor must sum over the batch
        check_op(lambda a, b: weighted(ad.matmul(a, b)), (2, 3, 4), (4, 5))

    def test_four_dim(self):
        check_op(lambda a, b: weighted(ad.matmul(a, b)), (2, 2, 3, 4), (2, 2, 4, 3))


class TestShapes:
    def test_reshape(self):
        check_op(lambda a: weighted(ad.reshape(a, (6, 2))), (3, 4))

    def test_transpose(self):
        check_op(lambda a: weighted(ad.transpose(a, (1, 0, 2))), (2, 3, 4))

    def test_take_position(self):
        check_op(lambda a: weighted(ad.take_position(a, 0)), (2, 3, 4))

    def test_squeeze_last(self):
        check_op(lambda a: weighted(ad.squeeze_last(a)), (3, 4, 1))

    def test_gather_rows_scatter_adds(self):
        idx = np.array([[0, 2, 2], [1, 0, 2]])
        check_op(lambda t: weighted(ad.gather_rows(t, idx)), (3, 4))

    def test_take_rows(self):
        idx = np.array([0, 3, 3, 1])
        check_op(lambda t: weighted(ad.take_rows(t, idx)), (5, 2))


class TestSoftmaxMasked:
    def test_rows_sum_to_one_over_admissible(self):
        scores = ad.constant(RNG.standard_normal((2, 2, 3, 5)))
        keep = np.array([True, True, False, True, False])
        p = ad.softmax_masked(scores, keep)
        np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(p.data[..., ~keep] == 0.0)

    def test_gradient(self):
        keep = np.array([True, False, True, True])
        check_op(lambda s: weighted(ad.softmax_masked(s, keep)), (2, 3, 4))

    def test_no_admissible_positions_safe(self):
        scores = ad.constant(RNG.standard_normal((1, 4)))
        p = ad.softmax_masked(scores, np.zeros(4, dtype=bool))
        assert np.all(p.data == 0.0)
        assert np.all(np.isfinite(p.data))


class TestDropout:
    def test_eval_is_identity(self):
        x = ad.parameter(RNG.standard_normal((3, 3)), "x")
        out = ad.dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert out is x

    def test_gradient_with_fixed_mask(self):
        check_op(lambda a: weighted(ad.dropout(a, 0.4, np.random.default_rng(3), training=True)),
                 (4, 4))

    def test_scaling_preserves_expectation(self):
        x = ad.constant(np.ones((200, 200)))
        out = ad.dropout(x, 0.25, np.random.default_rng(0), training=True)
        assert out.data.mean() == pytest.approx(1.0, abs=0.02)


class TestLosses:
    def test_layer_norm_gradient(self):
        check_op(lambda x, g, b: weighted(ad.layer_norm(x, g, b)), (3, 6), (6,), (6,))

    def test_layer_norm_moments(self):
        x = ad.constant(RNG.standard_normal((10, 32)))
        out = ad.layer_norm(x, ad.constant(np.ones(32)), ad.constant(np.zeros(32)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-6)

    def test_cross_entropy_uniform(self):
        logits = ad.parameter(np.zeros((3, 4)), "l")
        loss = ad.cross_entropy_mean(logits, np.array([0, 1, 3]))
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_cross_entropy_exact_zero_when_confident(self):
        logits = ad.constant(1000.0 * np.eye(4)[np.array([2, 0])])
        assert ad.cross_entropy_mean(logits, np.array([2, 0])).item() == 0.0

    def test_cross_entropy_gradient(self):
        targets = np.array([1, 0, 2, 2])
        check_op(lambda l: ad.cross_entropy_mean(l, targets), (4, 3))

    def test_mae_gradient(self):
        target = RNG.standard_normal((5,))
        check_op(lambda p: ad.mae_mean(p, target), (5,))

    def test_mae_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.mae_mean(ad.constant(np.zeros(3)), np.zeros(4))

    def test_bce_half_probability(self):
        logits = ad.constant(np.zeros(1))
        loss = ad.bce_logits_mean(logits, np.array([1.0]), 1.0)
        assert loss.item() == pytest.approx(np.log(2.0))

    def test_bce_gradient(self):
        labels = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
        check_op(lambda z: ad.bce_logits_mean(z, labels, 2.5), (5,))

    def test_bce_floor_at_infinite_logits(self):
        logits = ad.constant(np.full((2, 3), -np.inf))
        loss = ad.bce_logits_mean(logits, np.zeros((2, 3)), 1.0)
        assert loss.item() == 0.0

    def test_backward_requires_scalar(self):
        x = ad.parameter(np.ones(3), "x")
        with pytest.raises(ShapeMismatch):
            ad.backward(ad.mul(x, x))
