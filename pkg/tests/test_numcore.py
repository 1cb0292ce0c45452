import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tdvcl.numcore import (ContractError, DimensionError, GradTape, NumericError, SeededRng, Tensor,
                           affine, backward, exp, log, reduce_mean, reduce_sum, relu, softmax_xent,
                           softplus)

from conftest import central_difference, rel_err


def naive_affine(W, b, x):
    m, k = W.shape
    out = np.zeros(m)
    for i in range(m):
        acc = b[i]
        for j in range(k):
            acc += W[i, j] * x[j]
        out[i] = acc
    return out


class TestAffine:
    def test_identity_map(self):
        y = affine(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.0, 0.0]), Tensor([3.0, 4.0]))
        assert y.value.tolist() == [3.0, 4.0]

    def test_hand_arithmetic(self):
        y = affine(Tensor([[2.0, 1.0]]), Tensor([1.0]), Tensor([1.0, 1.0]))
        assert y.value.tolist() == [4.0]

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
    def test_matches_naive_loops(self, m, k, seed):
        rng = np.random.default_rng(seed)
        W, b, x = rng.normal(size=(m, k)), rng.normal(size=m), rng.normal(size=k)
        np.testing.assert_allclose(affine(Tensor(W), Tensor(b), Tensor(x)).value,
                                   naive_affine(W, b, x), rtol=1e-13, atol=1e-13)

    def test_batched_rows_match_single(self):
        rng = np.random.default_rng(0)
        W, b, X = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(5, 4))
        batched = affine(Tensor(W), Tensor(b), Tensor(X)).value
        for n in range(5):
            np.testing.assert_allclose(batched[n], naive_affine(W, b, X[n]), rtol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            affine(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.ones(4)))
        with pytest.raises(DimensionError):
            affine(Tensor(np.ones((2, 3))), Tensor(np.ones(3)), Tensor(np.ones(3)))


class TestSoftmaxXent:
    def test_symmetric_logits(self):
        loss, probs = softmax_xent(Tensor([[0.0, 0.0]]), np.array([0]))
        assert loss.value[0] == pytest.approx(math.log(2), abs=1e-15)
        np.testing.assert_allclose(probs[0], [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        loss, probs = softmax_xent(Tensor([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(loss.value).all()
        assert loss.value[0] == pytest.approx(0.0, abs=1e-12)

    @given(st.integers(2, 8), st.integers(0, 2 ** 31))
    def test_matches_direct_normalisation(self, C, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(4, C)) * 3
        y = rng.integers(0, C, 4)
        loss, probs = softmax_xent(Tensor(z), y)
        direct = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        # -log(p) of the direct oracle loses relative precision as p -> 1
        np.testing.assert_allclose(loss.value, -np.log(direct[np.arange(4), y]), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_non_finite_logits(self):
        with pytest.raises(NumericError):
            softmax_xent(Tensor([[np.nan, 0.0]]), np.array([0]))

    def test_bad_shapes(self):
        with pytest.raises(ContractError):
            softmax_xent(Tensor([[1.0]]), np.array([0]))
        with pytest.raises(ContractError):
            softmax_xent(Tensor([[1.0, 2.0]]), np.array([2]))


class TestBackward:
    def test_square(self):
        with GradTape() as tape:
            x = tape.watch(np.array(3.0))
            y = x * x
        assert backward(tape, y)[x] == pytest.approx(6.0)

    def test_unused_leaf_gets_exact_zero(self):
        with GradTape() as tape:
            x = tape.watch(np.array([1.0, 2.0]))
            unused = tape.watch(np.array([5.0, 6.0, 7.0]))
            y = reduce_sum(x * x)
        grads = backward(tape, y)
        assert np.array_equal(grads[unused], np.zeros(3))

    def test_non_scalar_loss(self):
        with GradTape() as tape:
            x = tape.watch(np.array([1.0, 2.0]))
            y = x * x
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_reuse_accumulates(self):
        with GradTape() as tape:
            x = tape.watch(np.array([2.0]))
            y = reduce_sum(x * x + x * 3.0 + x)
        np.testing.assert_allclose(backward(tape, y)[x], [8.0])

    def test_two_layer_net_against_finite_differences(self):
        rng = np.random.default_rng(1)
        W1, b1 = rng.normal(size=(5, 4)), rng.normal(size=5)
        W2, b2 = rng.normal(size=(3, 5)), rng.normal(size=3)
        x, y = rng.normal(size=(7, 4)), rng.integers(0, 3, 7)
        params = [W1, b1, W2, b2]

        def loss_value():
            h = np.maximum(x @ W1.T + b1, 0.0)
            z = h @ W2.T + b2
            z = z - z.max(axis=1, keepdims=True)
            return float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(7), y]))

        with GradTape() as tape:
            leaves = [tape.watch(p) for p in params]
            h = relu(affine(leaves[0], leaves[1], Tensor(x)))
            nll, _ = softmax_xent(affine(leaves[2], leaves[3], h), y)
            loss = reduce_mean(nll)
        grads = backward(tape, loss)
        for leaf, p in zip(leaves, params):
            numeric = central_difference(loss_value, p)
            assert rel_err(grads[leaf], numeric).max() < 1e-4

    @given(st.integers(0, 2 ** 31))
    def test_composed_ops_against_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=4)

        def build(ta, tb):
            u = exp(ta * 0.3) * tb - log(tb + 1.0)
            v = softplus(u)[1:, :] - ta[:2, ::2].reshape(2, 2).sum(axis=1).reshape(2, 1)
            return reduce_mean(v * v) + reduce_sum(relu(-ta))

        with GradTape() as tape:
            ta, tb = tape.watch(a), tape.watch(b)
            out = build(ta, tb)
        grads = backward(tape, out)

        def value():
            return build(Tensor(a), Tensor(b)).item()

        assert rel_err(grads[ta], central_difference(value, a)).max() < 1e-4
        assert rel_err(grads[tb], central_difference(value, b)).max() < 1e-4

    def test_reverse_order_replay(self):
        order = []
        with GradTape() as tape:
            x = tape.watch(np.array(2.0))
            y = x * x
            z = y * 3.0
        for node in reversed(tape.nodes):
            order.append(node)
        assert order[0] is z and order[-1] is y


class TestTensor:
    def test_values_are_float64(self):
        assert Tensor([1, 2]).value.dtype == np.float64

    def test_no_tape_means_no_recording(self):
        x = Tensor(np.ones(3))
        assert (x * 2.0).parents == ()


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a, b = SeededRng(7), SeededRng(7)
        assert np.array_equal(a.normal(100), b.normal(100))
        assert np.array_equal(a.uniform(10), b.uniform(10))

    def test_children_are_independent_and_stable(self):
        r = SeededRng(3)
        assert np.array_equal(r.child(1, 2).normal(5), SeededRng(3).child(1, 2).normal(5))
        assert not np.array_equal(r.child(1).normal(5), r.child(2).normal(5))

    def test_normal_moments(self):
        z = SeededRng(0).normal(200_000)
        assert abs(z.mean()) < 3 / math.sqrt(z.size) * 1.5
        assert abs(z.var() - 1.0) < 0.02
