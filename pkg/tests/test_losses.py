import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, rel_error
from rqtok.losses import (LossError, LossReport, codebook_loss, cosine_alignment_loss, joint_loss,
                          masked_cross_entropy, softmax, straight_through, straight_through_backward,
                          tokenizer_loss)


def ce_value(tokens, mask, logits):
    """Reference masked CE from logits, written with explicit loops."""
    total, n = 0.0, 0
    T, M = tokens.shape
    for t in range(T):
        if not mask[t]:
            continue
        n += 1
        for m in range(M):
            row = logits[m][t]
            lse = max(row) + math.log(sum(math.exp(v - max(row)) for v in row))
            total -= row[tokens[t, m]] - lse
    return total / n


class TestCrossEntropy:
    def test_half_half(self):
        r = masked_cross_entropy([[0]], [True], [np.array([[0.5, 0.5]])])
        assert r.loss == pytest.approx(math.log(2), abs=1e-15)
        assert not r.clamped

    def test_perfect_prediction(self):
        y = np.array([[1, 0], [2, 1]])
        probs = [np.eye(3)[y[:, 0]], np.eye(2)[y[:, 1]]]
        assert masked_cross_entropy(y, [True, True], probs).loss == 0.0

    def test_gradient_formula(self):
        p = np.array([[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]])
        r = masked_cross_entropy([[1], [0], [0]], [True, False, True], [p])
        expected = np.array([[0.2, -0.2], [0.0, 0.0], [-0.5, 0.5]]) / 2
        np.testing.assert_allclose(r.grad_logits[0], expected, atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        T, sizes = 5, [3, 4]
        logits = [rng.normal(size=(T, K)) for K in sizes]
        y = np.stack([rng.integers(K, size=T) for K in sizes], axis=1)
        mask = rng.random(T) < 0.6
        mask[0] = True

        r = masked_cross_entropy(y, mask, [softmax(l) for l in logits])
        assert r.loss == pytest.approx(ce_value(y, mask, logits), rel=1e-12)
        for m in range(len(sizes)):
            num = central_difference(lambda: ce_value(y, mask, logits), logits[m])
            assert rel_error(r.grad_logits[m], num) < 1e-6

    def test_all_positions_mode(self):
        p = np.array([[0.5, 0.5], [0.25, 0.75]])
        r = masked_cross_entropy([[0], [1]], [True, False], [p], all_positions=True)
        assert r.loss == pytest.approx((math.log(2) - math.log(0.75)) / 2)

    def test_batched_shapes(self):
        rng = np.random.default_rng(3)
        p = softmax(rng.normal(size=(2, 4, 3)))
        y = rng.integers(3, size=(2, 4, 1))
        mask = np.array([[True, False, True, False], [False, False, True, True]])
        r = masked_cross_entropy(y, mask, [p])
        flat = masked_cross_entropy(y.reshape(8, 1), mask.reshape(8), [p.reshape(8, 3)])
        assert r.loss == flat.loss
        assert r.grad_logits[0].shape == (2, 4, 3)

    def test_empty_mask(self):
        with pytest.raises(LossError):
            masked_cross_entropy([[0]], [False], [np.array([[0.5, 0.5]])])

    def test_zero_probability_clamped(self):
        r = masked_cross_entropy([[0]], [True], [np.array([[0.0, 1.0]])])
        assert r.clamped
        assert r.loss == pytest.approx(-math.log(1e-12))

    def test_out_of_range_target(self):
        with pytest.raises(LossError):
            masked_cross_entropy([[2]], [True], [np.array([[0.5, 0.5]])])


class TestCodebookLoss:
    def test_example(self):
        loss, dz, dq = codebook_loss([[1.0, 0.0]], [[0.0, 0.0]], 0.25)
        assert loss == 1.25
        np.testing.assert_array_equal(dz, [[0.5, 0.0]])
        np.testing.assert_array_equal(dq, [[-2.0, 0.0]])

    def test_equal_inputs(self):
        z = np.random.default_rng(0).normal(size=(4, 3))
        loss, dz, dq = codebook_loss(z, z.copy())
        assert loss == 0 and not dz.any() and not dq.any()

    @pytest.mark.parametrize("seed", range(10))
    def test_termwise_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        z, q = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        beta = rng.uniform(0.1, 1.0)
        _, dz, dq = codebook_loss(z, q, beta)
        # commitment term only depends on z, codebook term only on q
        commit = lambda: beta * ((z - q) ** 2).sum() / len(z)
        book = lambda: ((z - q) ** 2).sum() / len(z)
        assert rel_error(dz, central_difference(commit, z)) < 1e-6
        assert rel_error(dq, central_difference(book, q)) < 1e-6

    def test_errors(self):
        with pytest.raises(LossError):
            codebook_loss(np.zeros((2, 3)), np.zeros((3, 3)))
        with pytest.raises(LossError):
            codebook_loss(np.zeros((2, 3)), np.zeros((2, 3)), beta=-1)


class TestCosine:
    def test_identical(self):
        z = np.random.default_rng(1).normal(size=(5, 3))
        assert cosine_alignment_loss(z, z.copy())[0] == pytest.approx(0.0, abs=1e-15)

    def test_extremes(self):
        assert cosine_alignment_loss([[1.0, 0.0]], [[0.0, 2.0]])[0] == 1.0
        assert cosine_alignment_loss([[-1.0, 3.0]], [[1.0, -3.0]])[0] == pytest.approx(2.0)

    def test_ratio_of_sums(self):
        a = np.array([[1.0, 0.0], [0.0, 3.0]])
        b = np.array([[1.0, 0.0], [3.0, 0.0]])
        # mean-of-cosines would give 0.5; the ratio of sums weights by norms
        assert cosine_alignment_loss(a, b)[0] == pytest.approx(1 - 1 / 10)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        _, da, db = cosine_alignment_loss(a, b)
        f = lambda: cosine_alignment_loss(a, b)[0]
        assert rel_error(da, central_difference(f, a)) < 1e-6
        assert rel_error(db, central_difference(f, b)) < 1e-6

    def test_zero_vector(self):
        with pytest.raises(LossError):
            cosine_alignment_loss([[0.0, 0.0]], [[1.0, 0.0]])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda T: st.tuples(
    arrays(np.float64, (T, 3), elements=st.floats(-5, 5)),
    arrays(np.float64, (T, 3), elements=st.floats(-5, 5)))))
def test_cosine_bounds(pair):
    a, b = pair
    if np.any(np.linalg.norm(a, axis=1) < 1e-3) or np.any(np.linalg.norm(b, axis=1) < 1e-3):
        return
    loss = cosine_alignment_loss(a, b)[0]
    assert -1e-12 <= loss <= 2 + 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10)), st.integers(0, 2 ** 31))
def test_cross_entropy_nonnegative(logits, seed):
    y = np.random.default_rng(seed).integers(3, size=(4, 1))
    assert masked_cross_entropy(y, [True] * 4, [softmax(logits)]).loss >= 0


class TestCombinations:
    def test_tokenizer_loss(self):
        assert tokenizer_loss(1.25, 0.5, 1.0) == 1.75
        assert tokenizer_loss(1.25, 0.5, 0.0) == 1.25
        vals = [tokenizer_loss(1.25, 0.5, lam) for lam in (0.5, 1.5, 2.5)]
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0])

    def test_joint_loss(self):
        assert joint_loss(0.7, 1.75, 0.5) == pytest.approx(1.575)
        assert joint_loss(0.7, 1.75, 0.0) == 0.7
        with pytest.raises(LossError):
            joint_loss(0.7, 1.75, -0.1)

    def test_default_alpha(self):
        assert LossReport().alpha == 0.5

    def test_report_identities(self):
        r = LossReport(encoder_loss=0.7, cb_loss=1.25, cos_loss=0.5, lambda_cos=2.0, alpha=0.3)
        d = r.as_dict()
        assert d["tokenizer_loss"] == 1.25 + 2.0 * 0.5
        assert d["joint_loss"] == 0.7 + 0.3 * d["tokenizer_loss"]


class TestStraightThrough:
    def test_forward(self):
        np.testing.assert_array_equal(straight_through([1.0, 2.0], [3.0, 4.0]), [3.0, 4.0])

    def test_backward(self):
        gz, gq = straight_through_backward([0.5, -1.0])
        np.testing.assert_array_equal(gz, [0.5, -1.0])
        assert not gq.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_through_cosine_with_frozen_assignment(self, seed):
        # tokenizer encoder W maps x to z; q = z + (c_k - z) with k held fixed,
        # so under straight-through d loss/dW flows as if q were z
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 4))
        W = rng.normal(size=(3, 4))
        codes = rng.normal(size=(6, 3))
        k = (((x @ W.T)[:, None] - codes[None]) ** 2).sum(axis=2).argmin(axis=1)
        teacher = rng.normal(size=(5, 3))

        def surrogate():
            z = x @ W.T
            q = z + (codes[k] - (x @ W0.T))  # offset is constant in W
            return cosine_alignment_loss(q, teacher)[0]

        W0 = W.copy()
        q = straight_through(x @ W.T, codes[k])
        _, dq, _ = cosine_alignment_loss(q, teacher)
        gz, _ = straight_through_backward(dq)
        analytic = gz.T @ x
        assert rel_error(analytic, central_difference(surrogate, W)) < 1e-5
