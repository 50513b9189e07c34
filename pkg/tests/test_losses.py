import math

import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrclip.losses import (
    EmbeddingBatch,
    LossConfig,
    ShapeMismatch,
    ZeroNormRow,
    clip_loss,
    cosine_matrix,
    loss_graph,
    prob_matrices,
    se_loss,
    soft_target,
    total_loss,
)
from mrclip.numeric import Parameter, Tensor, finite_diff_check


def random_batch(rng, n=4, d=8):
    return EmbeddingBatch(rng.normal(size=(n, d)), rng.normal(size=(n, d)))


def random_S(rng, n):
    S = rng.uniform(size=(n, n))
    S = (S + S.T) / 2
    np.fill_diagonal(S, 1.0)
    return S


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(tau=0), dict(alpha=0, beta=0), dict(alpha=-1), dict(epsilon_smooth=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)


class TestCosine:
    def test_orthonormal_identity(self):
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
        C = cosine_matrix(EmbeddingBatch(q, q))
        np.testing.assert_allclose(C, np.eye(5), atol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        b = random_batch(rng)
        C = cosine_matrix(b)
        C2 = cosine_matrix(EmbeddingBatch(3.7 * b.image_vectors, 0.02 * b.text_vectors))
        np.testing.assert_allclose(C2, C, atol=1e-12, rtol=0)
        rows = rng.uniform(0.1, 10, size=(4, 1))
        np.testing.assert_allclose(cosine_matrix(EmbeddingBatch(rows * b.image_vectors, b.text_vectors)), C, atol=1e-12)

    def test_matches_per_pair_oracle(self):
        b = random_batch(np.random.default_rng(2))
        C = cosine_matrix(b)
        for i in range(4):
            for j in range(4):
                assert abs(C[i, j] - oracles.cosine(b.image_vectors[i], b.text_vectors[j])) < 1e-12
        assert np.all(np.abs(C) <= 1.0)

    def test_zero_row(self):
        v = np.ones((3, 2))
        t = np.ones((3, 2))
        t[1] = 0
        with pytest.raises(ZeroNormRow) as info:
            EmbeddingBatch(v, t)
        assert info.value.side == "text" and info.value.row == 1

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            EmbeddingBatch(np.ones((3, 2)), np.ones((2, 2)))


class TestProbabilities:
    def test_uniform(self):
        for tau in (0.07, 1.0, 5.0):
            p, q = prob_matrices(np.zeros((4, 4)), tau)
            assert np.all(p == 0.25) and np.all(q == 0.25)

    def test_sharp_diagonal(self):
        p, _ = prob_matrices(10 * np.eye(3), 0.07)
        # Scalar softmax: 1 / (1 + 2 exp(-10 / 0.07)).
        expected = 1.0 / (1.0 + 2 * math.exp(-10 / 0.07))
        assert np.all(np.diag(p) > 0.999)
        assert abs(p[0, 0] - expected) < 1e-15

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(2, 10))
            C = rng.uniform(-1, 1, size=(n, n))
            p, q = prob_matrices(C, float(rng.uniform(0.01, 2)))
            np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-9)
            np.testing.assert_allclose(q.sum(axis=1), 1, atol=1e-9)

    def test_t2v_is_softmax_of_transpose(self):
        C = np.random.default_rng(4).uniform(-1, 1, size=(4, 4))
        p, q = prob_matrices(C, 0.5)
        p_t, _ = prob_matrices(C.T, 0.5)
        np.testing.assert_array_equal(q, p_t)

    def test_no_overflow(self):
        p, _ = prob_matrices(np.array([[1.0, -1.0], [0.5, 0.2]]), 1e-4)
        assert np.all(np.isfinite(p))


class TestClipLoss:
    def test_uniform_is_log_n(self):
        for n in (2, 5, 64):
            u = np.full((n, n), 1.0 / n)
            assert clip_loss(u, u)[2] == pytest.approx(math.log(n), abs=1e-12)

    def test_concentrated(self):
        p, q = prob_matrices(np.eye(4), 1e-3)
        assert clip_loss(p, q)[2] < 1e-12

    def test_two_by_two(self):
        P = np.array([[0.9, 0.1], [0.2, 0.8]])
        l_v2t, l_t2v, l_clip = clip_loss(P, P)
        expected = -(math.log(0.9) + math.log(0.8)) / 2
        assert abs(l_v2t - expected) < 1e-15
        assert round(expected, 5) == 0.16425
        assert l_clip == pytest.approx(expected)


class TestSoftTarget:
    def test_identity(self):
        Q = soft_target(np.eye(2), 1e-6)
        np.testing.assert_allclose(Q[0], np.array([1.000001, 1e-6]) / 1.000002, rtol=1e-15)

    def test_all_ones(self):
        np.testing.assert_allclose(soft_target(np.ones((4, 4))), 0.25, rtol=1e-15)

    def test_row_stochastic_positive(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            Q = soft_target(random_S(rng, 6))
            np.testing.assert_allclose(Q.sum(axis=1), 1, atol=1e-12)
            assert np.all(Q > 0)


class TestSeLoss:
    def test_zero_at_target(self):
        S = random_S(np.random.default_rng(6), 5)
        Q = soft_target(S)
        assert se_loss(Q, Q, S)[2] < 1e-12

    def test_identity_target_uniform_prediction(self):
        u = np.full((2, 2), 0.5)
        val = se_loss(u, u, np.eye(2), 1e-6)[2]
        q_hi, q_lo = 1.000001 / 1.000002, 1e-6 / 1.000002
        expected = 0.5 * math.log(0.5 / q_hi) + 0.5 * math.log(0.5 / q_lo)
        assert val == pytest.approx(expected, rel=1e-12)
        assert math.isfinite(val) and val > 5

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 8))
            p, q = prob_matrices(rng.uniform(-1, 1, (n, n)), float(rng.uniform(0.05, 1)))
            assert se_loss(p, q, random_S(rng, n))[2] >= 0

    def test_zero_probability_terms(self):
        P = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert se_loss(P, P, np.eye(2))[2] == pytest.approx(-math.log(1.000001 / 1.000002), abs=1e-15)


class TestTotalLoss:
    def test_beta_zero_is_plain_clip(self):
        rng = np.random.default_rng(8)
        b = random_batch(rng)
        out = total_loss(b, random_S(rng, 4), LossConfig(alpha=0.7, beta=0.0))
        assert out.L_total == 0.7 * out.L_clip

    def test_alpha_zero_at_target(self):
        # Orthonormal embeddings with tau = 1 give P = softmax(I); build S so
        # its smoothed row-normalisation equals P exactly in value.
        n = 3
        P, _ = prob_matrices(np.eye(n), 1.0)
        eps = 1e-6
        S = P * (1 + n * eps) - eps
        b = EmbeddingBatch(np.eye(n), np.eye(n))
        out = total_loss(b, S, LossConfig(tau=1.0, alpha=0.0, beta=1.0, epsilon_smooth=eps))
        assert out.L_total < 1e-12

    def test_hand_computed_two_by_two(self):
        V = [[1.0, 0.5], [-0.3, 2.0]]
        T = [[0.8, 0.1], [0.4, -1.2]]
        S = [[1.0, 0.25], [0.25, 1.0]]
        expected, l_clip, l_se = oracles.scalar_total_loss(V, T, S, 0.07, 1.0, 1.0, 1e-6)
        out = total_loss(EmbeddingBatch(np.array(V), np.array(T)), np.array(S), LossConfig())
        assert abs(out.L_total - expected) < 1e-10
        assert abs(out.L_clip - l_clip) < 1e-10 and abs(out.L_se - l_se) < 1e-10

    def test_graph_matches_numpy_path(self):
        rng = np.random.default_rng(9)
        for n in (2, 4, 8):
            b = random_batch(rng, n, 16)
            S = random_S(rng, n)
            out = total_loss(b, S)
            t, parts = loss_graph(Tensor(b.image_vectors), Tensor(b.text_vectors), S, LossConfig())
            assert float(t.value) == pytest.approx(out.L_total, rel=1e-12)
            np.testing.assert_allclose(parts["C"].value, out.C, atol=1e-14)

    def test_scale_invariance(self):
        rng = np.random.default_rng(10)
        b = random_batch(rng, 6, 5)
        S = random_S(rng, 6)
        base = total_loss(b, S).L_total
        scaled = total_loss(EmbeddingBatch(12.5 * b.image_vectors, 0.3 * b.text_vectors), S).L_total
        assert abs(base - scaled) < 1e-10

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        b = random_batch(rng, 6, 5)
        S = random_S(rng, 6)
        perm = rng.permutation(6)
        a = total_loss(b, S)
        c = total_loss(EmbeddingBatch(b.image_vectors[perm], b.text_vectors[perm]), S[np.ix_(perm, perm)])
        for k, v in a.scalars().items():
            assert c.scalars()[k] == pytest.approx(v, rel=1e-12, abs=1e-14)

    def test_constant_embeddings_give_log_n(self):
        v = np.tile(np.array([[0.3, -1.0, 2.0]]), (16, 1))
        out = total_loss(EmbeddingBatch(v, v), None, LossConfig(beta=0.0))
        assert abs(out.L_clip - math.log(16)) < 1e-9

    def test_kl_alone_matches_clip_argmax(self):
        # Minimise only the KL term toward S = I and check the one-hot structure.
        rng = np.random.default_rng(12)
        n, d = 4, 6
        V = Parameter(rng.normal(size=(n, d)))
        T = Parameter(rng.normal(size=(n, d)))
        cfg = LossConfig(tau=0.07, alpha=0.0, beta=1.0, epsilon_smooth=1e-6)
        from mrclip.numeric import AdamState, adam_step, grad_eval

        opt = AdamState.for_params([V, T])
        for _ in range(300):
            V.zero_grad()
            T.zero_grad()
            loss, _ = loss_graph(V, T, np.eye(n), cfg)
            grad_eval(loss)
            adam_step(opt, [V, T], 0.05)
        P, _ = prob_matrices(cosine_matrix(EmbeddingBatch(V.value, T.value)), 0.07)
        assert list(P.argmax(axis=1)) == list(range(n))

    @pytest.mark.parametrize("n", [2, 4, 8])
    @pytest.mark.parametrize("d", [3, 16])
    def test_gradient_matches_finite_differences(self, n, d):
        rng = np.random.default_rng(100 * n + d)
        V = Parameter(rng.normal(size=(n, d)))
        T = Parameter(rng.normal(size=(n, d)))
        S = random_S(rng, n)
        err = finite_diff_check(lambda: loss_graph(V, T, S, LossConfig())[0], [V, T], 1e-5)
        assert err < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([2, 3, 5]))
    def test_nonnegative_finite(self, seed, n):
        rng = np.random.default_rng(seed)
        out = total_loss(random_batch(rng, n, 4), random_S(rng, n))
        for v in out.scalars().values():
            assert math.isfinite(v) and v >= -1e-12
