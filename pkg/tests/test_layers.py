"""Layer-level tests: embedding fusion, the recurrent cell, classifier head.

Gradient correctness of every layer is covered exhaustively by the
finite-difference suite (see test_gradcheck); these tests pin down forward
semantics, shape policing, and the documented tie-breaking rules.
"""

import numpy as np
import pytest

from albumseq.layers import (
    AUX_LABEL,
    ClassifierGrads,
    EmbeddingGrads,
    EmbedMode,
    FORGET_BIAS_INIT,
    INIT_SCALE,
    LstmGrads,
    LstmState,
    ValidationError,
    classify,
    classify_backward,
    init_classifier_params,
    init_embedding_params,
    init_lstm_params,
    joint_embed,
    joint_embed_backward,
    lstm_backward,
    lstm_step,
    scene_embed,
)
from albumseq.numcore import ShapeError, one_hot, softmax


def make_embedding(rng, mode, embed_dim=7, num_identities=5, feat_dim=4, scene_dim=3):
    return init_embedding_params(rng, embed_dim, num_identities, feat_dim, scene_dim, mode)


class TestInitialization:
    def test_embedding_shapes(self, rng):
        p = make_embedding(rng, EmbedMode.ADDITION)
        assert p.U_y.shape == (7, 6)      # identities + start label column
        assert p.U_b.shape == (7, 4)
        assert p.U_I.shape == (7, 3)
        for w in (p.U_y, p.U_b, p.U_I):
            assert np.max(np.abs(w)) <= INIT_SCALE

    def test_lstm_forget_bias(self, rng):
        p = init_lstm_params(rng, embed_dim=6, hidden_dim=4)
        h = 4
        np.testing.assert_array_equal(p.bias[h:2 * h], np.full(h, FORGET_BIAS_INIT))
        np.testing.assert_array_equal(p.bias[:h], np.zeros(h))
        np.testing.assert_array_equal(p.bias[2 * h:], np.zeros(2 * h))

    def test_classifier_zero_bias(self, rng):
        p = init_classifier_params(rng, num_identities=5, hidden_dim=4)
        np.testing.assert_array_equal(p.bias, np.zeros(5))

    def test_aux_label_is_reserved_index_zero(self):
        assert AUX_LABEL == 0


class TestJointEmbed:
    def test_addition_mode_formula(self, rng):
        p = make_embedding(rng, EmbedMode.ADDITION)
        y = one_hot(2, 6)
        feat = rng.normal(size=4)
        emb, cache = joint_embed(p, y, feat)
        expected = np.maximum(p.U_y[:, 2] + p.U_b @ feat, 0.0)
        np.testing.assert_allclose(emb, expected, rtol=1e-13)
        assert cache.hot_index == 2

    def test_max_mode_formula(self, rng):
        p = make_embedding(rng, EmbedMode.MAX)
        y = one_hot(0, 6)
        feat = rng.normal(size=4)
        emb, _ = joint_embed(p, y, feat)
        expected = np.maximum(np.maximum(p.U_y[:, 0], p.U_b @ feat), 0.0)
        np.testing.assert_allclose(emb, expected, rtol=1e-13)

    def test_rejects_non_one_hot(self, rng):
        p = make_embedding(rng, EmbedMode.ADDITION)
        feat = np.zeros(4)
        with pytest.raises(ValidationError):
            joint_embed(p, np.zeros(6), feat)
        two_hot = np.zeros(6)
        two_hot[[1, 3]] = 1.0
        with pytest.raises(ValidationError):
            joint_embed(p, two_hot, feat)
        with pytest.raises(ValidationError):
            joint_embed(p, 0.5 * one_hot(1, 6), feat)

    def test_rejects_wrong_dims(self, rng):
        p = make_embedding(rng, EmbedMode.ADDITION)
        with pytest.raises(ShapeError):
            joint_embed(p, one_hot(1, 7), np.zeros(4))
        with pytest.raises(ShapeError):
            joint_embed(p, one_hot(1, 6), np.zeros(5))

    def test_max_tie_routes_gradient_to_label_branch(self):
        # Construct exact ties: U_y column equals U_b @ feat coordinate-wise.
        p = make_embedding(np.random.default_rng(0), EmbedMode.MAX,
                           embed_dim=3, num_identities=2, feat_dim=3)
        feat = np.array([1.0, 0.0, 0.0])
        p.U_b[:, :] = 0.0
        p.U_b[:, 0] = np.array([0.5, -0.25, 0.75])
        p.U_y[:, 1] = p.U_b @ feat
        _, cache = joint_embed(p, one_hot(1, 3), feat)
        grads = EmbeddingGrads.zeros_like(p)
        joint_embed_backward(p, cache, np.ones(3), grads)
        # Positive pre-activations pass relu; ties all go to U_y, none to U_b.
        assert np.count_nonzero(grads.U_y[:, 1]) == 2   # the two positive coords
        np.testing.assert_array_equal(grads.U_b, np.zeros_like(p.U_b))

    def test_backward_accumulates_rather_than_overwrites(self, rng):
        p = make_embedding(rng, EmbedMode.ADDITION)
        feat = rng.normal(size=4)
        _, cache = joint_embed(p, one_hot(3, 6), feat)
        grads = EmbeddingGrads.zeros_like(p)
        joint_embed_backward(p, cache, np.ones(7), grads)
        once = grads.U_b.copy()
        joint_embed_backward(p, cache, np.ones(7), grads)
        np.testing.assert_allclose(grads.U_b, 2.0 * once, rtol=1e-13)


class TestSceneEmbed:
    def test_projection_formula(self, rng):
        p = make_embedding(rng, EmbedMode.ADDITION)
        s = rng.normal(size=3)
        emb, _ = scene_embed(p, s)
        np.testing.assert_allclose(emb, np.maximum(p.U_I @ s, 0.0), rtol=1e-13)

    def test_rejects_wrong_dim(self, rng):
        p = make_embedding(rng, EmbedMode.ADDITION)
        with pytest.raises(ShapeError):
            scene_embed(p, np.zeros(4))


class TestLstmStep:
    def test_gate_arithmetic_against_direct_computation(self, rng):
        from scipy.special import expit

        p = init_lstm_params(rng, embed_dim=5, hidden_dim=3)
        state = LstmState(rng.normal(size=3), rng.normal(size=3))
        x = rng.normal(size=5)
        new_state, z, cache = lstm_step(p, state, x)

        a = p.W_x @ x + p.W_h @ state.h + p.bias
        i, f = expit(a[0:3]), expit(a[3:6])
        o, g = expit(a[6:9]), np.tanh(a[9:12])
        c_ref = f * state.c + i * g
        h_ref = o * np.tanh(c_ref)
        np.testing.assert_allclose(new_state.c, c_ref, rtol=1e-12)
        np.testing.assert_allclose(new_state.h, h_ref, rtol=1e-12)
        np.testing.assert_array_equal(z, new_state.h)

    def test_zero_state_zero_input_with_forget_bias(self):
        # From rest, bias-only gates: c = sigmoid(0)*tanh(0) = 0, h = 0.
        p = init_lstm_params(np.random.default_rng(8), embed_dim=4, hidden_dim=3)
        state, z, _ = lstm_step(p, LstmState.zeros(3), np.zeros(4))
        np.testing.assert_allclose(state.c, np.zeros(3), atol=1e-15)
        np.testing.assert_allclose(z, np.zeros(3), atol=1e-15)

    def test_state_is_not_mutated(self, rng):
        p = init_lstm_params(rng, embed_dim=4, hidden_dim=3)
        h0, c0 = rng.normal(size=3), rng.normal(size=3)
        state = LstmState(h0.copy(), c0.copy())
        lstm_step(p, state, rng.normal(size=4))
        np.testing.assert_array_equal(state.h, h0)
        np.testing.assert_array_equal(state.c, c0)

    def test_input_dim_checked(self, rng):
        p = init_lstm_params(rng, embed_dim=4, hidden_dim=3)
        with pytest.raises(ShapeError):
            lstm_step(p, LstmState.zeros(3), np.zeros(5))


class TestLstmBackward:
    def test_length_mismatch_rejected(self, rng):
        p = init_lstm_params(rng, embed_dim=4, hidden_dim=3)
        _, _, cache = lstm_step(p, LstmState.zeros(3), rng.normal(size=4))
        with pytest.raises(ShapeError):
            lstm_backward(p, [cache], [np.zeros(3), np.zeros(3)])

    def test_single_step_matches_cellwise_finite_difference(self, rng):
        # A scalar probe loss r . h(x); numeric dx via central differences.
        from albumseq.numcore import finite_diff_grad, rel_error

        p = init_lstm_params(rng, embed_dim=4, hidden_dim=3)
        x0 = rng.normal(size=4)
        r = rng.normal(size=3)
        state0 = LstmState(rng.normal(size=3), rng.normal(size=3))

        _, _, cache = lstm_step(p, state0, x0)
        _, dx_list = lstm_backward(p, [cache], [r])

        def loss(x):
            _, z, _ = lstm_step(p, LstmState(state0.h.copy(), state0.c.copy()), x)
            return float(r @ z)

        assert rel_error(dx_list[0], finite_diff_grad(loss, x0)) < 1e-6


class TestClassifier:
    def test_softmax_head(self, rng):
        p = init_classifier_params(rng, num_identities=5, hidden_dim=4)
        z = rng.normal(size=4)
        probs = classify(p, z)
        np.testing.assert_allclose(probs, softmax(p.W @ z + p.bias), rtol=1e-13)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_backward_outer_product(self, rng):
        p = init_classifier_params(rng, num_identities=5, hidden_dim=4)
        z = rng.normal(size=4)
        dlogits = rng.normal(size=5)
        grads = ClassifierGrads.zeros_like(p)
        dz = classify_backward(p, z, dlogits, grads)
        np.testing.assert_allclose(grads.W, np.outer(dlogits, z), rtol=1e-13)
        np.testing.assert_allclose(grads.bias, dlogits, rtol=1e-13)
        np.testing.assert_allclose(dz, p.W.T @ dlogits, rtol=1e-13)

    def test_input_dim_checked(self, rng):
        p = init_classifier_params(rng, num_identities=5, hidden_dim=4)
        with pytest.raises(ShapeError):
            classify(p, np.zeros(5))


class TestGradsZeroLike:
    def test_all_zero_and_shape_matched(self, rng):
        ep = make_embedding(rng, EmbedMode.MAX)
        lp = init_lstm_params(rng, embed_dim=7, hidden_dim=4)
        for grads, params in ((EmbeddingGrads.zeros_like(ep), ep),
                              (LstmGrads.zeros_like(lp), lp)):
            for name in vars(grads):
                g = getattr(grads, name)
                assert g.shape == getattr(params, name).shape
                assert not g.any()
