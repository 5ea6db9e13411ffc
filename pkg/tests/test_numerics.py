"""Gradient core: frozen arithmetic values and finite-difference checks."""

import math

import numpy as np
import pytest

from acraft import numerics
from acraft.numerics import (
    LabelError,
    LossCombination,
    MlpModel,
    ShapeError,
    cross_entropy,
    embed,
    forward,
    forward_logits,
    grad_input,
    grad_params,
    init_mlp,
    sgd_step,
)

FD_STEP = 1e-5


def random_model(rng, widths=None, scale=1.0):
    widths = widths or (4, 6, 5, 3)
    weights = tuple(
        rng.normal(0.0, scale, (a, b)) for a, b in zip(widths[:-1], widths[1:])
    )
    biases = tuple(rng.normal(0.0, scale, (b,)) for b in widths[1:])
    return MlpModel(tuple(widths), weights, biases)


def loss_value(model, x, labels, lc, prototypes=None):
    """Independent loss evaluation used as the finite-difference oracle:
    composed from forward/embed/cross_entropy only, no gradient code."""
    probs = forward(model, x)
    value = 0.0
    if lc.w_ce_true:
        value += lc.w_ce_true * cross_entropy(probs, labels)
    if lc.w_ce_runnerup:
        masked = probs.copy()
        masked[np.arange(len(labels)), labels] = -np.inf
        value -= lc.w_ce_runnerup * cross_entropy(probs, masked.argmax(axis=1))
    if lc.w_proto:
        diff = embed(model, x) - prototypes[np.asarray(labels)]
        value += lc.w_proto * float(np.mean(np.sum(diff * diff, axis=1)))
    return value


def fd_input_grad(model, x, labels, lc, prototypes=None, h=FD_STEP):
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        lo, hi = x.copy(), x.copy()
        lo[idx] -= h
        hi[idx] += h
        grad[idx] = (
            loss_value(model, hi, labels, lc, prototypes)
            - loss_value(model, lo, labels, lc, prototypes)
        ) / (2 * h)
    return grad


def max_rel_err(analytic, fd):
    scale = max(np.max(np.abs(fd)), 1e-9)
    return float(np.max(np.abs(analytic - fd)) / scale)


class TestForward:
    def test_softmax_two_zero(self):
        # exp(2)/(exp(2)+1) computed independently
        model = MlpModel((2, 2), (np.eye(2),), (np.zeros(2),))
        probs = forward(model, np.array([[2.0, 0.0]]))
        expect = math.exp(2.0) / (math.exp(2.0) + 1.0)
        assert probs[0, 0] == pytest.approx(expect, abs=1e-12)
        assert probs[0, 0] == pytest.approx(0.8808, abs=1e-4)
        assert probs[0, 1] == pytest.approx(0.1192, abs=1e-4)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        model = random_model(rng)
        probs = forward(model, rng.uniform(-2, 2, (32, 4)))
        assert np.all(probs >= 0)
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-9

    def test_shape_mismatch(self):
        model = random_model(np.random.default_rng(1))
        with pytest.raises(ShapeError):
            forward(model, np.zeros((3, 7)))

    def test_embedding_is_last_hidden(self):
        rng = np.random.default_rng(2)
        model = random_model(rng)
        x = rng.uniform(0, 1, (5, 4))
        e = embed(model, x)
        assert e.shape == (5, model.embedding_dim)
        # recompose the head on top of the embedding
        logits = e @ model.weights[-1] + model.biases[-1]
        assert np.allclose(logits, forward_logits(model, x), atol=1e-12)

    def test_no_hidden_layer_embedding_is_input(self):
        rng = np.random.default_rng(3)
        model = random_model(rng, widths=(3, 2))
        x = rng.uniform(0, 1, (4, 3))
        assert np.array_equal(embed(model, x), x)


class TestCrossEntropy:
    def test_quarter_prob(self):
        probs = np.array([[0.25, 0.75]])
        assert cross_entropy(probs, [0]) == pytest.approx(-math.log(0.25), abs=1e-12)
        assert cross_entropy(probs, [0]) == pytest.approx(1.3863, abs=1e-4)

    def test_log_floor(self):
        probs = np.array([[0.0, 1.0]])
        assert cross_entropy(probs, [0]) == pytest.approx(-math.log(1e-12), rel=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            cross_entropy(np.array([[0.5, 0.5]]), [2])


class TestGradInput:
    def test_logistic_hand_value(self):
        # 1-d logistic model: weight 2, bias 0, x = 0.5, true class 0.
        # dL/dx = (sigma(1) - 1) * 2
        model = MlpModel((1, 2), (np.array([[2.0, 0.0]]),), (np.zeros(2),))
        rep = grad_input(model, np.array([[0.5]]), [0])
        sigma = 1.0 / (1.0 + math.exp(-1.0))
        assert rep.input_grad[0, 0] == pytest.approx((sigma - 1.0) * 2.0, abs=1e-12)
        assert rep.input_grad[0, 0] == pytest.approx(-0.5379, abs=1e-4)

    def test_fd_pure_ce(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            model = random_model(rng)
            x = rng.uniform(-1, 1, (3, 4))
            y = rng.integers(0, 3, 3)
            rep = grad_input(model, x, y)
            fd = fd_input_grad(model, x, y, LossCombination())
            assert max_rel_err(rep.input_grad, fd) <= 1e-6

    def test_fd_combined_terms(self):
        rng = np.random.default_rng(11)
        lc = LossCombination(w_ce_true=0.7, w_ce_runnerup=0.4, w_proto=0.9)
        checked = 0
        while checked < 10:
            model = random_model(rng)
            x = rng.uniform(-1, 1, (3, 4))
            y = rng.integers(0, 3, 3)
            protos = rng.normal(0, 1, (3, model.embedding_dim))
            probs = forward(model, x)
            masked = probs.copy()
            masked[np.arange(3), y] = -np.inf
            top2 = np.sort(masked, axis=1)[:, -2:]
            if np.min(top2[:, 1] - top2[:, 0]) < 1e-3:
                continue  # runner-up argmax must be stable under the fd step
            rep = grad_input(model, x, y, lc, protos)
            fd = fd_input_grad(model, x, y, lc, protos)
            assert max_rel_err(rep.input_grad, fd) <= 1e-6
            assert rep.loss == pytest.approx(loss_value(model, x, y, lc, protos), abs=1e-12)
            checked += 1

    def test_proto_term_at_prototype_is_zero(self):
        rng = np.random.default_rng(12)
        model = random_model(rng)
        x = rng.uniform(0, 1, (2, 4))
        y = np.array([0, 1])
        protos = np.zeros((3, model.embedding_dim))
        protos[y] = embed(model, x)
        lc = LossCombination(w_ce_true=0.0, w_ce_runnerup=0.0, w_proto=1.0)
        rep = grad_input(model, x, y, lc, protos)
        assert rep.loss == pytest.approx(0.0, abs=1e-12)
        assert np.max(np.abs(rep.input_grad)) <= 1e-12

    def test_two_term_value_matches_recomputation(self):
        rng = np.random.default_rng(13)
        model = random_model(rng)
        x = rng.uniform(-1, 1, (4, 4))
        y = rng.integers(0, 3, 4)
        lc = LossCombination(w_ce_true=1.0, w_ce_runnerup=1.0, w_proto=0.0)
        rep = grad_input(model, x, y, lc)
        assert rep.loss == pytest.approx(loss_value(model, x, y, lc), abs=1e-12)

    def test_missing_prototypes_raises(self):
        model = random_model(np.random.default_rng(14))
        lc = LossCombination(w_proto=1.0)
        with pytest.raises(ValueError, match="prototype"):
            grad_input(model, np.zeros((1, 4)), [0], lc)

    def test_purity(self):
        rng = np.random.default_rng(15)
        model = random_model(rng)
        x = rng.uniform(-1, 1, (3, 4))
        x_copy = x.copy()
        before = [w.copy() for w in model.weights]
        grad_input(model, x, [0, 1, 2])
        assert np.array_equal(x, x_copy)
        assert all(np.array_equal(a, b) for a, b in zip(before, model.weights))


class TestGradParams:
    def test_fd_params(self):
        rng = np.random.default_rng(20)
        model = random_model(rng, widths=(3, 5, 3))
        x = rng.uniform(-1, 1, (4, 3))
        y = rng.integers(0, 3, 4)
        rep = grad_params(model, x, y)
        h = FD_STEP
        for li in range(len(model.weights)):
            fd_w = np.zeros_like(model.weights[li])
            for idx in np.ndindex(*fd_w.shape):
                for sign, store in ((1, "hi"), (-1, "lo")):
                    ws = [w.copy() for w in model.weights]
                    ws[li][idx] += sign * h
                    m = MlpModel(model.widths, tuple(ws), model.biases)
                    val = cross_entropy(forward(m, x), y)
                    if store == "hi":
                        hi = val
                    else:
                        lo = val
                fd_w[idx] = (hi - lo) / (2 * h)
            assert max_rel_err(rep.param_grads[li][0], fd_w) <= 1e-6

    def test_converged_toy_gradient_vanishes(self):
        # separable 1-d toy: gradient norm decays toward zero with training
        x = np.array([[0.0], [1.0]])
        y = np.array([0, 1])
        model = init_mlp((1, 4, 2), seed=0)
        for _ in range(4000):
            rep = grad_params(model, x, y)
            model = sgd_step(model, rep.param_grads, 0.5)
        rep = grad_params(model, x, y)
        norm = max(np.max(np.abs(g)) for g, _ in rep.param_grads)
        assert norm <= 1e-3


class TestSgd:
    def test_hand_value(self):
        model = MlpModel((1, 1), (np.array([[1.0]]),), (np.array([0.0]),))
        grads = [(np.array([[0.5]]), np.array([0.0]))]
        stepped = sgd_step(model, grads, 0.1)
        assert stepped.weights[0][0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_zero_lr_is_identity(self):
        rng = np.random.default_rng(30)
        model = random_model(rng)
        x = rng.uniform(0, 1, (2, 4))
        rep = grad_params(model, x, [0, 1])
        stepped = sgd_step(model, rep.param_grads, 0.0)
        assert all(np.array_equal(a, b) for a, b in zip(stepped.weights, model.weights))

    def test_two_steps_differ_from_one_summed(self):
        # nonlinear model: recomputing gradients between steps matters
        rng = np.random.default_rng(31)
        model = random_model(rng)
        x = rng.uniform(-1, 1, (4, 4))
        y = rng.integers(0, 3, 4)
        rep1 = grad_params(model, x, y)
        twice = sgd_step(sgd_step(model, rep1.param_grads, 0.5), grad_params(
            sgd_step(model, rep1.param_grads, 0.5), x, y).param_grads, 0.5)
        summed = sgd_step(model, [(2 * gw, 2 * gb) for gw, gb in rep1.param_grads], 0.5)
        deltas = [np.max(np.abs(a - b)) for a, b in zip(twice.weights, summed.weights)]
        assert max(deltas) > 1e-9

    def test_purity(self):
        rng = np.random.default_rng(32)
        model = random_model(rng)
        before = [w.copy() for w in model.weights]
        rep = grad_params(model, rng.uniform(0, 1, (2, 4)), [0, 1])
        sgd_step(model, rep.param_grads, 0.1)
        assert all(np.array_equal(a, b) for a, b in zip(before, model.weights))


class TestInit:
    def test_deterministic(self):
        a = init_mlp((4, 8, 3), seed=7)
        b = init_mlp((4, 8, 3), seed=7)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_zero_head_uniform_softmax(self):
        model = init_mlp((4, 8, 5), seed=1, zero_head=True)
        probs = forward(model, np.random.default_rng(0).uniform(0, 1, (3, 4)))
        assert np.max(np.abs(probs - 0.2)) <= 1e-9
