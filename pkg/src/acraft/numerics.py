"""Dense float64 MLP core: forward passes, losses, and exact analytic
gradients.

Everything is pure: models are value-like, operations never mutate their
arguments, and identical inputs give bitwise identical outputs. Layouts are
batch-first row-major float64 throughout. No autograd; each gradient is
derived by hand and checked against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Probabilities are floored at this value inside every log.
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Input shape incompatible with the model."""


class LabelError(ValueError):
    """Label outside the model's class range."""


@dataclass(frozen=True)
class LossCombination:
    """Weights of the three-term attack loss.

    The scalar loss is the batch mean of

        w_ce_true     * CE(f(x), y)
      - w_ce_runnerup * CE(f(x), y2)
      + w_proto       * ||emb(x) - p_y||^2

    where y2 is the highest-probability non-true class, recomputed at every
    evaluation point, and p_y is the prototype of the true class. The
    prototype term needs a per-class prototype matrix; callers with
    w_proto == 0 may omit it.
    """

    w_ce_true: float = 1.0
    w_ce_runnerup: float = 0.0
    w_proto: float = 0.0


@dataclass(frozen=True)
class MlpModel:
    """Fully connected ReLU network with a linear head.

    widths[0] is the input dimension and widths[-1] the output dimension.
    The embedding of an input is the activation of the last hidden layer
    (the input itself when there are no hidden layers); classification heads
    apply softmax on top of the final linear layer.
    """

    widths: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def embedding_dim(self) -> int:
        return self.widths[-2]


@dataclass
class GradientReport:
    """Loss value plus whichever gradients the producing op computes."""

    loss: float
    input_grad: np.ndarray | None = None
    param_grads: list[tuple[np.ndarray, np.ndarray]] | None = None


def init_mlp(widths, seed: int, zero_head: bool = False) -> MlpModel:
    """He-initialized model, deterministic per seed.

    zero_head zeroes the final layer, which makes a softmax head exactly
    uniform at initialization (used by the policy network).
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"invalid widths {widths!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if zero_head:
        weights[-1] = np.zeros_like(weights[-1])
        biases[-1] = np.zeros_like(biases[-1])
    return MlpModel(widths, tuple(weights), tuple(biases))


def _as_batch(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"expected input of shape (batch, {model.input_dim}), got {x.shape}"
        )
    return x


def _check_labels(model: MlpModel, labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise LabelError(f"labels must be 1-d, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= model.output_dim):
        raise LabelError(
            f"labels must lie in [0, {model.output_dim}), got range "
            f"[{y.min()}, {y.max()}]"
        )
    return y.astype(np.int64)


def _forward_caches(model: MlpModel, x: np.ndarray):
    """Activations per layer; acts[i] is the input to layer i."""
    acts = [x]
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    return acts, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward_logits(model: MlpModel, x) -> np.ndarray:
    _, logits = _forward_caches(model, _as_batch(model, x))
    return logits


def forward(model: MlpModel, x) -> np.ndarray:
    """Class probabilities, one row per sample."""
    return softmax(forward_logits(model, x))


def embed(model: MlpModel, x) -> np.ndarray:
    """Activation of the last hidden layer (the input when no hidden layers)."""
    acts, _ = _forward_caches(model, _as_batch(model, x))
    return acts[-1]


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the true class, log floored at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or y.ndim != 1 or p.shape[0] != y.shape[0]:
        raise ShapeError(f"incompatible probs {p.shape} / labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise LabelError(f"labels outside [0, {p.shape[1]})")
    picked = p[np.arange(p.shape[0]), y]
    return float(np.mean(-np.log(np.maximum(picked, LOG_FLOOR))))


def backprop(model: MlpModel, x, dlogits: np.ndarray, dembedding=None):
    """Vector-Jacobian product against the logits (and optionally the
    embedding): gradient of sum(dlogits * logits) + sum(dembedding * emb)
    with respect to the input and every parameter.

    Returns (input_grad, param_grads) with param_grads as (dW, db) per layer.
    """
    x = _as_batch(model, x)
    acts, _ = _forward_caches(model, x)
    n_layers = len(model.weights)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * n_layers
    delta = np.asarray(dlogits, dtype=np.float64)
    for i in reversed(range(n_layers)):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        delta = delta @ model.weights[i].T
        if i == n_layers - 1 and dembedding is not None:
            delta = delta + dembedding
        if i > 0:
            delta = delta * (acts[i] > 0.0)  # ReLU mask; acts[i] = relu(z_i)
    return delta, grads


def _ce_seed(probs: np.ndarray, y: np.ndarray, weight: float) -> np.ndarray:
    """dlogits of weight * mean CE(probs, y); zero where the log floor binds."""
    batch = probs.shape[0]
    live = probs[np.arange(batch), y] > LOG_FLOOR
    seed = probs.copy()
    seed[np.arange(batch), y] -= 1.0
    return (weight / batch) * seed * live[:, None]


def _runner_up(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    masked = probs.copy()
    masked[np.arange(probs.shape[0]), y] = -np.inf
    return masked.argmax(axis=1)


def grad_input(
    model: MlpModel,
    x,
    labels,
    loss: LossCombination | None = None,
    prototypes: np.ndarray | None = None,
) -> GradientReport:
    """Combined loss value and its exact gradient with respect to the input.

    prototypes, when given, is a (classes, embedding_dim) matrix indexed by
    label; it is required whenever loss.w_proto is nonzero.
    """
    lc = loss if loss is not None else LossCombination()
    x = _as_batch(model, x)
    y = _check_labels(model, labels)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch mismatch: {x.shape[0]} inputs, {y.shape[0]} labels")
    acts, logits = _forward_caches(model, x)
    probs = softmax(logits)
    batch = x.shape[0]

    value = 0.0
    dlogits = np.zeros_like(logits)
    if lc.w_ce_true != 0.0:
        value += lc.w_ce_true * cross_entropy(probs, y)
        dlogits += _ce_seed(probs, y, lc.w_ce_true)
    if lc.w_ce_runnerup != 0.0:
        y2 = _runner_up(probs, y)
        value -= lc.w_ce_runnerup * cross_entropy(probs, y2)
        dlogits -= _ce_seed(probs, y2, lc.w_ce_runnerup)
    dembedding = None
    if lc.w_proto != 0.0:
        if prototypes is None:
            raise ValueError("prototype context missing while w_proto != 0")
        protos = np.asarray(prototypes, dtype=np.float64)
        diff = acts[-1] - protos[y]
        value += lc.w_proto * float(np.mean(np.sum(diff * diff, axis=1)))
        dembedding = (2.0 * lc.w_proto / batch) * diff

    input_grad, _ = backprop(model, x, dlogits, dembedding)
    return GradientReport(loss=value, input_grad=input_grad)


def grad_params(model: MlpModel, x, labels) -> GradientReport:
    """Plain cross-entropy loss and its gradient for every parameter."""
    x = _as_batch(model, x)
    y = _check_labels(model, labels)
    acts, logits = _forward_caches(model, x)
    probs = softmax(logits)
    value = cross_entropy(probs, y)
    _, grads = backprop(model, x, _ce_seed(probs, y, 1.0))
    return GradientReport(loss=value, param_grads=grads)


def sgd_step(model: MlpModel, grads, lr: float) -> MlpModel:
    """One plain gradient-descent step; returns a new model."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if len(grads) != len(model.weights):
        raise ShapeError("gradient count does not match layer count")
    weights = tuple(w - lr * gw for w, (gw, _) in zip(model.weights, grads))
    biases = tuple(b - lr * gb for b, (_, gb) in zip(model.biases, grads))
    return MlpModel(model.widths, weights, biases)
