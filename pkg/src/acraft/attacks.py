"""White-box evasion and poisoning primitives.

Every attack returns a fresh tensor with the same shape as its input,
clipped into the unit box, and never mutates the model or the input. The
reference single-step / projected / minimal-perturbation attacks take a bare
model; the momentum reversal attack and the combined loss take an
AttackContext so they can reach prototypes and account gradient cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .numerics import LossCombination, MlpModel

__all__ = [
    "AttackContext",
    "GradEvalCounter",
    "LossCombination",
    "PerturbationBudget",
    "acraft_attack",
    "baseline_poisoner",
    "combined_loss",
    "cw",
    "deepfool",
    "fgsm",
    "pgd",
]


@dataclass(frozen=True)
class PerturbationBudget:
    """l_inf radius, per-iteration step size, and iteration count."""

    epsilon: float
    alpha_step: float
    iterations: int


class GradEvalCounter:
    """Mutable tally of gradient evaluations during one poisoning run."""

    def __init__(self):
        self.count = 0

    def add(self, n: int = 1):
        self.count += n


@dataclass
class AttackContext:
    """White-box view handed to poisoners.

    model classifies in head-index space; prototypes (when present) is the
    per-head-index prototype matrix for the w_proto loss term. rng feeds
    random starts; counter, when present, accumulates gradient-call cost.
    """

    model: MlpModel
    prototypes: np.ndarray | None = None
    rng: np.random.Generator | None = None
    counter: GradEvalCounter | None = None


def combined_loss(x, labels, context: AttackContext, loss: LossCombination):
    """Value and input gradient of the weighted three-term loss.

    Counts one gradient evaluation on the context's counter per call.
    """
    if loss.w_proto != 0.0 and context.prototypes is None:
        raise ValueError("prototype context missing while w_proto != 0")
    rep = numerics.grad_input(context.model, x, labels, loss, context.prototypes)
    if context.counter is not None:
        context.counter.add(1)
    return rep.loss, rep.input_grad


def _clip_ball_box(adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project into the l_inf ball around x, then into the unit box."""
    return np.clip(np.clip(adv, x - epsilon, x + epsilon), 0.0, 1.0)


def _random_start(x, epsilon, rng):
    if rng is None:
        rng = np.random.default_rng(0)
    return _clip_ball_box(x + rng.uniform(-epsilon, epsilon, x.shape), x, epsilon)


def fgsm(x, labels, model: MlpModel, epsilon: float) -> np.ndarray:
    """Single signed cross-entropy ascent step of size epsilon."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    rep = numerics.grad_input(model, x, labels)
    return np.clip(x + epsilon * np.sign(rep.input_grad), 0.0, 1.0)


def pgd(
    x,
    labels,
    model: MlpModel,
    budget: PerturbationBudget,
    random_start: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Projected signed-gradient ascent on cross-entropy; the l_inf-ball and
    unit-box projections run after every step."""
    x = np.asarray(x, dtype=np.float64)
    adv = _random_start(x, budget.epsilon, rng) if random_start else x.copy()
    for _ in range(budget.iterations):
        rep = numerics.grad_input(model, adv, labels)
        adv = adv + budget.alpha_step * np.sign(rep.input_grad)
        adv = _clip_ball_box(adv, x, budget.epsilon)
    return adv


def acraft_attack(
    x,
    labels,
    context: AttackContext,
    budget: PerturbationBudget,
    mu: float,
    lambda_rev: float,
    loss: LossCombination,
    step_direction: int = -1,
    random_start: bool = False,
    per_step_projection: bool = False,
) -> np.ndarray:
    """Momentum-accumulated signed steps on the reversed combined loss.

    Starting from zero momentum, each iteration evaluates
    g_t = lambda_rev * grad L_comb at the current iterate, mixes
    direction = mu * m_t + (1 - mu) * g_t, stores it as the new momentum, and
    moves by step_direction * alpha * sign(direction). Projection into
    [x - eps, x + eps] and then [0, 1] runs once after the final step unless
    per_step_projection is set.
    """
    x = np.asarray(x, dtype=np.float64)
    adv = _random_start(x, budget.epsilon, context.rng) if random_start else x.copy()
    momentum = np.zeros_like(x)
    for _ in range(budget.iterations):
        _, grad = combined_loss(adv, labels, context, loss)
        direction = mu * momentum + (1.0 - mu) * (lambda_rev * grad)
        momentum = direction
        adv = adv + step_direction * budget.alpha_step * np.sign(direction)
        if per_step_projection:
            adv = _clip_ball_box(adv, x, budget.epsilon)
    return _clip_ball_box(adv, x, budget.epsilon)


def cw(
    x,
    labels,
    model: MlpModel,
    c: float = 1.0,
    steps: int = 100,
    lr: float = 0.05,
    confidence: float = 0.0,
) -> np.ndarray:
    """Untargeted tanh-space attack: minimize ||z - x||^2 + c * margin(z)
    with margin = max(logit_true - best_other + confidence, 0).

    Returns, per sample, the best misclassified iterate by distance, or the
    final iterate when none misclassifies. Outputs lie strictly inside (0, 1).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels)
    nudged = np.clip(x, 1e-6, 1.0 - 1e-6)
    w = np.arctanh(2.0 * nudged - 1.0)
    batch = x.shape[0]
    rows = np.arange(batch)
    best = None
    best_dist = np.full(batch, np.inf)
    z = None
    for _ in range(steps):
        z = 0.5 * (np.tanh(w) + 1.0)
        logits = numerics.forward_logits(model, z)
        other = logits.copy()
        other[rows, y] = -np.inf
        runner = other.argmax(axis=1)
        margin = logits[rows, y] - other[rows, runner] + confidence
        if not np.all(np.isfinite(margin)):
            raise FloatingPointError("non-finite attack objective")
        # track best adversarial iterate (margin < confidence boundary: flipped)
        flipped = logits.argmax(axis=1) != y
        dist = np.sum((z - x) ** 2, axis=1)
        if best is None:
            best = z.copy()
        better = flipped & (dist < best_dist)
        best[better] = z[better]
        best_dist[better] = dist[better]
        # gradient: distance term + margin term through the two live logits
        dlogits = np.zeros_like(logits)
        active = margin > 0
        dlogits[rows[active], y[active]] = c
        dlogits[rows[active], runner[active]] = -c
        grad_z, _ = numerics.backprop(model, z, dlogits)
        grad_z = grad_z + 2.0 * (z - x)
        w = w - lr * grad_z * 0.5 * (1.0 - np.tanh(w) ** 2)
    final = 0.5 * (np.tanh(w) + 1.0)
    never = ~np.isfinite(best_dist)
    out = best
    out[never] = final[never]
    return out


def deepfool(
    x,
    labels,
    model: MlpModel,
    max_iter: int = 50,
    overshoot: float = 0.02,
) -> np.ndarray:
    """Iterative nearest-hyperplane steps toward the closest competing class.

    Each iteration picks l = argmin |f_y - f_j| / ||grad f_y - grad f_j|| and
    moves by the minimal perturbation onto that hyperplane; the loop stops at
    misclassification (relative to the true label) or max_iter. The total
    perturbation is scaled by (1 + overshoot) and clipped into the unit box.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels)
    out = np.empty_like(x)
    jitter_rng = np.random.default_rng(0)
    classes = model.output_dim
    eye = np.eye(classes)
    for i in range(x.shape[0]):
        x0 = x[i : i + 1]
        k = int(y[i])
        total = np.zeros_like(x0)
        for _ in range(max_iter):
            cur = x0 + total
            logits = numerics.forward_logits(model, cur)[0]
            if int(np.argmax(logits)) != k:
                break
            grads = np.stack(
                [
                    numerics.backprop(model, cur, eye[j : j + 1])[0][0]
                    for j in range(classes)
                ]
            )
            w = grads - grads[k]
            f = logits - logits[k]
            norms = np.linalg.norm(w, axis=1)
            norms[k] = np.inf
            degenerate = norms < 1e-12
            if np.all(degenerate | (np.arange(classes) == k)):
                # flat competing gradients: jitter and spend the iteration
                total = total + jitter_rng.normal(0.0, 1e-6, total.shape)
                continue
            ratios = np.where(degenerate, np.inf, np.abs(f) / norms)
            ratios[k] = np.inf
            target = int(np.argmin(ratios))
            step = (np.abs(f[target]) / (norms[target] ** 2)) * w[target]
            if np.linalg.norm(step) < 1e-15:
                break  # already on the boundary
            total = total + step
        out[i] = np.clip(x0 + (1.0 + overshoot) * total, 0.0, 1.0)[0]
    return out


def baseline_poisoner(name: str, **params):
    """Reference attacks as (x, labels, context) poisoning closures."""
    if name == "fgsm":
        epsilon = params.get("epsilon", 0.1)
        return lambda x, labels, ctx: fgsm(x, labels, ctx.model, epsilon)
    if name == "pgd":
        budget = PerturbationBudget(
            params.get("epsilon", 0.1),
            params.get("alpha_step", 0.025),
            params.get("iterations", 10),
        )
        return lambda x, labels, ctx: pgd(x, labels, ctx.model, budget)
    if name == "cw":
        kw = {k: params[k] for k in ("c", "steps", "lr", "confidence") if k in params}
        return lambda x, labels, ctx: cw(x, labels, ctx.model, **kw)
    if name == "deepfool":
        kw = {k: params[k] for k in ("max_iter", "overshoot") if k in params}
        return lambda x, labels, ctx: deepfool(x, labels, ctx.model, **kw)
    raise ValueError(f"unknown baseline attack {name!r}")
