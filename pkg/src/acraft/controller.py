"""PPO-based evolution controller.

The controller observes population fitness statistics plus a short action
history, samples one of 28 canonical evolution actions (transformation x
parent selector x instruction template, with genesis collapsed to a single
selector), and learns from per-generation rewards with the clipped
surrogate objective. Policy and value networks reuse the numerics module;
all gradients are the same hand-derived backprop used by the attacks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from dataclasses import asdict

import numpy as np

from . import numerics
from .dsl import INSTRUCTION_KINDS
from .seeding import derive_seed

log = logging.getLogger(__name__)

TRANSFORMATIONS = ("genesis", "refine", "synth")
SELECTORS = ("best", "proportional", "random")

FEATURE_DIM = 4 + 3 * len(TRANSFORMATIONS)

# Fitness is measured in percentage points (tens); the nets see it scaled
# down so every input stays near unit magnitude.
FITNESS_SCALE = 0.01

GRAD_NORM_CAP = 5.0


@dataclass(frozen=True)
class EvolutionAction:
    """One controller decision: what to generate, from which parents, with
    which steering template."""

    transformation: str
    selector: str
    template: int

    @property
    def instruction_kind(self) -> str:
        return INSTRUCTION_KINDS[self.template]


def _build_actions() -> tuple[EvolutionAction, ...]:
    actions = []
    for transformation in TRANSFORMATIONS:
        selectors = ("random",) if transformation == "genesis" else SELECTORS
        for selector in selectors:
            for template in range(len(INSTRUCTION_KINDS)):
                actions.append(EvolutionAction(transformation, selector, template))
    return tuple(actions)


ACTIONS = _build_actions()
ACTION_INDEX = {action: i for i, action in enumerate(ACTIONS)}


@dataclass(frozen=True)
class PolicyState:
    """Featurized population snapshot the policy conditions on."""

    mu_phi: float
    sigma2_phi: float
    best_phi: float
    progress: float
    history: tuple[str, ...]  # most recent transformation first, up to 3

    @property
    def features(self) -> np.ndarray:
        vec = np.zeros(FEATURE_DIM)
        vec[0] = self.mu_phi
        vec[1] = self.sigma2_phi
        vec[2] = self.best_phi
        vec[3] = self.progress
        for slot, name in enumerate(self.history[:3]):
            vec[4 + 3 * slot + TRANSFORMATIONS.index(name)] = 1.0
        return vec


@dataclass(frozen=True)
class PolicyTransition:
    """One (state, action, reward) triple with acting-time log-prob/value."""

    features: tuple[float, ...]
    action: int
    reward: float
    log_prob: float
    value: float

    def to_json_dict(self) -> dict:
        return {
            "features": list(self.features),
            "action": self.action,
            "reward": self.reward,
            "log_prob": self.log_prob,
            "value": self.value,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PolicyTransition":
        return cls(
            tuple(doc["features"]), doc["action"], doc["reward"],
            doc["log_prob"], doc["value"],
        )


@dataclass(frozen=True)
class ControllerConfig:
    eps_clip: float = 0.2
    gamma: float = 0.9
    lr: float = 0.1
    epochs: int = 4
    entropy_coef: float = 0.01
    hidden: int = 32

    def __post_init__(self):
        if not 0.0 < self.eps_clip:
            raise ValueError(f"eps_clip must be positive, got {self.eps_clip!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma!r}")


def featurize(fitness, history, generation: int, t_max: int) -> PolicyState:
    """Exact population moments plus progress and the last 3 transformations."""
    values = np.asarray(list(fitness), dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot featurize an empty population")
    recent = tuple(reversed(list(history)[-3:]))
    return PolicyState(
        mu_phi=float(values.mean()),
        sigma2_phi=float(values.var()),
        best_phi=float(values.max()),
        progress=generation / max(1, t_max),
        history=recent,
    )


def policy_ratio(new_log_prob: float, old_log_prob: float) -> float:
    return float(np.exp(new_log_prob - old_log_prob))


def clipped_objective(ratio: float, advantage_value: float, eps_clip: float) -> float:
    clipped = min(max(ratio, 1.0 - eps_clip), 1.0 + eps_clip)
    return min(ratio * advantage_value, clipped * advantage_value)


def advantage(rewards, values, gamma: float, normalize: bool = True) -> np.ndarray:
    """One-step TD advantages; the next state's value comes from the next
    transition in the buffer and the terminal state is worth 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ValueError("rewards and values must be aligned 1-d sequences")
    next_values = np.append(values[1:], 0.0)
    adv = rewards + gamma * next_values - values
    if normalize and adv.size >= 2:
        std = adv.std()
        if std < 1e-12:
            return np.zeros_like(adv)
        return (adv - adv.mean()) / std
    return adv


def entropy_terms(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row entropy of softmax probabilities and its logit gradient
    dH/dz_k = -p_k (log p_k + H)."""
    logp = np.log(np.maximum(probs, 1e-300))
    entropy = -np.sum(probs * logp, axis=1)
    grad = -probs * (logp + entropy[:, None])
    return entropy, grad


def _global_norm_clip(grads, cap: float):
    total = np.sqrt(sum(float(np.sum(g * g)) + float(np.sum(b * b)) for g, b in grads))
    if total <= cap or total == 0.0:
        return grads
    scale = cap / total
    return [(g * scale, b * scale) for g, b in grads]


def _finite(grads) -> bool:
    return all(np.all(np.isfinite(g)) and np.all(np.isfinite(b)) for g, b in grads)


class PpoController:
    """Policy/value pair over the canonical action table.

    The policy head starts at zero so the initial action distribution is
    exactly uniform; the buffer holds one trajectory between updates.
    """

    def __init__(
        self,
        config: ControllerConfig | None = None,
        seed: int = 0,
        n_actions: int = len(ACTIONS),
        feature_dim: int = FEATURE_DIM,
    ):
        self.config = config or ControllerConfig()
        self.n_actions = n_actions
        self.feature_dim = feature_dim
        self.policy = numerics.init_mlp(
            (feature_dim, self.config.hidden, n_actions),
            derive_seed(seed, "policy"),
            zero_head=True,
        )
        self.value = numerics.init_mlp(
            (feature_dim, self.config.hidden, 1), derive_seed(seed, "value")
        )
        self.buffer: list[PolicyTransition] = []

    def _inputs(self, features: np.ndarray) -> np.ndarray:
        x = np.array(features, dtype=np.float64, ndmin=2, copy=True)
        x[:, :3] *= FITNESS_SCALE
        return x

    def action_probs(self, features) -> np.ndarray:
        logits = numerics.forward_logits(self.policy, self._inputs(features))
        return numerics.softmax(logits)[0]

    def value_estimate(self, features) -> float:
        return float(numerics.forward_logits(self.value, self._inputs(features))[0, 0])

    def sample_action(self, state: PolicyState, rng: np.random.Generator):
        """Draw an action; returns (action, index, log_prob, value)."""
        probs = self.action_probs(state.features)
        index = int(rng.choice(self.n_actions, p=probs))
        log_prob = float(np.log(max(probs[index], 1e-300)))
        # custom-sized controllers (tests, fixtures) have no canonical table
        action = ACTIONS[index] if self.n_actions == len(ACTIONS) else None
        return action, index, log_prob, self.value_estimate(state.features)

    def record(self, transition: PolicyTransition) -> None:
        self.buffer.append(transition)

    def update(self) -> bool:
        """One PPO update over the buffered trajectory; returns False when
        skipped because of non-finite gradients. Clears the buffer."""
        if not self.buffer:
            raise ValueError("empty transition buffer")
        batch = self.buffer
        self.buffer = []
        x = self._inputs(np.array([t.features for t in batch]))
        actions = np.array([t.action for t in batch])
        old_log_probs = np.array([t.log_prob for t in batch])
        rewards = np.array([t.reward for t in batch])
        values = np.array([t.value for t in batch])
        adv = advantage(rewards, values, self.config.gamma)
        targets = rewards + self.config.gamma * np.append(values[1:], 0.0)
        if not (np.all(np.isfinite(adv)) and np.all(np.isfinite(targets))):
            log.warning("skipping PPO update: non-finite trajectory rewards")
            return False
        n = len(batch)
        rows = np.arange(n)
        onehot = np.eye(self.n_actions)[actions]
        cfg = self.config
        for _ in range(cfg.epochs):
            probs = numerics.softmax(numerics.forward_logits(self.policy, x))
            chosen = np.maximum(probs[rows, actions], 1e-300)
            ratio = np.exp(np.log(chosen) - old_log_probs)
            unclipped = ratio * adv
            clipped = np.clip(ratio, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip) * adv
            # gradient flows only through the branch min() selects; ties and
            # non-binding clips both reduce to the unclipped branch
            live = unclipped <= clipped
            coeff = np.where(live, ratio * adv, 0.0)
            d_objective = coeff[:, None] * (onehot - probs)
            _, d_entropy = entropy_terms(probs)
            dz = -(d_objective + cfg.entropy_coef * d_entropy) / n
            _, policy_grads = numerics.backprop(self.policy, x, dz)
            predicted = numerics.forward_logits(self.value, x)[:, 0]
            dv = (2.0 * (predicted - targets) / n)[:, None]
            _, value_grads = numerics.backprop(self.value, x, dv)
            if not (_finite(policy_grads) and _finite(value_grads)):
                log.warning("skipping PPO update: non-finite gradients")
                return False
            self.policy = numerics.sgd_step(
                self.policy, _global_norm_clip(policy_grads, GRAD_NORM_CAP), cfg.lr
            )
            self.value = numerics.sgd_step(
                self.value, _global_norm_clip(value_grads, GRAD_NORM_CAP), cfg.lr
            )
        return True

    def to_json_dict(self) -> dict:
        def dump(model):
            return {
                "widths": list(model.widths),
                "weights": [w.tolist() for w in model.weights],
                "biases": [b.tolist() for b in model.biases],
            }

        return {
            "config": asdict(self.config),
            "n_actions": self.n_actions,
            "feature_dim": self.feature_dim,
            "policy": dump(self.policy),
            "value": dump(self.value),
            "buffer": [t.to_json_dict() for t in self.buffer],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PpoController":
        controller = cls(
            ControllerConfig(**doc["config"]),
            n_actions=doc["n_actions"],
            feature_dim=doc["feature_dim"],
        )

        def load(blob):
            return numerics.MlpModel(
                tuple(blob["widths"]),
                tuple(np.array(w, dtype=np.float64) for w in blob["weights"]),
                tuple(np.array(b, dtype=np.float64) for b in blob["biases"]),
            )

        controller.policy = load(doc["policy"])
        controller.value = load(doc["value"])
        controller.buffer = [
            PolicyTransition.from_json_dict(t) for t in doc["buffer"]
        ]
        return controller
