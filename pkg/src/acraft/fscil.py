"""Few-shot class-incremental learner: frozen embedding + class prototypes.

A base model is trained once with SGD on the base classes; afterwards the
embedding is frozen and incremental sessions only add nearest-mean
prototypes. Evaluation at session i covers the cumulative test pool of every
class seen so far. Accuracies are percentages.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass, replace

import numpy as np

from . import numerics
from .attacks import AttackContext, GradEvalCounter
from .dataio import Dataset, SessionSplit
from .numerics import MlpModel
from .seeding import derive_seed, substream


class AdaptError(ValueError):
    """Session data violates the incremental protocol."""


class PoisonerError(ValueError):
    """A poisoning closure broke its output contract."""


@dataclass(frozen=True)
class FscilConfig:
    """Base-training hyperparameters."""

    epochs: int = 40
    lr: float = 0.3
    hidden: tuple[int, ...] = (32, 16)
    batch_size: int = 32


@dataclass(frozen=True)
class FscilState:
    """Frozen embedding model plus per-class prototypes."""

    model: MlpModel
    prototypes: dict[int, np.ndarray]
    seen_classes: tuple[int, ...]
    session_index: int


@dataclass(frozen=True)
class SessionReport:
    """Session-wise accuracy, decomposed into base and incremental classes.

    new_accs[0] is None: session 0 has no incremental classes yet.
    """

    accs: tuple[float, ...]
    base_accs: tuple[float, ...]
    new_accs: tuple[float | None, ...]

    @property
    def avg(self) -> float:
        return avg_accuracy(self.accs)

    def to_json_dict(self) -> dict:
        return {
            "accs": list(self.accs),
            "base_accs": list(self.base_accs),
            "new_accs": list(self.new_accs),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SessionReport":
        return cls(
            tuple(doc["accs"]),
            tuple(doc["base_accs"]),
            tuple(None if v is None else float(v) for v in doc["new_accs"]),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["session", "acc", "base_acc", "new_acc"])
        for i, (acc, base, new) in enumerate(
            zip(self.accs, self.base_accs, self.new_accs)
        ):
            writer.writerow([i, repr(acc), repr(base), "" if new is None else repr(new)])
        return buf.getvalue()


def avg_accuracy(accs) -> float:
    """Mean session accuracy (the Avg column of the comparison tables)."""
    accs = list(accs)
    if not accs:
        raise ValueError("no session accuracies")
    return float(np.mean(accs))


def attack_drop(clean: SessionReport, attacked: SessionReport) -> float:
    """Avg(clean) - Avg(attacked), in percentage points."""
    return clean.avg - attacked.avg


def train_base(
    split: SessionSplit,
    dataset: Dataset,
    cfg: FscilConfig = FscilConfig(),
    seed: int = 0,
) -> FscilState:
    """SGD-train the base classifier, then freeze it and build prototypes."""
    classes = tuple(sorted(split.base_classes))
    head_index = {c: i for i, c in enumerate(classes)}
    x = dataset.features[split.base_train_indices]
    y = np.array([head_index[int(c)] for c in dataset.labels[split.base_train_indices]])
    model = numerics.init_mlp(
        (dataset.dim, *cfg.hidden, len(classes)), derive_seed(seed, "init")
    )
    rng = substream(seed, "train")
    n = len(x)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            rep = numerics.grad_params(model, x[batch], y[batch])
            model = numerics.sgd_step(model, rep.param_grads, cfg.lr)
    embeddings = numerics.embed(model, x)
    prototypes = {
        c: embeddings[y == head_index[c]].mean(axis=0) for c in classes
    }
    return FscilState(model, prototypes, classes, 0)


def adapt_session(state: FscilState, x, labels, shots: int | None = None) -> FscilState:
    """Add nearest-mean prototypes for a batch of unseen classes.

    Every class must contribute the same number of samples (exactly `shots`
    when given). The embedding model is untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels)
    classes = sorted(int(c) for c in np.unique(y))
    if not classes:
        raise AdaptError("empty session")
    already = set(state.seen_classes) & set(classes)
    if already:
        raise AdaptError(f"classes {sorted(already)} were already adapted")
    counts = {c: int(np.sum(y == c)) for c in classes}
    expected = shots if shots is not None else counts[classes[0]]
    wrong = {c: n for c, n in counts.items() if n != expected}
    if wrong:
        raise AdaptError(f"expected {expected} shots per class, got {wrong}")
    embeddings = numerics.embed(state.model, x)
    prototypes = dict(state.prototypes)
    for c in classes:
        prototypes[c] = embeddings[y == c].mean(axis=0)
    return FscilState(
        model=state.model,
        prototypes=prototypes,
        seen_classes=state.seen_classes + tuple(classes),
        session_index=state.session_index + 1,
    )


def _proto_matrix(prototypes: dict[int, np.ndarray]):
    order = tuple(sorted(prototypes))
    return order, np.stack([prototypes[c] for c in order])


def classify(state: FscilState, x) -> np.ndarray:
    """Nearest prototype by squared Euclidean distance in embedding space;
    ties resolve to the lower class id."""
    order, protos = _proto_matrix(state.prototypes)
    emb = numerics.embed(state.model, np.asarray(x, dtype=np.float64))
    d2 = ((emb[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return np.asarray(order)[d2.argmin(axis=1)]  # argmin takes the first tie


def prototype_model(prototypes: dict[int, np.ndarray], embedding: MlpModel):
    """The nearest-prototype classifier as an explicit model.

    logits_j = 2 e . p_j - ||p_j||^2, which equals -||e - p_j||^2 up to a
    per-sample constant, so argmax and softmax match the distance rule.
    Returns (model over head indices, class order).
    """
    order, protos = _proto_matrix(prototypes)
    head_w = 2.0 * protos.T
    head_b = -np.sum(protos * protos, axis=1)
    model = MlpModel(
        widths=embedding.widths[:-1] + (len(order),),
        weights=embedding.weights[:-1] + (head_w,),
        biases=embedding.biases[:-1] + (head_b,),
    )
    return model, order


def white_box_context(
    state: FscilState,
    session_x,
    session_labels,
    rng: np.random.Generator | None = None,
    counter: GradEvalCounter | None = None,
):
    """AttackContext for poisoning one session, plus head-index labels.

    Classes the learner has not adapted yet get provisional prototypes: the
    class-mean embedding of the clean session shots, i.e. the prototype the
    session would form without poisoning.
    """
    x = np.asarray(session_x, dtype=np.float64)
    y = np.asarray(session_labels)
    prototypes = dict(state.prototypes)
    embeddings = numerics.embed(state.model, x)
    for c in sorted(int(c) for c in np.unique(y)):
        if c not in prototypes:
            prototypes[c] = embeddings[y == c].mean(axis=0)
    model, order = prototype_model(prototypes, state.model)
    head_index = {c: i for i, c in enumerate(order)}
    head_labels = np.array([head_index[int(c)] for c in y])
    protos = np.stack([prototypes[c] for c in order])
    ctx = AttackContext(model=model, prototypes=protos, rng=rng, counter=counter)
    return ctx, head_labels


def _accuracy(state: FscilState, dataset: Dataset, indices) -> float:
    preds = classify(state, dataset.features[indices])
    return float(np.mean(preds == dataset.labels[indices]) * 100.0)


def _split_accuracy(state, dataset, indices, base_set):
    labels = dataset.labels[indices]
    preds = classify(state, dataset.features[indices])
    hit = preds == labels
    is_base = np.isin(labels, list(base_set))
    acc = float(np.mean(hit) * 100.0)
    base_acc = float(np.mean(hit[is_base]) * 100.0)
    new_acc = float(np.mean(hit[~is_base]) * 100.0) if np.any(~is_base) else None
    return acc, base_acc, new_acc


def run_protocol(
    split: SessionSplit,
    dataset: Dataset,
    poisoner=None,
    seed: int = 0,
    cfg: FscilConfig = FscilConfig(),
    base_state: FscilState | None = None,
    counter: GradEvalCounter | None = None,
) -> SessionReport:
    """Full protocol: base training, then per-session poisoning (optional),
    adaptation, and cumulative evaluation.

    The poisoner, when given, receives (x, head_labels, AttackContext) for
    each incremental session's training shots only; test pools stay clean.
    base_state may carry a pre-trained base (it must come from the same
    split/seed; training is deterministic, so the result is identical).
    """
    state = base_state if base_state is not None else train_base(split, dataset, cfg, seed)
    base_set = set(split.base_classes)
    acc0 = _accuracy(state, dataset, split.test_pool(0))
    accs, base_accs, new_accs = [acc0], [acc0], [None]
    for i, entry in enumerate(split.sessions, start=1):
        x = dataset.features[entry.train_indices]
        y = dataset.labels[entry.train_indices]
        if poisoner is not None:
            ctx, head_labels = white_box_context(
                state, x, y, rng=substream(seed, "poison", i), counter=counter
            )
            adv = np.asarray(poisoner(x, head_labels, ctx), dtype=np.float64)
            if adv.shape != x.shape:
                raise PoisonerError(
                    f"poisoner changed the tensor shape: {x.shape} -> {adv.shape}"
                )
            if not np.all(np.isfinite(adv)):
                raise PoisonerError("poisoner produced non-finite values")
            if adv.min() < -1e-9 or adv.max() > 1.0 + 1e-9:
                raise PoisonerError("poisoner left the unit box")
            x = adv
        state = adapt_session(state, x, y, shots=split.shots)
        acc, base_acc, new_acc = _split_accuracy(
            state, dataset, split.test_pool(i), base_set
        )
        accs.append(acc)
        base_accs.append(base_acc)
        new_accs.append(new_acc)
    return SessionReport(tuple(accs), tuple(base_accs), tuple(new_accs))
