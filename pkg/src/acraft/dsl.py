"""Typed attack-specification grammar.

An AttackSpec is the searchable unit of the discovery loop: a rationale in
free text plus a fully parameterized gradient-sign attack. The module owns
validation, the JSON document format (the same contract an LLM must emit),
compilation of specs into poisoning closures, a normalized spec distance,
and the three transformation operators (genesis, bounded mutation, uniform
crossover). Everything is pure and deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .attacks import PerturbationBudget, acraft_attack
from .numerics import LossCombination
from .seeding import derive_seed

FAMILIES = ("single_step", "iterative", "momentum_iterative")

INSTRUCTION_KINDS = ("forget_old", "hit_new", "cut_cost", "stealth")

# Searchable numeric fields with their declared closed ranges. Distances
# normalize by the range width; validation enforces membership.
NUMERIC_FIELDS = (
    ("budget.epsilon", 0.0, 1.0),
    ("budget.alpha_step", 0.0, 1.0),
    ("budget.iterations", 0, 20),
    ("mu", 0.0, 1.0),
    ("lambda_rev", -2.0, 2.0),
    ("loss.w_ce_true", 0.0, 1.0),
    ("loss.w_ce_runnerup", -1.0, 1.0),
    ("loss.w_proto", 0.0, 1.0),
)
CATEGORICAL_FIELDS = ("family", "step_direction", "random_start", "per_step_projection")
FIELD_COUNT = len(NUMERIC_FIELDS) + len(CATEGORICAL_FIELDS)

DOCUMENT_SCHEMA = """\
{
  "id": <nonempty string>,
  "rationale": <string>,
  "family": "single_step" | "iterative" | "momentum_iterative",
  "budget": {
    "epsilon": <real in [0, 1]>,
    "alpha_step": <real in [0, 1]>,
    "iterations": <integer in [0, 20]>
  },
  "mu": <real in [0, 1]>,
  "lambda_rev": <nonzero real in [-2, 2]>,
  "loss": {
    "w_ce_true": <real in [0, 1]>,
    "w_ce_runnerup": <real in [-1, 1]>,
    "w_proto": <real in [0, 1]>
  },
  "step_direction": 1 | -1,
  "random_start": true | false,
  "per_step_projection": true | false
}"""


class SpecError(ValueError):
    """Base class for spec document problems."""


class SpecSyntaxError(SpecError):
    """Document is not well-formed (bad JSON, wrong shape, missing field)."""


class SpecFormatError(SpecError):
    """A present field has the wrong type or is not part of the grammar."""


class SpecRangeError(SpecError):
    """A well-typed field violates its declared range or invariant."""


@dataclass(frozen=True)
class AttackSpec:
    """One candidate attack: rationale plus executable parameters."""

    id: str = "default"
    rationale: str = ""
    family: str = "iterative"
    budget: PerturbationBudget = PerturbationBudget(0.1, 0.025, 10)
    mu: float = 0.9
    lambda_rev: float = -1.0
    loss: LossCombination = LossCombination()
    step_direction: int = -1
    random_start: bool = False
    per_step_projection: bool = False


@dataclass(frozen=True)
class Instruction:
    """A steering template for the generator plus optional free text."""

    kind: str
    payload: str = ""

    def __post_init__(self):
        if self.kind not in INSTRUCTION_KINDS:
            raise ValueError(
                f"instruction kind must be one of {INSTRUCTION_KINDS}, got {self.kind!r}"
            )


def _get(spec: AttackSpec, path: str):
    value = spec
    for part in path.split("."):
        value = getattr(value, part)
    return value


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate(spec: AttackSpec) -> list[str]:
    """All invariant violations, each naming its field path; empty when ok."""
    bad = []
    if not isinstance(spec.id, str) or not spec.id:
        bad.append("id: must be a nonempty string")
    if not isinstance(spec.rationale, str):
        bad.append("rationale: must be a string")
    if spec.family not in FAMILIES:
        bad.append(f"family: must be one of {FAMILIES}, got {spec.family!r}")
    for path, lo, hi in NUMERIC_FIELDS:
        value = _get(spec, path)
        if not _is_number(value):
            bad.append(f"{path}: expected a number, got {type(value).__name__}")
        elif not lo <= value <= hi:
            bad.append(f"{path}: {value!r} outside [{lo}, {hi}]")
    if _is_number(spec.budget.iterations) and not isinstance(spec.budget.iterations, int):
        bad.append("budget.iterations: expected an integer")
    if _is_number(spec.lambda_rev) and spec.lambda_rev == 0:
        bad.append("lambda_rev: must be nonzero")
    if spec.step_direction not in (-1, 1):
        bad.append(f"step_direction: must be 1 or -1, got {spec.step_direction!r}")
    for flag in ("random_start", "per_step_projection"):
        if not isinstance(getattr(spec, flag), bool):
            bad.append(f"{flag}: must be a boolean")
    return bad


def validate_population(specs) -> list[str]:
    """Per-spec violations plus duplicate-id checks across the group."""
    bad = []
    seen: dict[str, int] = {}
    for i, spec in enumerate(specs):
        bad.extend(f"[{i}].{v}" for v in validate(spec))
        if spec.id in seen:
            bad.append(f"[{i}].id: duplicate of [{seen[spec.id]}] ({spec.id!r})")
        else:
            seen[spec.id] = i
    return bad


def interpret(spec: AttackSpec):
    """Compile a valid spec into a poisoning closure (x, labels, context).

    single_step takes one step of size epsilon; iterative is the plain
    signed loop; momentum_iterative engages mu and lambda_rev. All families
    share the momentum kernel, which degenerates to the simpler forms.
    """
    bad = validate(spec)
    if bad:
        raise SpecRangeError("invalid spec: " + "; ".join(bad))
    if spec.family == "single_step":
        budget = PerturbationBudget(spec.budget.epsilon, spec.budget.epsilon, 1)
        mu, lambda_rev = 0.0, 1.0
    elif spec.family == "iterative":
        budget = spec.budget
        mu, lambda_rev = 0.0, 1.0
    else:
        budget = spec.budget
        mu, lambda_rev = spec.mu, spec.lambda_rev

    def poison(x, labels, context):
        return acraft_attack(
            x,
            labels,
            context,
            budget,
            mu=mu,
            lambda_rev=lambda_rev,
            loss=spec.loss,
            step_direction=spec.step_direction,
            random_start=spec.random_start,
            per_step_projection=spec.per_step_projection,
        )

    return poison


def _to_doc(spec: AttackSpec) -> dict:
    return {
        "id": spec.id,
        "rationale": spec.rationale,
        "family": spec.family,
        "budget": {
            "epsilon": float(spec.budget.epsilon),
            "alpha_step": float(spec.budget.alpha_step),
            "iterations": int(spec.budget.iterations),
        },
        "mu": float(spec.mu),
        "lambda_rev": float(spec.lambda_rev),
        "loss": {
            "w_ce_true": float(spec.loss.w_ce_true),
            "w_ce_runnerup": float(spec.loss.w_ce_runnerup),
            "w_proto": float(spec.loss.w_proto),
        },
        "step_direction": int(spec.step_direction),
        "random_start": bool(spec.random_start),
        "per_step_projection": bool(spec.per_step_projection),
    }


def serialize(spec: AttackSpec) -> str:
    """Canonical JSON document (fixed key order, full float precision)."""
    return json.dumps(_to_doc(spec), indent=2)


_SHAPE = {
    "id": str,
    "rationale": str,
    "family": str,
    "budget": {"epsilon": float, "alpha_step": float, "iterations": int},
    "mu": float,
    "lambda_rev": float,
    "loss": {"w_ce_true": float, "w_ce_runnerup": float, "w_proto": float},
    "step_direction": int,
    "random_start": bool,
    "per_step_projection": bool,
}


def _take(doc: dict, shape: dict, prefix: str = "") -> dict:
    for key in doc:
        if key not in shape:
            raise SpecFormatError(f"unknown field `{prefix}{key}`")
    out = {}
    for key, want in shape.items():
        path = f"{prefix}{key}"
        if key not in doc:
            raise SpecSyntaxError(f"missing required field `{path}`")
        value = doc[key]
        if isinstance(want, dict):
            if not isinstance(value, dict):
                raise SpecFormatError(f"{path}: expected an object")
            out[key] = _take(value, want, path + ".")
        elif want is float:
            if not _is_number(value):
                raise SpecFormatError(
                    f"{path}: expected a number, got {type(value).__name__}"
                )
            out[key] = float(value)
        elif want is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise SpecFormatError(
                    f"{path}: expected an integer, got {type(value).__name__}"
                )
            out[key] = value
        elif want is bool:
            if not isinstance(value, bool):
                raise SpecFormatError(
                    f"{path}: expected a boolean, got {type(value).__name__}"
                )
            out[key] = value
        else:
            if not isinstance(value, str):
                raise SpecFormatError(
                    f"{path}: expected a string, got {type(value).__name__}"
                )
            out[key] = value
    return out


def parse(text: str) -> AttackSpec:
    """Parse and fully validate a spec document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecSyntaxError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SpecSyntaxError("document must be a JSON object")
    fields = _take(doc, _SHAPE)
    spec = AttackSpec(
        id=fields["id"],
        rationale=fields["rationale"],
        family=fields["family"],
        budget=PerturbationBudget(**fields["budget"]),
        mu=fields["mu"],
        lambda_rev=fields["lambda_rev"],
        loss=LossCombination(**fields["loss"]),
        step_direction=fields["step_direction"],
        random_start=fields["random_start"],
        per_step_projection=fields["per_step_projection"],
    )
    bad = validate(spec)
    if bad:
        raise SpecRangeError("; ".join(bad))
    return spec


def spec_distance(a: AttackSpec, b: AttackSpec) -> float:
    """Mean per-field normalized distance over the searchable fields."""
    total = 0.0
    for path, lo, hi in NUMERIC_FIELDS:
        total += abs(_get(a, path) - _get(b, path)) / (hi - lo)
    for path in CATEGORICAL_FIELDS:
        total += 0.0 if _get(a, path) == _get(b, path) else 1.0
    return total / FIELD_COUNT


def diversity(specs) -> float:
    """Mean pairwise spec distance of a population."""
    specs = list(specs)
    if len(specs) < 2:
        raise ValueError("diversity needs at least 2 specs")
    total, pairs = 0.0, 0
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            total += spec_distance(specs[i], specs[j])
            pairs += 1
    return total / pairs


def fresh_id(prefix: str, *parts) -> str:
    return f"{prefix}-{derive_seed(prefix, *parts):016x}"


def _set(fields: dict, path: str, value) -> None:
    head, _, rest = path.partition(".")
    if rest:
        fields[head] = dict(fields[head])
        _set(fields[head], rest, value)
    else:
        fields[head] = value


def _from_fields(fields: dict) -> AttackSpec:
    return AttackSpec(
        id=fields["id"],
        rationale=fields["rationale"],
        family=fields["family"],
        budget=PerturbationBudget(**fields["budget"]),
        mu=fields["mu"],
        lambda_rev=fields["lambda_rev"],
        loss=LossCombination(**fields["loss"]),
        step_direction=fields["step_direction"],
        random_start=fields["random_start"],
        per_step_projection=fields["per_step_projection"],
    )


def mutate(spec: AttackSpec, intensity: float, seed: int) -> AttackSpec:
    """Bounded local perturbation: spec_distance(child, spec) <= intensity.

    A random subset of numeric fields moves by at most intensity times the
    field's range width, so each per-field normalized distance is bounded by
    intensity and the 12-field mean cannot exceed it.
    """
    if not 0.0 < intensity <= 1.0:
        raise ValueError(f"intensity must be in (0, 1], got {intensity!r}")
    rng = np.random.default_rng(derive_seed("mutate", seed))
    fields = _to_doc(spec)
    count = int(rng.integers(1, 4))
    picks = rng.choice(len(NUMERIC_FIELDS), size=count, replace=False)
    for pick in picks:
        path, lo, hi = NUMERIC_FIELDS[int(pick)]
        old = _get(spec, path)
        if path == "budget.iterations":
            cap = int(intensity * (hi - lo))
            if cap == 0:
                continue
            new = int(np.clip(old + int(rng.integers(-cap, cap + 1)), lo, hi))
        else:
            new = float(np.clip(old + rng.uniform(-1.0, 1.0) * intensity * (hi - lo), lo, hi))
            while path == "lambda_rev" and new == 0.0:
                new = float(
                    np.clip(old + rng.uniform(-1.0, 1.0) * intensity * (hi - lo), lo, hi)
                )
        _set(fields, path, new)
    fields["id"] = fresh_id("ref", seed, spec.id)
    return _from_fields(fields)


def crossover(parents, seed: int) -> AttackSpec:
    """Uniform crossover: every field comes verbatim from some parent."""
    parents = list(parents)
    if len(parents) < 2:
        raise ValueError("crossover needs at least 2 parents")
    rng = np.random.default_rng(derive_seed("crossover", seed))
    fields = _to_doc(parents[0])
    paths = [p for p, _, _ in NUMERIC_FIELDS] + list(CATEGORICAL_FIELDS) + ["rationale"]
    for path in paths:
        donor = parents[int(rng.integers(0, len(parents)))]
        _set(fields, path, _get(donor, path))
    fields["id"] = fresh_id("syn", seed, *(p.id for p in parents))
    return _from_fields(fields)


def sample_genesis(seed: int, count: int) -> list[AttackSpec]:
    """Fresh specs from the documented priors, deterministic per seed."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count!r}")
    rng = np.random.default_rng(derive_seed("genesis", seed))
    specs = []
    for i in range(count):
        family = FAMILIES[int(rng.integers(0, len(FAMILIES)))]
        epsilon = float(rng.uniform(0.01, 0.3))
        alpha_step = float(rng.uniform(0.005, 0.1))
        iterations = int(rng.integers(1, 21))
        mu = float(rng.uniform(0.0, 1.0))
        if rng.random() < 0.8:
            lambda_rev = float(rng.choice([-1.0, 1.0]))
        else:
            lambda_rev = 0.0
            while lambda_rev == 0.0:
                lambda_rev = float(rng.uniform(-2.0, 2.0))
        w_true, w_run, w_proto = (float(v) for v in rng.dirichlet([1.0, 1.0, 1.0]))
        if rng.random() < 0.5:
            w_run = -w_run
        step_direction = int(rng.choice([-1, 1]))
        random_start = bool(rng.integers(0, 2))
        per_step_projection = bool(rng.integers(0, 2))
        spec = AttackSpec(
            id=fresh_id("gen", seed, i),
            rationale=(
                f"fresh {family} candidate: eps={epsilon:.3f}, T={iterations}, "
                f"loss mix ({w_true:.2f}, {w_run:.2f}, {w_proto:.2f})"
            ),
            family=family,
            budget=PerturbationBudget(epsilon, alpha_step, iterations),
            mu=mu,
            lambda_rev=lambda_rev,
            loss=LossCombination(w_true, w_run, w_proto),
            step_direction=step_direction,
            random_start=random_start,
            per_step_projection=per_step_projection,
        )
        specs.append(spec)
    return specs
