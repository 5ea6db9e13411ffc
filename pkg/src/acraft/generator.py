"""Candidate generation: prompt construction, the chat-completion client,
and a deterministic offline mock.

Generation never raises on bad model output. Every path returns either a
GeneratorResponse whose spec already validates, or a GenerationFailure value
typed as network / malformed / validation, so the evolution loop can assign
penalties and keep going.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, replace

import requests

from .dsl import (
    DOCUMENT_SCHEMA,
    AttackSpec,
    Instruction,
    SpecRangeError,
    SpecError,
    crossover,
    mutate,
    parse,
    sample_genesis,
    serialize,
)
from .seeding import derive_seed

TRANSFORMATIONS = ("genesis", "refine", "synth")

API_KEY_VAR = "ACRAFT_API_KEY"

INSTRUCTION_TEXT = {
    "forget_old": (
        "Maximize forgetting of the base classes: the poisoned model should "
        "lose as much base-class accuracy as possible across the incremental "
        "sessions."
    ),
    "hit_new": (
        "Maximize damage to the newly added classes: drive new-class accuracy "
        "in every incremental session as low as possible."
    ),
    "cut_cost": (
        "Reduce attack cost: prefer fewer gradient evaluations (lower "
        "iteration counts) while keeping the attack effective."
    ),
    "stealth": (
        "Increase stealth: shrink the perturbation budget epsilon while "
        "retaining as much damage as possible."
    ),
}

_TRANSFORM_TEXT = {
    "genesis": "Invent a new attack specification from scratch.",
    "refine": (
        "Refine the parent specification below with small local changes; the "
        "child must stay closely correlated with its parent."
    ),
    "synth": (
        "Synthesize one new specification that combines the strongest ideas "
        "of the parent specifications below."
    ),
}

_BLOCK = re.compile(r"```attackspec\s*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class EndpointConfig:
    """Transport settings for the chat-completion endpoint."""

    base_url: str = ""
    model: str = "attack-designer"
    temperature: float = 0.7
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.25
    max_in_flight: int = 4


@dataclass(frozen=True)
class GeneratorRequest:
    """One transformation to perform, with its parent context."""

    transformation: str
    instruction: Instruction
    parents: tuple[AttackSpec, ...] = ()
    parent_fitness: tuple[float, ...] = ()
    generation: int = 0
    seed: int = 0
    intensity: float = 0.1

    def __post_init__(self):
        if self.transformation not in TRANSFORMATIONS:
            raise ValueError(f"unknown transformation {self.transformation!r}")
        arity_ok = {
            "genesis": len(self.parents) == 0,
            "refine": len(self.parents) == 1,
            "synth": len(self.parents) >= 2,
        }[self.transformation]
        if not arity_ok:
            raise ValueError(
                f"{self.transformation} got {len(self.parents)} parents"
            )
        if len(self.parent_fitness) != len(self.parents):
            raise ValueError("parent_fitness must align with parents")


@dataclass(frozen=True)
class GeneratorResponse:
    rationale: str
    spec: AttackSpec
    transcript: str = ""
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class GenerationFailure:
    """Typed failure value; kind is network, malformed, or validation."""

    kind: str
    detail: str
    transcript: str = ""


def build_prompt(req: GeneratorRequest) -> str:
    """Deterministic prompt: task framing, document schema, transformation
    instruction, serialized parents with fitness, and the steering text."""
    lines = [
        "You design training-time poisoning attacks against a few-shot",
        "class-incremental learner. The attack perturbs the few labeled shots",
        "of each incremental session inside an l-infinity ball of radius",
        "epsilon (inputs live in the unit box); the poisoned shots corrupt",
        "the class prototypes and degrade accuracy on clean test data.",
        "",
        "Reply with a short strategic rationale in prose, then exactly one",
        "fenced code block tagged `attackspec` holding a JSON document of",
        "this shape:",
        "",
        DOCUMENT_SCHEMA,
        "",
        f"Task: {_TRANSFORM_TEXT[req.transformation]}",
    ]
    for i, (parent, fitness) in enumerate(zip(req.parents, req.parent_fitness)):
        lines += ["", f"Parent {i + 1} (fitness {fitness:.6f}):", serialize(parent)]
    steering = INSTRUCTION_TEXT[req.instruction.kind]
    if req.instruction.payload:
        steering += " " + req.instruction.payload
    lines += ["", f"Steering objective: {steering}"]
    return "\n".join(lines)


def _post(messages, config: EndpointConfig):
    """One chat-completion exchange with retry/backoff on transport errors."""
    url = config.base_url.rstrip("/") + "/v1/chat/completions"
    headers = {}
    key = os.environ.get(API_KEY_VAR, "")
    if key:
        headers["Authorization"] = f"Bearer {key}"
    body = {
        "model": config.model,
        "messages": messages,
        "temperature": config.temperature,
    }
    detail = "no attempts made"
    for attempt in range(config.retries):
        if attempt:
            time.sleep(config.backoff * 2 ** (attempt - 1))
        try:
            response = requests.post(
                url, json=body, headers=headers, timeout=config.timeout
            )
        except requests.RequestException as exc:
            detail = f"attempt {attempt + 1}: {exc.__class__.__name__}: {exc}"
            continue
        if response.status_code != 200:
            detail = f"attempt {attempt + 1}: HTTP {response.status_code}"
            continue
        try:
            return response.json()
        except ValueError:
            detail = f"attempt {attempt + 1}: response body is not JSON"
            continue
    return GenerationFailure("network", detail)


def _content(data) -> str | GenerationFailure:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        return GenerationFailure(
            "malformed", "response missing choices[0].message.content",
            transcript=json.dumps(data)[:2000],
        )
    if not isinstance(content, str):
        return GenerationFailure("malformed", "message content is not text")
    return content


def _usage(data) -> tuple[int, int]:
    usage = data.get("usage") or {}
    return int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))


def _extract(content: str):
    """Split a reply into (rationale, spec) or a typed failure."""
    match = _BLOCK.search(content)
    if match is None:
        return GenerationFailure(
            "malformed", "no fenced ```attackspec``` block", transcript=content
        )
    try:
        spec = parse(match.group(1))
    except SpecRangeError as exc:
        return GenerationFailure("validation", str(exc), transcript=content)
    except SpecError as exc:
        return GenerationFailure("malformed", str(exc), transcript=content)
    return content[: match.start()].strip(), spec


def llm_generate(req: GeneratorRequest, config: EndpointConfig):
    """Call the endpoint, parse the reply, and repair once on failure."""
    messages = [{"role": "user", "content": build_prompt(req)}]
    data = _post(messages, config)
    if isinstance(data, GenerationFailure):
        return data
    first = _content(data)
    raw_first = first if isinstance(first, str) else first.transcript
    outcome = first if isinstance(first, GenerationFailure) else _extract(first)
    tokens = _usage(data)
    if not isinstance(outcome, GenerationFailure):
        rationale, spec = outcome
        return GeneratorResponse(rationale, spec, raw_first, *tokens)
    repair = messages + [
        {"role": "assistant", "content": raw_first},
        {
            "role": "user",
            "content": (
                f"That reply was rejected: {outcome.detail}. Respond again "
                "with a short rationale and exactly one fenced ```attackspec``` "
                f"block matching this schema:\n{DOCUMENT_SCHEMA}"
            ),
        },
    ]
    data = _post(repair, config)
    if isinstance(data, GenerationFailure):
        return data
    second = _content(data)
    raw_second = second if isinstance(second, str) else second.transcript
    transcript = raw_first + "\n--- repair ---\n" + raw_second
    outcome = second if isinstance(second, GenerationFailure) else _extract(second)
    more = _usage(data)
    if isinstance(outcome, GenerationFailure):
        return replace(outcome, transcript=transcript)
    rationale, spec = outcome
    return GeneratorResponse(
        rationale, spec, transcript, tokens[0] + more[0], tokens[1] + more[1]
    )


def mock_generate(req: GeneratorRequest) -> GeneratorResponse:
    """Offline stand-in: applies the transformation directly in spec space,
    seeded by (seed, generation, transformation). Always succeeds."""
    seed = derive_seed(req.seed, req.generation, req.transformation)
    if req.transformation == "genesis":
        spec = sample_genesis(seed, 1)[0]
    elif req.transformation == "refine":
        spec = mutate(req.parents[0], req.intensity, seed)
    else:
        spec = crossover(req.parents, seed)
    rationale = (
        f"mock {req.transformation} candidate steered by {req.instruction.kind}"
    )
    return GeneratorResponse(rationale, spec)


def naive_generate(config: EndpointConfig, seed: int):
    """The one-shot baseline: a single genesis request with no parents, no
    fitness feedback, and no evolution loop around it."""
    req = GeneratorRequest(
        "genesis",
        Instruction("hit_new", "Produce your single best attack in one shot."),
        seed=seed,
    )
    if config.base_url:
        return llm_generate(req, config)
    return mock_generate(req)
