"""Evolution loop: population management driven by the PPO controller.

Each generation the controller picks one action (transformation, parent
selector, steering template); the orchestrator resolves parents, asks the
generator for a batch of offspring, scores them, rewards the controller
with the mean offspring fitness, and keeps the top N of parents plus
offspring. Every random draw is keyed by (master seed, generation, tag),
so a run can be checkpointed after any generation and resumed bitwise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .controller import (
    EvolutionAction,
    PolicyTransition,
    PpoController,
    featurize,
)
from .dsl import AttackSpec, Instruction, fresh_id, parse, serialize
from .evaluator import Evaluator, FitnessReport
from .generator import (
    INSTRUCTION_TEXT,
    EndpointConfig,
    GenerationFailure,
    GeneratorRequest,
    llm_generate,
    mock_generate,
)
from .seeding import derive_seed

CHECKPOINT_VERSION = 1

_ARITY = {"genesis": 0, "refine": 1, "synth": 2}


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 8
    t_max: int = 15
    offspring: int = 4
    window: int = 5
    tol: float = 0.01
    update_interval: int = 1
    intensity: float = 0.1
    seed_specs: tuple[AttackSpec, ...] = ()

    def __post_init__(self):
        if self.population_size < 1:
            raise ValueError(f"population_size must be >= 1, got {self.population_size!r}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max!r}")
        if self.offspring < 1:
            raise ValueError(f"offspring must be >= 1, got {self.offspring!r}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window!r}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol!r}")
        if self.update_interval < 1:
            raise ValueError(f"update_interval must be >= 1, got {self.update_interval!r}")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError(f"intensity must be in (0, 1], got {self.intensity!r}")
        if len(self.seed_specs) > self.population_size:
            raise ValueError(
                f"{len(self.seed_specs)} seed specs exceed population size "
                f"{self.population_size}"
            )


@dataclass(frozen=True)
class RunResult:
    spec: AttackSpec
    fitness: FitnessReport
    generations: int
    converged: bool
    history: tuple[tuple[float, float, float], ...]
    log: tuple[dict, ...]
    population: tuple[tuple[AttackSpec, FitnessReport], ...]


def select_top_n(members, n: int):
    """Keep the n fittest candidates; ties fall to cheaper attacks, then ids."""
    ordered = sorted(members, key=lambda m: (-m[1].phi, m[1].j_cost, m[0].id))
    return ordered[:n]


def converged(mu_history, window: int, tol: float) -> bool:
    """Relative mean-fitness drift over the window fell below tol."""
    values = list(mu_history)
    if len(values) <= window:
        return False
    previous = values[-1 - window]
    return abs(values[-1] - previous) <= tol * max(abs(previous), 1e-9)


class Orchestrator:
    """Holds the evolving population, the controller, and the run journal."""

    def __init__(
        self,
        evaluator: Evaluator,
        config: EvolutionConfig | None = None,
        endpoint: EndpointConfig | None = None,
        controller_config=None,
        seed: int = 0,
    ):
        self.evaluator = evaluator
        self.config = config or EvolutionConfig()
        self.endpoint = endpoint
        self.seed = seed
        self.controller = PpoController(controller_config, derive_seed(seed, "controller"))
        self.protocol_seed = derive_seed(seed, "protocol")
        self.generation = 0
        self.population: list[tuple[AttackSpec, FitnessReport]] = []
        self.history: list[tuple[float, float, float]] = []
        self.transformations: list[str] = []
        self.log: list[dict] = []
        # token spend is tracked but never enters fitness
        self.prompt_tokens = 0
        self.completion_tokens = 0

    # -- generation plumbing ------------------------------------------------

    def _generate(self, request: GeneratorRequest):
        if self.endpoint is not None and self.endpoint.base_url:
            outcome = llm_generate(request, self.endpoint)
        else:
            outcome = mock_generate(request)
        if not isinstance(outcome, GenerationFailure):
            self.prompt_tokens += outcome.prompt_tokens
            self.completion_tokens += outcome.completion_tokens
        return outcome

    def _stats(self) -> tuple[float, float, float]:
        phis = np.array([report.phi for _, report in self.population])
        return float(phis.mean()), float(phis.var()), float(phis.max())

    def _select_parents(self, action: EvolutionAction):
        arity = _ARITY[action.transformation]
        if arity == 0:
            return ()
        rng = np.random.default_rng(derive_seed(self.seed, self.generation, "parents"))
        pool = self.population
        if action.selector == "best":
            picks = [pool[min(i, len(pool) - 1)] for i in range(arity)]
            return tuple(picks)
        if action.selector == "proportional":
            phis = np.array([report.phi for _, report in pool])
            weights = phis - phis.min() + 1e-6
            probs = weights / weights.sum()
        else:
            probs = None
        replace = len(pool) < arity
        indices = rng.choice(len(pool), size=arity, replace=replace, p=probs)
        return tuple(pool[int(i)] for i in indices)

    def _instruction(self, kind: str) -> Instruction:
        return Instruction(kind, INSTRUCTION_TEXT[kind])

    # -- lifecycle ----------------------------------------------------------

    def initialize(self) -> None:
        """Score the configured seed specs, then fill with fresh candidates."""
        if self.population:
            raise RuntimeError("orchestrator already initialized")
        members = []
        for spec in self.config.seed_specs:
            members.append((spec, self.evaluator.evaluate(spec, self.protocol_seed)))
        kinds = tuple(INSTRUCTION_TEXT)
        for i in range(self.config.population_size - len(members)):
            request = GeneratorRequest(
                transformation="genesis",
                instruction=self._instruction(kinds[i % len(kinds)]),
                generation=0,
                seed=derive_seed(self.seed, "init", i),
                intensity=self.config.intensity,
            )
            outcome = self._generate(request)
            if isinstance(outcome, GenerationFailure):
                continue
            spec = self._dedup(outcome.spec, members, ("init", i))
            members.append((spec, self.evaluator.evaluate(spec, self.protocol_seed)))
        if not members:
            raise RuntimeError("initialization produced no viable candidates")
        self.population = select_top_n(members, self.config.population_size)
        self.history.append(self._stats())

    def _dedup(self, spec: AttackSpec, staged, tag) -> AttackSpec:
        taken = {s.id for s, _ in self.population}
        taken.update(s.id for s, _ in staged)
        if spec.id in taken:
            return dataclasses.replace(spec, id=fresh_id("dup", self.seed, *tag))
        return spec

    def step(self) -> dict:
        """Run one generation; returns the appended log record."""
        if not self.population:
            raise RuntimeError("initialize the population before stepping")
        cfg = self.config
        state = featurize(
            [report.phi for _, report in self.population],
            self.transformations,
            self.generation,
            cfg.t_max,
        )
        action_rng = np.random.default_rng(derive_seed(self.seed, self.generation, "action"))
        action, index, log_prob, value = self.controller.sample_action(state, action_rng)
        parents = self._select_parents(action)

        rewards = []
        offspring: list[tuple[AttackSpec, FitnessReport]] = []
        for i in range(cfg.offspring):
            request = GeneratorRequest(
                transformation=action.transformation,
                instruction=self._instruction(action.instruction_kind),
                parents=tuple(spec for spec, _ in parents),
                parent_fitness=tuple(report.phi for _, report in parents),
                generation=self.generation,
                seed=derive_seed(self.seed, self.generation, i, "gen"),
                intensity=cfg.intensity,
            )
            outcome = self._generate(request)
            if isinstance(outcome, GenerationFailure):
                # the controller still pays for the failure, but nothing
                # joins the selection pool
                report = self.evaluator.evaluate_outcome(outcome, self.protocol_seed)
                rewards.append(report.phi)
                continue
            spec = self._dedup(outcome.spec, offspring, (self.generation, i))
            report = self.evaluator.evaluate(spec, self.protocol_seed)
            rewards.append(report.phi)
            offspring.append((spec, report))

        reward = float(np.mean(rewards))
        self.controller.record(
            PolicyTransition(tuple(state.features), index, reward, log_prob, value)
        )
        if (self.generation + 1) % cfg.update_interval == 0:
            self.controller.update()

        self.population = select_top_n(
            self.population + offspring, cfg.population_size
        )
        self.history.append(self._stats())
        self.transformations.append(action.transformation)
        best_spec, best_report = self.population[0]
        record = {
            "t": self.generation,
            "action": f"{action.transformation}/{action.selector}/{action.instruction_kind}",
            "reward": reward,
            "mu_phi": self.history[-1][0],
            "sigma2_phi": self.history[-1][1],
            "best_phi": best_report.phi,
            "best_id": best_spec.id,
        }
        self.log.append(record)
        self.generation += 1
        return record

    def converged(self) -> bool:
        return converged(
            [mu for mu, _, _ in self.history], self.config.window, self.config.tol
        )

    def run(self) -> RunResult:
        """Initialize if needed, evolve until the budget or convergence."""
        if not self.population:
            self.initialize()
        while self.generation < self.config.t_max and not self.converged():
            self.step()
        best_spec, best_report = self.population[0]
        return RunResult(
            spec=best_spec,
            fitness=best_report,
            generations=self.generation,
            converged=self.converged(),
            history=tuple(self.history),
            log=tuple(self.log),
            population=tuple(self.population),
        )

    # -- persistence ---------------------------------------------------------

    def to_json_dict(self) -> dict:
        cfg = self.config
        return {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "generation": self.generation,
            "config": {
                "population_size": cfg.population_size,
                "t_max": cfg.t_max,
                "offspring": cfg.offspring,
                "window": cfg.window,
                "tol": cfg.tol,
                "update_interval": cfg.update_interval,
                "intensity": cfg.intensity,
                "seed_specs": [serialize(s) for s in cfg.seed_specs],
            },
            "endpoint": dataclasses.asdict(self.endpoint) if self.endpoint else None,
            "population": [
                {"spec": serialize(spec), "fitness": report.to_json_dict()}
                for spec, report in self.population
            ],
            "controller": self.controller.to_json_dict(),
            "history": [list(entry) for entry in self.history],
            "transformations": list(self.transformations),
            "log": [dict(record) for record in self.log],
            "tokens": {
                "prompt": self.prompt_tokens,
                "completion": self.completion_tokens,
            },
        }

    @classmethod
    def from_json_dict(cls, doc: dict, evaluator: Evaluator) -> "Orchestrator":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        cfg_doc = dict(doc["config"])
        cfg_doc["seed_specs"] = tuple(parse(text) for text in cfg_doc["seed_specs"])
        endpoint = EndpointConfig(**doc["endpoint"]) if doc["endpoint"] else None
        orch = cls(
            evaluator,
            EvolutionConfig(**cfg_doc),
            endpoint=endpoint,
            seed=doc["seed"],
        )
        orch.controller = PpoController.from_json_dict(doc["controller"])
        orch.generation = doc["generation"]
        orch.population = [
            (parse(entry["spec"]), FitnessReport.from_json_dict(entry["fitness"]))
            for entry in doc["population"]
        ]
        orch.history = [tuple(entry) for entry in doc["history"]]
        orch.transformations = list(doc["transformations"])
        orch.log = [dict(record) for record in doc["log"]]
        orch.prompt_tokens = doc["tokens"]["prompt"]
        orch.completion_tokens = doc["tokens"]["completion"]
        return orch

    def save_checkpoint(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_json_dict(), handle, indent=2)

    @classmethod
    def load_checkpoint(cls, path, evaluator: Evaluator) -> "Orchestrator":
        with open(path, encoding="utf-8") as handle:
            return cls.from_json_dict(json.load(handle), evaluator)
