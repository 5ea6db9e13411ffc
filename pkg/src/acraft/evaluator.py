"""Attack efficacy evaluation: poisoned protocol runs, the objective vector
(j_succ, j_cost), scalar fitness phi, and penalty assignment for failed
candidates. All quantities are deterministic per (spec, seed)."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .attacks import GradEvalCounter
from .dataio import Dataset, SessionSplit
from .dsl import AttackSpec, interpret, validate
from .fscil import FscilConfig, FscilState, SessionReport, run_protocol, train_base
from .generator import GenerationFailure


@dataclass(frozen=True)
class EvalConfig:
    """Fitness weights and cost normalizers.

    alpha trades old-class against new-class damage inside j_succ; w_cost
    must be negative so costlier attacks score lower.
    """

    alpha: float = 0.5
    w_succ: float = 1.0
    w_cost: float = -0.2
    penalty: float = -1.0
    eps_max: float = 0.3
    t_max: int = 20

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha!r}")
        if not self.w_cost < 0:
            raise ValueError(f"w_cost must be negative, got {self.w_cost!r}")
        if not self.eps_max > 0:
            raise ValueError(f"eps_max must be positive, got {self.eps_max!r}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max!r}")
        if not math.isfinite(self.penalty):
            raise ValueError("penalty must be finite")


@dataclass(frozen=True)
class FitnessReport:
    """Objective vector, scalar fitness, and the run it came from."""

    j_succ: float
    j_cost: float
    phi: float
    report: SessionReport | None
    failed: bool
    grad_evals: int
    eps_ratio: float
    note: str = ""

    def to_json_dict(self) -> dict:
        return {
            "j_succ": self.j_succ,
            "j_cost": self.j_cost,
            "phi": self.phi,
            "report": None if self.report is None else self.report.to_json_dict(),
            "failed": self.failed,
            "grad_evals": self.grad_evals,
            "eps_ratio": self.eps_ratio,
            "note": self.note,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FitnessReport":
        report = doc["report"]
        return cls(
            j_succ=doc["j_succ"],
            j_cost=doc["j_cost"],
            phi=doc["phi"],
            report=None if report is None else SessionReport.from_json_dict(report),
            failed=doc["failed"],
            grad_evals=doc["grad_evals"],
            eps_ratio=doc["eps_ratio"],
            note=doc["note"],
        )


def j_success(clean: SessionReport, attacked: SessionReport, alpha: float) -> float:
    """alpha-weighted sum of old-class and new-class performance drops,
    averaged over the incremental sessions, in percentage points."""
    if len(clean.accs) != len(attacked.accs):
        raise ValueError("reports cover different session counts")
    if len(clean.accs) < 2:
        raise ValueError("need at least one incremental session")
    sessions = range(1, len(clean.accs))
    old_clean = sum(clean.base_accs[i] for i in sessions) / len(sessions)
    old_attacked = sum(attacked.base_accs[i] for i in sessions) / len(sessions)
    new_clean = sum(clean.new_accs[i] for i in sessions) / len(sessions)
    new_attacked = sum(attacked.new_accs[i] for i in sessions) / len(sessions)
    return alpha * (old_clean - old_attacked) + (1.0 - alpha) * (
        new_clean - new_attacked
    )


def j_cost(spec: AttackSpec, grad_evals: int, config: EvalConfig, sessions: int) -> float:
    """Normalized cost: half gradient-evaluation count (capped at t_max per
    session), half perturbation budget relative to eps_max."""
    cap = config.t_max * max(1, sessions)
    grad_term = min(1.0, grad_evals / cap)
    eps_term = min(1.0, spec.budget.epsilon / config.eps_max)
    return 0.5 * grad_term + 0.5 * eps_term


def scalarize(j_succ_value: float, j_cost_value: float, config: EvalConfig) -> float:
    return config.w_succ * j_succ_value + config.w_cost * j_cost_value


class Evaluator:
    """Runs candidates through the poisoned protocol on one task.

    Clean runs are computed once per seed and cached; cached and fresh clean
    reports are identical because the whole pipeline is seed-deterministic.
    """

    def __init__(
        self,
        dataset: Dataset,
        split: SessionSplit,
        fscil_config: FscilConfig | None = None,
        config: EvalConfig | None = None,
    ):
        self.dataset = dataset
        self.split = split
        self.fscil_config = fscil_config or FscilConfig()
        self.config = config or EvalConfig()
        self._clean: dict[int, tuple[FscilState, SessionReport]] = {}

    def clean_run(self, seed: int) -> tuple[FscilState, SessionReport]:
        if seed not in self._clean:
            state = train_base(self.split, self.dataset, self.fscil_config, seed)
            report = run_protocol(
                self.split, self.dataset, None, seed, self.fscil_config, state
            )
            self._clean[seed] = (state, report)
        return self._clean[seed]

    def penalty_report(self, note: str) -> FitnessReport:
        return FitnessReport(
            j_succ=0.0,
            j_cost=0.0,
            phi=self.config.penalty,
            report=None,
            failed=True,
            grad_evals=0,
            eps_ratio=0.0,
            note=note,
        )

    def evaluate(self, spec: AttackSpec, seed: int) -> FitnessReport:
        violations = validate(spec)
        if violations:
            return self.penalty_report("invalid spec: " + "; ".join(violations))
        try:
            poison = interpret(spec)
            base_state, clean = self.clean_run(seed)
            counter = GradEvalCounter()
            attacked = run_protocol(
                self.split,
                self.dataset,
                poison,
                seed,
                self.fscil_config,
                base_state,
                counter,
            )
            js = j_success(clean, attacked, self.config.alpha)
            jc = j_cost(spec, counter.count, self.config, len(self.split.sessions))
            phi = scalarize(js, jc, self.config)
        except Exception as exc:  # failed candidates get the penalty, not a crash
            return self.penalty_report(f"{exc.__class__.__name__}: {exc}")
        if not all(map(math.isfinite, (js, jc, phi))):
            return self.penalty_report("non-finite fitness")
        return FitnessReport(
            j_succ=js,
            j_cost=jc,
            phi=phi,
            report=attacked,
            failed=False,
            grad_evals=counter.count,
            eps_ratio=spec.budget.epsilon / self.config.eps_max,
        )

    def evaluate_outcome(self, outcome, seed: int) -> FitnessReport:
        """Evaluate a generator outcome; failures map straight to penalty."""
        if isinstance(outcome, GenerationFailure):
            return self.penalty_report(f"generation {outcome.kind}: {outcome.detail}")
        return self.evaluate(outcome.spec, seed)
