"""Command-line front end.

Subcommands cover the full workflow: train the clean learner, run a single
attack, evolve an attack specification, verify the published result tables,
and render a report (CSV plus figures) from a finished run's artifacts.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib

import click

from . import reporting
from .attacks import baseline_poisoner
from .config import ConfigError, RunConfig, load_config
from .dsl import (
    AttackSpec,
    PerturbationBudget,
    SpecError,
    interpret,
    parse,
    serialize,
)
from .evaluator import Evaluator
from .fscil import attack_drop, run_protocol, train_base
from .orchestrator import Orchestrator

# Reference momentum-reversal attack used when the user asks for `acraft`
# without providing a document of their own.
BUILTIN_ACRAFT = dataclasses.replace(
    AttackSpec(),
    id="acraft-builtin",
    rationale="momentum reversal with gradient-descent steps on the true class",
    family="momentum_iterative",
    budget=PerturbationBudget(epsilon=0.1, alpha_step=0.02, iterations=10),
)

BUILTIN_ATTACKS = ("fgsm", "pgd", "cw", "deepfool", "acraft")


@dataclasses.dataclass
class CliContext:
    config: RunConfig
    out: pathlib.Path
    mock: bool

    @property
    def endpoint(self):
        if self.mock or not self.config.endpoint.base_url:
            return None
        return self.config.endpoint

    def build_task(self):
        return self.config.task.build()

    def evaluator(self, ds, split):
        return Evaluator(
            ds, split, fscil_config=self.config.fscil, config=self.config.evaluation
        )


@click.group()
@click.option(
    "--config", "config_path", type=click.Path(dir_okay=False),
    default=None, help="YAML or JSON run configuration.",
)
@click.option("--seed", type=int, default=None, help="Master seed override.")
@click.option(
    "--out", "out_dir", type=click.Path(file_okay=False),
    default="runs/latest", show_default=True, help="Artifact directory.",
)
@click.option("--mock", is_flag=True, help="Use the deterministic offline generator.")
@click.pass_context
def main(ctx, config_path, seed, out_dir, mock):
    """Evolve and evaluate poisoning attacks on an incremental learner."""
    try:
        run_config = load_config(config_path) if config_path else RunConfig()
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    if seed is not None:
        run_config = dataclasses.replace(run_config, seed=seed)
    ctx.obj = CliContext(run_config, pathlib.Path(out_dir), mock)


@main.command("fscil-train")
@click.pass_obj
def fscil_train(obj: CliContext):
    """Train the base learner and print the clean session accuracies."""
    cfg = obj.config
    ds, split = obj.build_task()
    state = train_base(split, ds, cfg.fscil, seed=cfg.seed)
    report = run_protocol(split, ds, seed=cfg.seed, cfg=cfg.fscil, base_state=state)
    click.echo(reporting.session_table({"clean": report}))
    obj.out.mkdir(parents=True, exist_ok=True)
    (obj.out / "clean_sessions.csv").write_text(
        reporting.reports_to_csv({"clean": report}), encoding="utf-8"
    )
    click.echo(f"average accuracy: {report.avg:.2f}")
    click.echo(f"wrote {obj.out / 'clean_sessions.csv'}")


def _resolve_poisoner(name: str):
    if name.startswith("spec:"):
        path = pathlib.Path(name[len("spec:"):])
        try:
            spec = parse(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise click.ClickException(f"could not read attack document: {exc}")
        except SpecError as exc:
            raise click.ClickException(f"bad attack document {path}: {exc}")
        return spec.id, interpret(spec)
    if name == "acraft":
        return name, interpret(BUILTIN_ACRAFT)
    if name in BUILTIN_ATTACKS:
        return name, baseline_poisoner(name)
    raise click.ClickException(
        f"unknown attack {name!r}; expected one of "
        f"{', '.join(BUILTIN_ATTACKS)} or spec:<path>"
    )


@main.command()
@click.option(
    "--attack", "attack_name", default="acraft", show_default=True,
    help="fgsm | pgd | cw | deepfool | acraft | spec:<path>",
)
@click.pass_obj
def attack(obj: CliContext, attack_name):
    """Poison the incremental sessions with one attack and report the drop."""
    cfg = obj.config
    ds, split = obj.build_task()
    label, poisoner = _resolve_poisoner(attack_name)
    state = train_base(split, ds, cfg.fscil, seed=cfg.seed)
    clean = run_protocol(split, ds, seed=cfg.seed, cfg=cfg.fscil, base_state=state)
    try:
        poisoned = run_protocol(
            split, ds, poisoner, seed=cfg.seed, cfg=cfg.fscil, base_state=state
        )
    except Exception as exc:
        raise click.ClickException(f"attack run failed: {exc}")
    reports = {"clean": clean, label: poisoned}
    click.echo(reporting.session_table(reports))
    click.echo(f"attack drop: {attack_drop(clean, poisoned):.2f}")
    obj.out.mkdir(parents=True, exist_ok=True)
    (obj.out / "sessions.csv").write_text(
        reporting.reports_to_csv(reports), encoding="utf-8"
    )
    click.echo(f"wrote {obj.out / 'sessions.csv'}")


@main.command()
@click.pass_obj
def evolve(obj: CliContext):
    """Search for an attack specification with the full evolution loop."""
    cfg = obj.config
    ds, split = obj.build_task()
    evaluator = obj.evaluator(ds, split)
    orch = Orchestrator(
        evaluator, cfg.evolution, endpoint=obj.endpoint, seed=cfg.seed
    )
    try:
        result = orch.run()
    except Exception as exc:
        raise click.ClickException(f"evolution failed: {exc}")

    obj.out.mkdir(parents=True, exist_ok=True)
    orch.save_checkpoint(obj.out / "checkpoint.json")
    with open(obj.out / "evolution_log.jsonl", "w", encoding="utf-8") as handle:
        for record in result.log:
            handle.write(json.dumps(record) + "\n")
    (obj.out / "best.attackspec").write_text(
        serialize(result.spec) + "\n", encoding="utf-8"
    )

    state, clean = evaluator.clean_run(orch.protocol_seed)
    reports = {"clean": clean}
    for name in ("fgsm", "pgd"):
        reports[name] = run_protocol(
            split, ds, baseline_poisoner(name),
            seed=orch.protocol_seed, cfg=cfg.fscil, base_state=state,
        )
    reports["evolved"] = run_protocol(
        split, ds, interpret(result.spec),
        seed=orch.protocol_seed, cfg=cfg.fscil, base_state=state,
    )
    (obj.out / "comparison.csv").write_text(
        reporting.reports_to_csv(reports), encoding="utf-8"
    )

    click.echo(reporting.session_table(reports))
    click.echo(
        f"best candidate {result.spec.id} phi={result.fitness.phi:.4f} "
        f"after {result.generations} generations (converged={result.converged})"
    )
    click.echo(f"artifacts in {obj.out}")


@main.command("verify-tables")
def verify_tables_cmd():
    """Recompute the published averages and drops from their own rows."""
    checks = reporting.verify_tables()
    for check in checks:
        click.echo(check.line())
    flagged = sum(not check.passed for check in checks)
    click.echo(f"{len(checks) - flagged} consistent, {flagged} flagged")


@main.command()
@click.pass_obj
def report(obj: CliContext):
    """Render CSV curves, figures, and a markdown summary for a finished run."""
    log_path = obj.out / "evolution_log.jsonl"
    if not log_path.exists():
        raise click.ClickException(
            f"no evolution log found at {log_path} (run `acraft evolve` first)"
        )
    records = [
        json.loads(line)
        for line in log_path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not records:
        raise click.ClickException(f"evolution log {log_path} is empty")

    doc = None
    checkpoint_path = obj.out / "checkpoint.json"
    if checkpoint_path.exists():
        doc = json.loads(checkpoint_path.read_text(encoding="utf-8"))
        champion = max(
            (entry["fitness"]["phi"] for entry in doc["population"]), default=None
        )
        if champion is not None and champion != records[-1]["best_phi"]:
            raise click.ClickException(
                f"inconsistent artifacts: checkpoint best fitness {champion!r} "
                f"does not match evolution log {records[-1]['best_phi']!r}"
            )

    comparison_path = obj.out / "comparison.csv"
    if not comparison_path.exists():
        raise click.ClickException(f"no comparison table found at {comparison_path}")
    sessions = reporting.parse_reports_csv(
        comparison_path.read_text(encoding="utf-8")
    )

    (obj.out / "fitness_curve.csv").write_text(
        reporting.fitness_curve_csv(records), encoding="utf-8"
    )
    methods = list(sessions)
    n_sessions = len(sessions[methods[0]]["accs"])
    lines = ["session," + ",".join(methods)]
    for i in range(n_sessions):
        lines.append(
            f"{i}," + ",".join(repr(sessions[m]["accs"][i]) for m in methods)
        )
    (obj.out / "session_curves.csv").write_text(
        "\n".join(lines) + "\n", encoding="utf-8"
    )
    reporting.render_fitness_figure(records, obj.out / "fitness_over_generations.png")
    reporting.render_session_figure(sessions, obj.out / "session_accuracy.png")
    (obj.out / "report.md").write_text(
        _report_markdown(obj, records, sessions, doc), encoding="utf-8"
    )
    click.echo(f"report written to {obj.out / 'report.md'}")


def _report_markdown(obj: CliContext, records, sessions, checkpoint=None) -> str:
    last = records[-1]
    lines = [
        "# Attack evolution report",
        "",
        f"- generations: {len(records)}",
        f"- best candidate: `{last['best_id']}` with fitness {last['best_phi']:.4f}",
        f"- final population mean fitness: {last['mu_phi']:.4f}",
        f"- final step reward: {last['reward']:.4f}",
    ]
    if checkpoint is not None:
        tokens = checkpoint["tokens"]
        lines.append(
            f"- generator tokens: {tokens['prompt']} prompt, "
            f"{tokens['completion']} completion"
        )
    lines += [
        "",
        "## Session accuracies",
        "",
    ]
    clean_avg = None
    if "clean" in sessions:
        clean_avg = sum(sessions["clean"]["accs"]) / len(sessions["clean"]["accs"])
    n = len(next(iter(sessions.values()))["accs"])
    header = ["method"] + [f"s{i}" for i in range(n)] + ["avg", "drop"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for name, entry in sessions.items():
        avg = sum(entry["accs"]) / len(entry["accs"])
        drop = "" if name == "clean" or clean_avg is None else f"{clean_avg - avg:.2f}"
        cells = [name] + [f"{a:.2f}" for a in entry["accs"]] + [f"{avg:.2f}", drop]
        lines.append("| " + " | ".join(cells) + " |")
    lines += [
        "",
        "## Figures",
        "",
        "![fitness over generations](fitness_over_generations.png)",
        "",
        "![session accuracy](session_accuracy.png)",
        "",
    ]
    best_path = obj.out / "best.attackspec"
    if best_path.exists():
        lines += [
            "## Best attack document",
            "",
            "```json",
            best_path.read_text(encoding="utf-8").rstrip(),
            "```",
            "",
        ]
    return "\n".join(lines)


if __name__ == "__main__":
    main()
