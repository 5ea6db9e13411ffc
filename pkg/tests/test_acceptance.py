"""Release gate: one test per acceptance criterion.

Run `pytest -v tests/test_acceptance.py` to get a criterion-by-criterion
pass/fail report; each test also prints its measured numbers and asserts
its own wall-clock budget. The criteria combine published-table arithmetic,
gradient/perturbation oracles, desk-scale attack effectiveness, controller
convergence, end-to-end mock evolution, serialization identities, and the
LLM endpoint contract against a scripted stub server.
"""

import dataclasses
import json
import time

import numpy as np
import pytest

import llmstub
from acraft import dataio, fscil, reporting
from acraft.attacks import (
    AttackContext,
    PerturbationBudget,
    acraft_attack,
    baseline_poisoner,
    combined_loss,
    cw,
    deepfool,
    fgsm,
    pgd,
)
from acraft.controller import clipped_objective
from acraft.dsl import (
    AttackSpec,
    Instruction,
    crossover,
    interpret,
    mutate,
    parse,
    sample_genesis,
    serialize,
)
from acraft.evaluator import Evaluator
from acraft.fscil import FscilConfig
from acraft.generator import (
    GenerationFailure,
    GeneratorRequest,
    GeneratorResponse,
    llm_generate,
)
from acraft.numerics import LossCombination, MlpModel, forward, init_mlp
from acraft.orchestrator import EvolutionConfig, Orchestrator
from test_controller import run_bandit
from test_numerics import fd_input_grad, loss_value, max_rel_err


def _finish(started, limit, detail):
    elapsed = time.monotonic() - started
    assert elapsed < limit, f"budget exceeded: {elapsed:.2f}s >= {limit}s"
    print(f"PASS {detail} ({elapsed:.2f}s < {limit:.0f}s)")


@pytest.fixture(scope="module")
def desk_task():
    ds = dataio.make_synthetic(40, 50, 32, 6.0, seed=0)
    split = dataio.build_splits(ds, 20, 4, 5, 5, 30, seed=0)
    return ds, split


@pytest.fixture(scope="module")
def tiny_setup():
    ds = dataio.make_synthetic(12, 20, 8, 6.0, seed=1)
    split = dataio.build_splits(ds, 6, 2, 3, 5, 10, seed=1)
    return ds, split, FscilConfig(epochs=30, hidden=(16, 8))


def test_ac1_published_table_arithmetic():
    started = time.monotonic()
    checks = reporting.verify_tables()
    assert len(checks) == 15
    by_key = {(c.table, c.kind, c.name): c for c in checks}

    # every check applies the stated +-0.01 tolerance to its own row
    for c in checks:
        assert c.passed == (abs(c.computed - c.listed) <= 0.01)

    # the five known inconsistencies are flagged, nothing else
    flagged = {key for key, c in by_key.items() if not c.passed}
    assert flagged == {
        ("comparison", "drop", "PGD"),
        ("comparison", "drop", "C&W"),
        ("comparison", "drop", "DeepFool"),
        ("comparison", "drop", "ACraft"),
        ("transfer", "drop", "OrCo"),
    }

    assert by_key[("comparison", "avg", "CLOSER")].computed == pytest.approx(62.78, abs=0.01)
    assert by_key[("transfer", "drop", "Limit")].computed == pytest.approx(48.31, abs=1e-9)
    assert by_key[("transfer", "drop", "Tri-WE")].computed == pytest.approx(51.06, abs=1e-9)
    cw_drop = by_key[("comparison", "drop", "C&W")]
    assert cw_drop.computed == pytest.approx(2.68, abs=1e-9)
    assert cw_drop.listed == 1.68
    acraft_drop = by_key[("comparison", "drop", "ACraft")]
    assert acraft_drop.computed == pytest.approx(45.65, abs=1e-9)
    assert acraft_drop.listed == 58.89
    _finish(started, 1.0, "AC1 table arithmetic: 10 consistent, 5 flagged, tolerance 0.01")


def _preact_margin(model, x):
    """Smallest |pre-activation| over the hidden layers; the fd oracle needs
    every ReLU to stay on one side of its kink under the probe step."""
    a = x
    margin = np.inf
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w + b
        margin = min(margin, float(np.min(np.abs(z))))
        a = np.maximum(z, 0.0)
    return margin


def test_ac2_gradients_match_finite_differences():
    started = time.monotonic()
    rng = np.random.default_rng(2026)
    menu = ((4, 6, 5, 3), (5, 8, 3), (3, 4, 4, 2), (6, 5, 4))
    mixes = (
        LossCombination(),
        LossCombination(0.7, 0.4, 0.0),
        LossCombination(0.6, 0.0, 0.8),
        LossCombination(0.5, -0.6, 0.3),
    )
    checked, worst = 0, 0.0
    while checked < 100:
        widths = menu[checked % len(menu)]
        model = init_mlp(widths, int(rng.integers(0, 1 << 31)))
        batch = int(rng.integers(1, 5))
        x = rng.uniform(-1.0, 1.0, (batch, widths[0]))
        y = rng.integers(0, widths[-1], batch)
        lc = mixes[checked % len(mixes)]
        protos = None
        if lc.w_proto:
            protos = rng.normal(0.0, 1.0, (widths[-1], model.embedding_dim))
        if _preact_margin(model, x) < 1e-3:
            continue  # kink too close for the probe to stay one-sided
        if lc.w_ce_runnerup:
            p = forward(model, x)
            masked = p.copy()
            masked[np.arange(batch), y] = -np.inf
            top2 = np.sort(masked, axis=1)[:, -2:]
            if widths[-1] > 2 and np.min(top2[:, 1] - top2[:, 0]) < 1e-3:
                continue  # runner-up argmax unstable under the probe
        ctx = AttackContext(model=model, prototypes=protos)
        value, grad = combined_loss(x, y, ctx, lc)
        assert value == pytest.approx(loss_value(model, x, y, lc, protos), abs=1e-12)
        fd = fd_input_grad(model, x, y, lc, protos)
        worst = max(worst, max_rel_err(grad, fd))
        checked += 1
    assert worst <= 1e-6
    _finish(started, 10.0, f"AC2 gradient check: 100 cases, max relative error {worst:.2e}")


def test_ac3_perturbation_invariants():
    started = time.monotonic()
    rng = np.random.default_rng(77)
    menu = ((4, 6, 3), (5, 8, 4), (3, 5, 5, 2))
    models = [init_mlp(w, s) for s, w in enumerate(menu)]
    total = 0
    for i in range(1000):
        model = models[i % len(models)]
        d, classes = model.input_dim, model.output_dim
        batch = int(rng.integers(1, 4))
        x = rng.uniform(0.0, 1.0, (batch, d))
        y = rng.integers(0, classes, batch)
        eps = float(rng.uniform(0.01, 0.3))
        kind = i % 3
        if kind == 0:
            adv = fgsm(x, y, model, eps)
        elif kind == 1:
            budget = PerturbationBudget(eps, float(rng.uniform(0.005, 0.15)), int(rng.integers(1, 8)))
            adv = pgd(x, y, model, budget, random_start=bool(i % 2), rng=rng)
        else:
            w_proto = float(rng.uniform(0.0, 1.0)) if i % 4 == 0 else 0.0
            lc = LossCombination(
                float(rng.uniform(0.0, 1.0)), float(rng.uniform(-1.0, 1.0)), w_proto
            )
            protos = (
                rng.normal(0.0, 1.0, (classes, model.embedding_dim)) if w_proto else None
            )
            ctx = AttackContext(model=model, prototypes=protos, rng=rng)
            budget = PerturbationBudget(eps, float(rng.uniform(0.005, 0.1)), int(rng.integers(1, 7)))
            adv = acraft_attack(
                x,
                y,
                ctx,
                budget,
                mu=float(rng.uniform(0.0, 1.0)),
                lambda_rev=float(rng.choice([-1.0, 1.0, 0.5])),
                loss=lc,
                step_direction=int(rng.choice([-1, 1])),
                random_start=bool(i % 2),
                per_step_projection=bool(i % 5 == 0),
            )
        assert adv.shape == x.shape
        assert float(np.max(np.abs(adv - x))) <= eps + 1e-12
        assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0
        total += 1
    assert total == 1000

    strict = 0
    for i in range(40):
        model = models[i % len(models)]
        batch = int(rng.integers(1, 4))
        x = rng.uniform(0.0, 1.0, (batch, model.input_dim))
        y = rng.integers(0, model.output_dim, batch)
        adv = cw(x, y, model, steps=25)
        assert np.all(adv > 0.0) and np.all(adv < 1.0)
        strict += 1
    assert strict == 40
    _finish(started, 30.0, "AC3 invariants: 1000 ball/box invocations, 40 strict-interior")


def test_ac4_closed_form_equivalences():
    started = time.monotonic()
    rng = np.random.default_rng(41)

    # single-step projected ascent with alpha = epsilon is exactly one signed step
    for _ in range(50):
        model = init_mlp((5, 7, 4), int(rng.integers(0, 1 << 31)))
        x = rng.uniform(0.0, 1.0, (3, 5))
        y = rng.integers(0, 4, 3)
        eps = float(rng.uniform(0.01, 0.3))
        one_step = pgd(x, y, model, PerturbationBudget(eps, eps, 1))
        assert float(np.max(np.abs(one_step - fgsm(x, y, model, eps)))) <= 1e-12

    # a single_step document interprets to the same tensor as the built-in
    for _ in range(50):
        model = init_mlp((5, 7, 4), int(rng.integers(0, 1 << 31)))
        x = rng.uniform(0.0, 1.0, (3, 5))
        y = rng.integers(0, 4, 3)
        eps = float(rng.uniform(0.02, 0.25))
        spec = AttackSpec(
            id="single-step-oracle",
            family="single_step",
            budget=PerturbationBudget(eps, 0.02, 5),
            loss=LossCombination(),
            step_direction=1,
            random_start=False,
            per_step_projection=False,
        )
        adv = interpret(spec)(x, y, AttackContext(model=model))
        assert float(np.max(np.abs(adv - fgsm(x, y, model, eps)))) <= 1e-12

    # minimal-perturbation steps land on the analytic binary hyperplane
    worst = 0.0
    for _ in range(100):
        v = rng.normal(0.0, 1.0, 6)
        v *= rng.uniform(0.5, 3.0) / np.linalg.norm(v)
        x = rng.uniform(0.4, 0.6, (1, 6))
        k = int(rng.integers(0, 2))
        r = float(rng.uniform(0.02, 0.12))
        # logits: class 0 fixed at 0, class 1 at v.x + b, boundary distance r
        signed = r * np.linalg.norm(v) * (-1.0 if k == 0 else 1.0)
        b = signed - float(x[0] @ v)
        w = np.zeros((6, 2))
        w[:, 1] = v
        model = MlpModel((6, 2), (w,), (np.array([0.0, b]),))
        moved = deepfool(x, [k], model, overshoot=0.0)
        plain = float(np.linalg.norm(moved - x))
        worst = max(worst, abs(plain - r) / r)
        scaled = deepfool(x, [k], model)  # default overshoot 0.02
        dist = float(np.linalg.norm(scaled - x))
        worst = max(worst, abs(dist - 1.02 * r) / (1.02 * r))
    assert worst <= 0.01
    _finish(started, 30.0, f"AC4 equivalences: fgsm=pgd(T=1), DSL=fgsm, deepfool off by {worst:.2e}")


def test_ac5_desk_attack_effectiveness(desk_task):
    started = time.monotonic()
    ds, split = desk_task
    state = fscil.train_base(split, ds, seed=0)
    clean = fscil.run_protocol(split, ds, None, 0, base_state=state)
    assert clean.accs[0] >= 95.0

    poison = baseline_poisoner("pgd", epsilon=0.1, iterations=10)
    attacked = fscil.run_protocol(split, ds, poison, 0, base_state=state)
    drop = fscil.attack_drop(clean, attacked)
    assert drop >= 10.0
    assert attacked.accs[0] == clean.accs[0]  # poisoning never touches session 0
    _finish(
        started,
        180.0,
        f"AC5 effectiveness: clean base {clean.accs[0]:.2f}%, drop {drop:.2f} points",
    )


def test_ac6_controller_convergence_and_clip_values():
    started = time.monotonic()
    wins, finals = 0, []
    for seed in range(5):
        probs = run_bandit(seed)
        finals.append(float(probs[0]))
        wins += probs[0] >= 0.8
    assert wins >= 4

    assert clipped_objective(2.0, 1.0, 0.2) == 1.2
    assert clipped_objective(0.5, -1.0, 0.2) == -0.8
    assert clipped_objective(1.0, 2.0, 0.2) == 2.0  # in-band ratios pass through
    summary = ", ".join(f"{p:.3f}" for p in finals)
    _finish(started, 60.0, f"AC6 controller: best-arm probabilities [{summary}], {wins}/5")


def test_ac7_mock_evolution_discovers_strong_attack(desk_task):
    started = time.monotonic()
    ds, split = desk_task

    evaluator = Evaluator(ds, split)
    orch = Orchestrator(evaluator, EvolutionConfig(), seed=0)
    result = orch.run()

    best = [rec["best_phi"] for rec in result.log]
    assert all(b >= a for a, b in zip(best, best[1:]))
    assert [h[2] for h in result.history][1:] == best

    state, clean = evaluator.clean_run(orch.protocol_seed)
    attacked = fscil.run_protocol(
        split, ds, interpret(result.spec), orch.protocol_seed, base_state=state
    )
    assert attacked.accs == result.fitness.report.accs
    drop = fscil.attack_drop(clean, attacked)
    fgsm_run = fscil.run_protocol(
        split, ds, baseline_poisoner("fgsm"), orch.protocol_seed, base_state=state
    )
    fgsm_drop = fscil.attack_drop(clean, fgsm_run)
    assert drop >= 25.0
    assert drop >= fgsm_drop

    rerun = Orchestrator(Evaluator(ds, split), EvolutionConfig(), seed=0).run()
    assert json.dumps(list(result.log)) == json.dumps(list(rerun.log))
    _finish(
        started,
        600.0,
        f"AC7 evolution: drop {drop:.2f} (fgsm {fgsm_drop:.2f}), "
        f"{result.generations} generations, rerun byte-identical",
    )


def test_ac8_serialization_round_trips(tiny_setup):
    started = time.monotonic()
    specs = sample_genesis(20260815, 600)
    specs += [mutate(s, 0.3, i) for i, s in enumerate(specs[:200])]
    specs += [crossover((specs[i], specs[-1 - i]), i) for i in range(200)]
    assert len(specs) == 1000
    for spec in specs:
        assert parse(serialize(spec)) == spec

    ds, split, cfg = tiny_setup
    evo = EvolutionConfig(population_size=4, t_max=6, offspring=2, window=50)
    orch = Orchestrator(Evaluator(ds, split, fscil_config=cfg), evo, seed=11)
    orch.initialize()
    for _ in range(3):
        orch.step()
        doc = orch.to_json_dict()
        clone = Orchestrator.from_json_dict(
            json.loads(json.dumps(doc)), Evaluator(ds, split, fscil_config=cfg)
        )
        assert clone.to_json_dict() == doc

    resumed = clone.run()
    full = Orchestrator(Evaluator(ds, split, fscil_config=cfg), evo, seed=11).run()
    assert json.dumps(list(resumed.log)) == json.dumps(list(full.log))
    assert serialize(resumed.spec) == serialize(full.spec)
    assert resumed.history == full.history
    _finish(started, 30.0, "AC8 serialization: 1000 spec identities, resume bitwise")


def test_ac9_llm_endpoint_contract(tiny_setup):
    started = time.monotonic()
    ds, split, cfg = tiny_setup
    canned = AttackSpec(
        id="stub-canned",
        rationale="reverse the combined gradient",
        family="momentum_iterative",
        budget=PerturbationBudget(0.12, 0.02, 8),
        mu=0.85,
        lambda_rev=-1.0,
        loss=LossCombination(0.5, 0.3, 0.2),
    )
    server = llmstub.start(default_reply=llmstub.spec_reply(canned))
    try:
        config = llmstub.endpoint_for(server)
        req = GeneratorRequest("genesis", Instruction("forget_old", "poison the shots"), seed=1)

        out = llm_generate(req, config)
        assert isinstance(out, GeneratorResponse)
        assert out.spec == canned

        server.script = [
            llmstub.chat_body("no fenced block here"),
            llmstub.chat_body("still prose, still no document"),
        ]
        before = len(server.requests)
        failure = llm_generate(req, config)
        assert isinstance(failure, GenerationFailure)
        assert failure.kind == "malformed"
        assert len(server.requests) - before == 2  # exactly one repair round
        assert len(server.requests[-1]["messages"]) == 3
        evaluator = Evaluator(ds, split, fscil_config=cfg)
        report = evaluator.evaluate_outcome(failure, 0)
        assert report.failed
        assert report.phi == evaluator.config.penalty

        server.script = ["timeout", "timeout", "timeout"]
        before = len(server.requests)
        failure = llm_generate(req, config)  # default transport retries: 3
        assert isinstance(failure, GenerationFailure)
        assert failure.kind == "network"
        assert len(server.requests) - before == 3

        alt = dataclasses.replace(canned, id="stub-alt", budget=PerturbationBudget(0.2, 0.03, 6))
        third = dataclasses.replace(canned, id="stub-third", mu=0.5)
        server.script = [
            llmstub.spec_reply(canned),  # init member 1
            llmstub.chat_body("garbled"),  # init member 2 fails...
            llmstub.chat_body("garbled again"),  # ...and its repair fails
            "timeout",  # generation 0, offspring 1: network penalty
            llmstub.spec_reply(alt),  # generation 0, offspring 2
            llmstub.spec_reply(third),  # generation 1, offspring 1
        ]  # generation 1, offspring 2 falls back to the default reply
        before = len(server.requests)
        loop_eval = Evaluator(ds, split, fscil_config=cfg)
        orch = Orchestrator(
            loop_eval,
            EvolutionConfig(population_size=2, t_max=2, offspring=2, window=50),
            endpoint=llmstub.endpoint_for(server, retries=1),
            seed=4,
        )
        result = orch.run()
        assert result.generations == 2
        assert len(result.log) == 2
        assert len(server.requests) - before == 7
        phi_alt = Evaluator(ds, split, fscil_config=cfg).evaluate(alt, orch.protocol_seed).phi
        expected = 0.5 * (loop_eval.config.penalty + phi_alt)
        assert result.log[0]["reward"] == pytest.approx(expected, rel=1e-12)
    finally:
        llmstub.stop(server)
    _finish(started, 30.0, "AC9 endpoint contract: repair, network failure, resilient loop")
