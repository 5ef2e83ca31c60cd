"""End-to-end acceptance suite.

Each test exercises one release criterion at its stated tolerance and prints
one PASS line when it holds (run with ``pytest tests/test_acceptance.py -v -s``
to see them; a pytest FAILED line is the fail signal).
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import replace
from math import comb

import numpy as np
import pytest

from visagg import evalkit
from visagg.backends import ScriptedBackend, SimulatorBackend, SimulatorProfile
from visagg.cli import main
from visagg.core import EngineConfig, MultimodalInput, RewardConfig, normalize_answer
from visagg.engine import EXIT_CONSENSUS, EXIT_FINAL, Engine
from visagg.gspo import curriculum_sample, gradient_check, group_weights
from visagg.grounding import FixtureVerifier
from visagg.rewards import SolveRateTracker, composite, ema_update, r_key, r_len
from visagg.tags import ParseError, ParsedOutput, emit_output, parse_output

MAJORITY_OF_8_AT_06 = sum(comb(8, k) * 0.6**k * 0.4 ** (8 - k) for k in range(4, 9))  # 0.8263296


def _report(number: int, name: str) -> None:
    print(f"ACCEPTANCE {number} ({name}): PASS")


def _sim_engine_factory(profile, verifier, config):
    def engine_for(item):
        backend = SimulatorBackend(
            profile,
            truth=item.truth,
            distractors=item.distractors(),
            real_keys=tuple(sorted(item.gt_keys or ())),
            item_key=item.item_id,
            seed=config.seed,
        )
        return Engine(backend, verifier, config)

    return engine_for


def test_acceptance_1_format_round_trip_and_fuzz():
    started = time.perf_counter()
    text_alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,:;!?()-_éßñ中✓"
    key_alphabet = "abcdefghijklmnopqrstuvwxyz0123456789-_ "
    rng = random.Random(20251)

    def rand_text(alphabet, lo, hi):
        while True:
            s = "".join(rng.choice(alphabet) for _ in range(rng.randint(lo, hi))).strip()
            if s:
                return s

    for _ in range(1000):
        think = rand_text(text_alphabet, 1, 60)
        answer = rand_text(text_alphabet, 1, 20)
        keys = None
        if rng.random() < 0.8:
            keys = {rand_text(key_alphabet, 1, 12) for _ in range(rng.randint(0, 5))}
        parsed = parse_output(emit_output(think, keys, answer))
        assert parsed.think == think
        assert parsed.answer == answer
        if keys is None:
            assert parsed.visual_keys is None
        else:
            assert set(parsed.visual_keys) == {k.casefold() for k in keys}

    fragments = [
        "<think>", "</think>", "<answer>", "</answer>", "<visual_keys>", "</visual_keys>",
        "<visual_key>", "</visual_key>", "<final_answer>", "[", "]", '"', "'", ",", "",
    ]
    for _ in range(10_000):
        parts = []
        for _ in range(rng.randint(0, 10)):
            if rng.random() < 0.5:
                parts.append(rng.choice(fragments))
            else:
                parts.append("".join(chr(rng.randint(1, 0xFFF)) for _ in range(rng.randint(0, 8))))
        blob = "".join(parts)
        try:
            result = parse_output(blob, require_keys=rng.random() < 0.5)
            assert isinstance(result, ParsedOutput)
        except ParseError:
            pass

    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"format suite took {elapsed:.2f}s"
    _report(1, "format round-trip and fuzz")


def test_acceptance_2_reward_exactness_against_brute_force():
    # Independent evaluators, written from the formulas rather than the
    # library code (explicit loops, no shared helpers).
    def oracle_key(keys, gt, alpha, eps):
        kf = {k.casefold() for k in keys}
        gf = {g.casefold() for g in gt}
        hits = sum(1 for k in kf if k in gf)
        return (1 - alpha) * (hits / (len(gf) + eps)) + alpha * (hits / (len(kf) + eps))

    def oracle_len(n_tok, p, beta, j):
        floor = 1.0 / j
        rate = p if p > floor else floor
        return -(beta * n_tok * rate)

    def oracle_ema(p0, observations, gamma):
        cur = p0
        for p in observations:
            cur = gamma * cur + (1 - gamma) * p
        return cur

    pool = ["van", "lady", "mug", "table", "tree", "dog", "cart", "sign"]
    rng = np.random.default_rng(424242)
    for _ in range(10_000):
        keys = set(rng.choice(pool, size=rng.integers(0, 6), replace=False))
        gt = set(rng.choice(pool, size=rng.integers(0, 6), replace=False))
        alpha = float(rng.uniform(0, 1))
        eps = float(rng.uniform(1e-9, 1e-2))
        beta = float(rng.uniform(0, 0.01))
        j = int(rng.integers(1, 9))
        n_tok = int(rng.integers(0, 400))
        p_tilde = float(rng.uniform(0, 1))
        gamma = float(rng.uniform(0, 0.999))

        assert abs(r_key(keys, gt, alpha, eps) - oracle_key(keys, gt, alpha, eps)) <= 1e-9
        assert abs(r_len(n_tok, p_tilde, beta, j) - oracle_len(n_tok, p_tilde, beta, j)) <= 1e-9

        observations = [float(v) for v in rng.uniform(0, 1, size=rng.integers(1, 5))]
        tracker = SolveRateTracker(current=p_tilde, gamma=gamma, initialized=True)
        for p in observations:
            tracker = ema_update(tracker, p)
        assert abs(tracker.current - oracle_ema(p_tilde, observations, gamma)) <= 1e-9

        config = RewardConfig(
            w_acc=float(rng.uniform(0.2, 2.0)),
            w_key=float(rng.uniform(0.05, 1.0)),
            alpha=alpha,
            epsilon=eps,
            beta=max(beta, 1e-9) if beta == 0 else beta,
            gamma=gamma,
            j_rollouts=j,
        )
        truth = "yes"
        answer = "yes" if rng.random() < 0.5 else "no"
        think = " ".join(["t"] * n_tok)
        state = SolveRateTracker(current=p_tilde, gamma=gamma, initialized=True)
        breakdown = composite(answer, keys, think, truth, gt, state, config)
        expected = (
            config.w_acc * (1.0 if normalize_answer(answer) == normalize_answer(truth) else 0.0)
            + config.w_key * oracle_key(keys, gt, alpha, eps)
            + oracle_len(n_tok, p_tilde, config.beta, j)
        )
        assert abs(breakdown.total - expected) <= 1e-9

    # Tagged edge cases.
    assert r_key({"a", "b"}, {"a", "b"}, 0.5, 1e-8) == pytest.approx(0.999999995, abs=1e-12)
    assert r_key(set(), {"a"}, 0.5, 1e-8) == 0.0
    assert r_len(100, 0.0, 0.001, 4) == pytest.approx(-0.025, abs=1e-15)  # floor active
    assert r_len(0, 0.7, 0.001, 4) == 0.0
    assert ema_update(SolveRateTracker(gamma=0.9), 0.3).current == 0.3
    _report(2, "reward exactness vs brute force")


def test_acceptance_3_gradient_check_and_weight_properties():
    started = time.perf_counter()
    report = gradient_check(seed=0, instances=100, h=1e-5)
    assert report.max_rel_error <= 1e-4, f"max rel error {report.max_rel_error:.3e}"

    rng = np.random.default_rng(1)
    for _ in range(200):
        j = int(rng.integers(2, 9))
        lam = float(rng.choice([0.25, 0.5, 1.0, 2.0, 4.0]))
        equal = group_weights([float(rng.normal())] * j, lam)
        assert np.abs(equal - 1.0 / j).max() <= 1e-12
        rewards = rng.normal(scale=2.0, size=j)
        shift = float(rng.uniform(-5, 5))
        assert np.abs(
            group_weights(rewards, lam) - group_weights(rewards + shift, lam)
        ).max() <= 1e-12

    elapsed = time.perf_counter() - started
    assert elapsed < 30.0, f"gradient suite took {elapsed:.2f}s"
    _report(3, "gradient check and weight properties")


def test_acceptance_4_control_flow_call_counts():
    x = MultimodalInput(media_refs=("img://1",), question="Is there a van?")
    unanimous = ScriptedBackend(rules=[("^init", "<think>r</think><answer>yes</answer>")])
    trace = Engine(unanimous, None, EngineConfig(seed=0)).run(x, item_key="k")
    assert trace.backend_calls == 8
    assert trace.exit_reason == EXIT_CONSENSUS

    divergent = ScriptedBackend(
        rules=[
            ("^init:i=1$", "<think>r</think><answer>A</answer>"),
            ("^init", "<think>r</think><answer>B</answer>"),
            (r"^agg:t=\d+,i=1$", "<think>r</think><answer>A</answer>"),
            ("^agg", "<think>r</think><answer>B</answer>"),
            ("^final", "<think>r</think><answer>A</answer>"),
        ]
    )
    trace = Engine(divergent, None, EngineConfig(n_population=8, t_iterations=3, seed=0)).run(
        x, item_key="k"
    )
    assert trace.backend_calls == 25, f"expected 25 calls, got {trace.backend_calls}"
    assert trace.exit_reason == EXIT_FINAL
    _report(4, "control-flow call counts")


def test_acceptance_5_aggregation_gain_matches_analytic_oracle():
    started = time.perf_counter()
    items = evalkit.synthesize_items(500, seed=6)
    verifier = FixtureVerifier(evalkit.fixture_scores(items))
    profile = SimulatorProfile(p_correct=0.6, aggregation_rule="majority_of_subset")
    config = EngineConfig(n_population=8, t_iterations=3, m_subset=4, seed=10006)
    baseline_config = replace(config, n_population=1, t_iterations=1, m_subset=1)

    baseline = evalkit.run_items(items, _sim_engine_factory(profile, verifier, baseline_config))
    method = evalkit.run_items(items, _sim_engine_factory(profile, verifier, config))

    acc_baseline = evalkit.accuracy(baseline)
    acc_method = evalkit.accuracy(method)
    assert abs(acc_baseline - 0.60) <= 0.04, f"baseline {acc_baseline:.4f}"
    assert abs(acc_method - MAJORITY_OF_8_AT_06) <= 0.03, f"method {acc_method:.4f}"

    deltas = evalkit.paired_deltas(method, baseline)
    lo, hi = evalkit.bootstrap_ci(deltas, iterations=10_000, level=0.95, seed=10006)
    assert not (lo <= 0.0 <= hi), f"delta CI ({lo:.4f}, {hi:.4f}) must exclude zero"

    elapsed = time.perf_counter() - started
    assert elapsed < 60.0, f"aggregation study took {elapsed:.2f}s"
    _report(5, "aggregation gain vs analytic majority oracle")


def test_acceptance_6_grounding_reduces_unverified_objects():
    items = evalkit.synthesize_items(200, seed=77)
    table = evalkit.fixture_scores(items)
    profile = SimulatorProfile(p_correct=0.6, hallucination_rate=0.3)
    config = EngineConfig(seed=77)

    def unverified_total(grounding_enabled: bool) -> int:
        verifier = FixtureVerifier(table)
        total = 0
        for item in items:
            backend = SimulatorBackend(
                profile, item.truth, item.distractors(),
                tuple(sorted(item.gt_keys or ())), item.item_id, config.seed,
            )
            engine = Engine(backend, verifier, config, grounding_enabled=grounding_enabled)
            trace = engine.run(item.input, item_key=item.item_id)
            keys = sorted(trace.final.visual_keys or ())
            scores = verifier.score_phrases(item.input.media_refs[0], keys)
            total += sum(1 for s in scores if s <= config.grounding_threshold)
        return total

    grounded = unverified_total(True)
    ungrounded = unverified_total(False)
    assert grounded < ungrounded, f"grounded={grounded} ungrounded={ungrounded}"
    _report(6, "grounding ablation direction")


def test_acceptance_7_bootstrap_correctness():
    # Percentile endpoints equal the sorted-array nearest-rank oracle.
    rng = np.random.default_rng(123)
    deltas = rng.normal(0.05, 0.3, size=400)
    lo, hi = evalkit.bootstrap_ci(deltas, iterations=10_000, level=0.95, seed=99)
    oracle_rng = np.random.default_rng(99)
    idx = oracle_rng.integers(0, deltas.size, size=(10_000, deltas.size))
    means = deltas[idx].mean(axis=1)
    assert lo == np.quantile(means, 0.025, method="inverted_cdf")
    assert hi == np.quantile(means, 0.975, method="inverted_cdf")

    # Zero-variance deltas give a degenerate interval.
    assert evalkit.bootstrap_ci([0.25] * 50, iterations=1000, seed=1) == (0.25, 0.25)

    # Zero-true-effect deltas are flagged significant in at most 10% of trials.
    mc_rng = np.random.default_rng(314159)
    flagged = 0
    for _ in range(200):
        sample = mc_rng.choice([-1.0, 0.0, 1.0], p=[0.15, 0.7, 0.15], size=500)
        lo, hi = evalkit.bootstrap_ci(
            sample, iterations=2000, level=0.95, seed=int(mc_rng.integers(2**31))
        )
        flagged += not (lo <= 0.0 <= hi)
    assert flagged <= 20, f"{flagged}/200 zero-effect trials flagged significant"
    _report(7, "bootstrap percentile correctness")


def test_acceptance_8_curriculum_mixing_ratios():
    rng = np.random.default_rng(8)
    teachers = [("teacher", i) for i in range(40)]
    onpolicy = [("onpolicy", i) for i in range(40)]
    expected = {"early": 0.75, "middle": 0.50, "late": 0.25}
    for stage, teacher_fraction in expected.items():
        teacher_drawn = 0
        total = 0
        for _ in range(10_000):
            sample = curriculum_sample(stage, teachers, onpolicy, rng)
            teacher_drawn += sum(1 for kind, _ in sample if kind == "teacher")
            total += len(sample)
        observed = teacher_drawn / total
        assert abs(observed - teacher_fraction) <= 0.02, f"{stage}: {observed:.4f}"
    _report(8, "curriculum mixing ratios")


def test_acceptance_9_cli_determinism(tmp_path, capsys):
    dataset = tmp_path / "data.jsonl"
    items = evalkit.synthesize_items(40, seed=12)
    rows = [
        {
            "item_id": item.item_id,
            "media": list(item.input.media_refs),
            "question": item.input.question,
            "answer": item.truth,
            "choices": list(item.choices),
            "gt_keys": sorted(item.gt_keys),
        }
        for item in items
    ]
    dataset.write_text("\n".join(json.dumps(r) for r in rows))

    args = ["run", "--dataset", str(dataset), "--seed", "21", "--p-correct", "0.7",
            "--hallucination-rate", "0.2"]
    out1, out2 = tmp_path / "r1.jsonl", tmp_path / "r2.jsonl"
    assert main(args + ["--out", str(out1)]) == 0
    summary1 = capsys.readouterr().out
    assert main(args + ["--out", str(out2)]) == 0
    summary2 = capsys.readouterr().out
    assert out1.read_bytes() == out2.read_bytes()
    assert summary1 == summary2

    assert main(["score", "--records", str(out1), "--baseline-records", str(out2),
                 "--iterations", "1000", "--seed", "3"]) == 0
    score1 = capsys.readouterr().out
    assert main(["score", "--records", str(out1), "--baseline-records", str(out2),
                 "--iterations", "1000", "--seed", "3"]) == 0
    score2 = capsys.readouterr().out
    assert score1 == score2
    _report(9, "CLI determinism")
