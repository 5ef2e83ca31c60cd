"""Command-line surface for batch runs, simulator sweeps, scoring, and checks.

stdout carries machine-readable results only; logs go to stderr. Exit codes:
0 success, 1 check or run failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import evalkit, gspo
from .backends import (
    AGGREGATION_RULES,
    HttpChatBackend,
    ScriptedBackend,
    SimulatorBackend,
    SimulatorProfile,
)
from .core import ConfigError, EngineConfig, VisaggError, load_config
from .engine import Engine
from .evalkit import DataError, load_dataset, load_records, persist_records, run_items, summarize
from .grounding import FixtureVerifier, GroundingError, HttpVerifier

logger = logging.getLogger(__name__)


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _fail(exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "detail": str(exc)}) + "\n")


def _engine_config(args) -> EngineConfig:
    if getattr(args, "config", None):
        config, _ = load_config(args.config)
    else:
        config = EngineConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "baseline", False):
        overrides.update(n_population=1, t_iterations=1, m_subset=1)
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    return config


def _profile(args) -> SimulatorProfile:
    return SimulatorProfile(
        p_correct=args.p_correct,
        aggregation_rule=args.rule,
        hallucination_rate=args.hallucination_rate,
    )


def _verifier_and_items(args, items):
    if getattr(args, "verifier_url", None):
        return HttpVerifier(args.verifier_url)
    if getattr(args, "verifier_fixture", None):
        return FixtureVerifier.from_jsonl(args.verifier_fixture)
    # Simulator runs default to a fixture that verifies each item's
    # annotated objects and nothing else.
    return FixtureVerifier(evalkit.fixture_scores(items))


def cmd_run(args) -> int:
    config = _engine_config(args)
    items = load_dataset(args.dataset)
    if not items:
        raise DataError("dataset is empty")

    grounding = not args.no_grounding
    if args.backend_url:
        backend = HttpChatBackend(args.backend_url, model=args.model)
        verifier = _verifier_and_items(args, items)
        engine = Engine(
            backend,
            verifier,
            config,
            grounding_enabled=grounding,
            extraction_backend=backend,
        )
        engine_for = lambda item: engine  # noqa: E731
    elif args.scripted_fixture:
        backend = ScriptedBackend.from_fixture(args.scripted_fixture)
        verifier = _verifier_and_items(args, items)
        engine = Engine(backend, verifier, config, grounding_enabled=grounding)
        engine_for = lambda item: engine  # noqa: E731
    else:
        profile = _profile(args)
        verifier = _verifier_and_items(args, items)

        def engine_for(item):
            backend = SimulatorBackend(
                profile,
                truth=item.truth,
                distractors=item.distractors(),
                real_keys=tuple(sorted(item.gt_keys or ())),
                item_key=item.item_id,
                seed=config.seed,
            )
            return Engine(backend, verifier, config, grounding_enabled=grounding)

    try:
        records = run_items(items, engine_for, jobs=args.jobs)
    except evalkit.RunInterrupted as exc:
        # Flush whatever finished so partial work is never lost.
        persist_records(args.out, exc.completed)
        logger.warning("interrupted; flushed %d completed records", len(exc.completed))
        return 1
    persist_records(args.out, records)
    _emit(summarize(records))
    return 0


def cmd_simulate(args) -> int:
    profile = _profile(args)
    base = _engine_config(args)
    items = evalkit.synthesize_items(args.n_items, seed=base.seed)
    verifier = FixtureVerifier(evalkit.fixture_scores(items))
    n_grid = [int(v) for v in args.n_grid.split(",")]
    t_grid = [int(v) for v in args.t_grid.split(",")]

    from dataclasses import replace

    rows = []
    for n in n_grid:
        for t in t_grid:
            config = replace(base, n_population=n, t_iterations=t, m_subset=min(base.m_subset, n))

            def engine_for(item, _config=config):
                backend = SimulatorBackend(
                    profile,
                    truth=item.truth,
                    distractors=item.distractors(),
                    real_keys=tuple(sorted(item.gt_keys or ())),
                    item_key=item.item_id,
                    seed=_config.seed,
                )
                return Engine(backend, verifier, _config)

            records = run_items(items, engine_for, jobs=args.jobs)
            calls = [r.trace["backend_calls"] for r in records]
            rows.append(
                {
                    "n": n,
                    "t": t,
                    "accuracy": evalkit.accuracy(records),
                    "backend_calls_mean": sum(calls) / len(calls),
                }
            )
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["n", "t", "accuracy", "backend_calls_mean"])
        writer.writeheader()
        writer.writerows(rows)
    _emit({"cells": len(rows), "out": args.out})
    return 0


def cmd_score(args) -> int:
    records = load_records(args.records)
    baseline = load_records(args.baseline_records) if args.baseline_records else None
    summary = summarize(
        records,
        baseline,
        iterations=args.iterations,
        level=args.level,
        seed=args.seed,
        paired=not args.unpaired,
    )
    _emit(summary)
    return 0


def cmd_gspo_check(args) -> int:
    report = gspo.gradient_check(seed=args.seed, instances=args.instances, h=args.h)
    rng = np.random.default_rng(args.seed)
    uniform_err = 0.0
    shift_err = 0.0
    for _ in range(args.instances):
        j = int(rng.integers(2, 9))
        lam = float(rng.choice([0.5, 1.0, 2.0]))
        equal = gspo.group_weights([1.25] * j, lam)
        uniform_err = max(uniform_err, float(np.abs(equal - 1.0 / j).max()))
        rewards = rng.normal(scale=2.0, size=j)
        shift = float(rng.uniform(-5, 5))
        base_w = gspo.group_weights(rewards, lam)
        shifted_w = gspo.group_weights(rewards + shift, lam)
        shift_err = max(shift_err, float(np.abs(base_w - shifted_w).max()))
    passed = report.passed and uniform_err <= 1e-12 and shift_err <= 1e-12
    _emit(
        {
            "max_rel_error": report.max_rel_error,
            "instances": report.instances,
            "worst_instance": int(np.argmax(report.errors)),
            "per_instance_errors": list(report.errors),
            "uniform_weight_error": uniform_err,
            "reward_shift_error": shift_err,
            "tolerance": 1e-4,
            "passed": passed,
        }
    )
    return 0 if passed else 1


def cmd_ground_check(args) -> int:
    if args.verifier_url:
        verifier = HttpVerifier(args.verifier_url)
    elif args.fixture:
        verifier = FixtureVerifier.from_jsonl(args.fixture)
    else:
        raise ConfigError("ground-check needs --verifier-url or --fixture")
    pairs = []
    with open(args.phrases_file, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pairs.append((obj["media_ref"], obj["phrase"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"bad phrases line {line_no}: {exc}") from exc
    table = []
    hard_failures = 0
    for media_ref, phrase in pairs:
        row = {"media_ref": media_ref, "phrase": phrase}
        try:
            score = verifier.verify(media_ref, phrase)
            row["score"] = score
            row["verified"] = score > args.threshold
        except GroundingError as exc:
            row["score"] = None
            row["verified"] = False
            row["error"] = str(exc)
            hard_failures += 1
        table.append(row)
    _emit({"threshold": args.threshold, "pairs": table, "hard_failures": hard_failures})
    return 1 if hard_failures else 0


def _add_profile_flags(sub) -> None:
    sub.add_argument("--p-correct", type=float, default=0.6)
    sub.add_argument("--rule", choices=AGGREGATION_RULES, default="majority_of_subset")
    sub.add_argument("--hallucination-rate", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visagg")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="evaluate a dataset with the aggregation engine")
    run.add_argument("--dataset", required=True)
    run.add_argument("--config", help="JSON config file with engine/rewards sections")
    run.add_argument("--out", required=True, help="records JSONL output path")
    run.add_argument("--backend-url", help="chat-completions server base URL")
    run.add_argument("--model", default="default")
    run.add_argument("--scripted-fixture", help="scripted backend JSONL fixture")
    run.add_argument("--verifier-url", help="grounding service base URL")
    run.add_argument("--verifier-fixture", help="verifier score fixture JSONL")
    run.add_argument("--no-grounding", action="store_true", help="skip verification (ablation arm)")
    run.add_argument("--baseline", action="store_true", help="single-sample mode (N=1, T=1)")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--seed", type=int)
    _add_profile_flags(run)
    run.set_defaults(func=cmd_run)

    sim = commands.add_parser("simulate", help="sweep population size and iterations")
    sim.add_argument("--out", required=True, help="grid CSV output path")
    sim.add_argument("--n-items", type=int, default=50)
    sim.add_argument("--n-grid", default="4,6,8,10,12,14,16")
    sim.add_argument("--t-grid", default="1,2,3,4")
    sim.add_argument("--config")
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--seed", type=int)
    _add_profile_flags(sim)
    sim.set_defaults(func=cmd_simulate)

    score = commands.add_parser("score", help="accuracy and paired bootstrap CI")
    score.add_argument("--records", required=True)
    score.add_argument("--baseline-records")
    score.add_argument("--iterations", type=int, default=10_000)
    score.add_argument("--level", type=float, default=0.95)
    score.add_argument("--seed", type=int, default=0)
    score.add_argument("--unpaired", action="store_true")
    score.set_defaults(func=cmd_score)

    check = commands.add_parser("gspo-check", help="gradient and weight property suite")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--instances", type=int, default=100)
    check.add_argument("--h", type=float, default=1e-5)
    check.set_defaults(func=cmd_gspo_check)

    ground = commands.add_parser("ground-check", help="verify phrase/media pairs")
    ground.add_argument("--verifier-url")
    ground.add_argument("--fixture")
    ground.add_argument("--phrases-file", required=True)
    ground.add_argument("--threshold", type=float, default=0.35)
    ground.set_defaults(func=cmd_ground_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        _fail(exc)
        return 2
    except VisaggError as exc:
        _fail(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
