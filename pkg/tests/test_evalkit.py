from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visagg.evalkit import (
    BadLevel,
    EmptySet,
    RunRecord,
    SchemaError,
    accuracy,
    bootstrap_ci,
    bootstrap_ci_unpaired,
    fixture_scores,
    load_dataset,
    load_dataset_lenient,
    load_records,
    make_record,
    paired_deltas,
    persist_records,
    summarize,
    synthesize_items,
)
from visagg.rewards import RewardBreakdown, RewardInputs

GQA_STYLE_LINE = {
    "question_id": "04242732",
    "image": "3258.jpg",
    "q": "Are there vans to the left of the person that wears a shirt?",
    "a": "yes",
    "full_answer": "Yes, there is a van to the left of the lady.",
    "candidates": {
        "1": '<think>...</think>\n<visual_key>["van"]</visual_key>\n<final_answer>yes</final_answer>',
        "2": '<think>...</think>\n<visual_key>["van"]</visual_key>\n<final_answer>yes</final_answer>',
        "3": '<think>...</think>\n<visual_key>["lady"]</visual_key>\n<final_answer>no</final_answer>',
        "4": '<think>...</think>\n<visual_key>["van"]</visual_key>\n<final_answer>yes</final_answer>',
    },
}


def _record(item_id: str, correct: bool, calls: int = 3) -> RunRecord:
    return RunRecord(
        item_id=item_id,
        trace={"backend_calls": calls, "exit_reason": "final_aggregation"},
        predicted="yes" if correct else "no",
        correct=correct,
    )


class TestLoadDataset:
    def test_instance_schema(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text(json.dumps(GQA_STYLE_LINE) + "\n")
        items = load_dataset(str(path))
        assert len(items) == 1
        item = items[0]
        assert item.item_id == "04242732"
        assert item.truth == "yes"
        assert item.input.media_refs == ("3258.jpg",)
        assert len(item.candidates) == 4

    def test_generic_schema(self, tmp_path):
        path = tmp_path / "data.jsonl"
        row = {
            "item_id": "x1",
            "media": ["f1.jpg", "f2.jpg"],
            "question": "what happens?",
            "answer": "B",
            "choices": ["A", "B"],
            "gt_keys": ["Ladder", "ladder", "crate"],
        }
        path.write_text(json.dumps(row) + "\n")
        item = load_dataset(str(path))[0]
        assert item.input.media_type == "video"
        assert item.gt_keys == frozenset({"ladder", "crate"})
        assert item.distractors() == ("A",)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text("")
        assert load_dataset(str(path)) == []

    def test_missing_answer_field(self, tmp_path):
        path = tmp_path / "data.jsonl"
        bad = dict(GQA_STYLE_LINE)
        del bad["a"]
        path.write_text(json.dumps(bad) + "\n")
        with pytest.raises(SchemaError) as err:
            load_dataset(str(path))
        assert err.value.line_no == 1

    def test_lenient_collects_errors(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text(json.dumps(GQA_STYLE_LINE) + "\nnot json\n")
        items, errors = load_dataset_lenient(str(path))
        assert len(items) == 1
        assert len(errors) == 1
        assert errors[0].line_no == 2

    def test_truth_must_be_a_choice(self, tmp_path):
        path = tmp_path / "data.jsonl"
        row = {"item_id": "x", "media": "m", "question": "q", "answer": "zzz", "choices": ["A", "B"]}
        path.write_text(json.dumps(row) + "\n")
        with pytest.raises(SchemaError):
            load_dataset(str(path))

    def test_missing_file_raises_os_error(self):
        with pytest.raises(OSError):
            load_dataset("/nonexistent/nope.jsonl")


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([_record("a", True), _record("b", True)]) == 1.0

    def test_three_of_four(self):
        records = [_record(str(i), i != 0) for i in range(4)]
        assert accuracy(records) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(EmptySet):
            accuracy([])

    @given(st.lists(st.booleans(), min_size=1, max_size=50))
    def test_matches_mean_of_indicators(self, flags):
        records = [_record(str(i), flag) for i, flag in enumerate(flags)]
        assert accuracy(records) == pytest.approx(sum(flags) / len(flags))


class TestBootstrap:
    def test_zero_variance_degenerate(self):
        lo, hi = bootstrap_ci([1.0] * 20, iterations=1000, seed=0)
        assert (lo, hi) == (1.0, 1.0)

    def test_matches_sorted_array_quantile_oracle(self):
        rng = np.random.default_rng(123)
        deltas = rng.normal(0.05, 0.3, size=200)
        lo, hi = bootstrap_ci(deltas, iterations=10_000, level=0.95, seed=99)
        # Independent oracle: rebuild the resample means and use numpy's
        # nearest-rank quantile on the sorted array.
        oracle_rng = np.random.default_rng(99)
        idx = oracle_rng.integers(0, deltas.size, size=(10_000, deltas.size))
        means = deltas[idx].mean(axis=1)
        oracle_lo = np.quantile(means, 0.025, method="inverted_cdf")
        oracle_hi = np.quantile(means, 0.975, method="inverted_cdf")
        assert lo == oracle_lo
        assert hi == oracle_hi

    def test_deterministic_under_seed(self):
        deltas = list(np.random.default_rng(5).normal(size=100))
        assert bootstrap_ci(deltas, seed=7) == bootstrap_ci(deltas, seed=7)

    def test_lo_never_exceeds_hi(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            deltas = rng.normal(size=rng.integers(2, 50))
            lo, hi = bootstrap_ci(deltas, iterations=1000, seed=3)
            assert lo <= hi

    def test_wider_level_nests(self):
        deltas = list(np.random.default_rng(2).normal(size=150))
        lo95, hi95 = bootstrap_ci(deltas, iterations=2000, level=0.95, seed=11)
        lo99, hi99 = bootstrap_ci(deltas, iterations=2000, level=0.99, seed=11)
        assert lo99 <= lo95
        assert hi99 >= hi95

    def test_bad_level(self):
        with pytest.raises(BadLevel):
            bootstrap_ci([1.0, 2.0], level=1.5)

    def test_empty(self):
        with pytest.raises(EmptySet):
            bootstrap_ci([])

    def test_identical_records_give_zero_ci(self):
        records = [_record(str(i), i % 2 == 0) for i in range(30)]
        deltas = paired_deltas(records, records)
        assert bootstrap_ci(deltas, iterations=1000, seed=0) == (0.0, 0.0)

    def test_unpaired_variant(self):
        rng = np.random.default_rng(4)
        a = rng.normal(1.0, 0.1, size=200)
        b = rng.normal(0.0, 0.1, size=200)
        lo, hi = bootstrap_ci_unpaired(a, b, iterations=2000, seed=0)
        assert lo > 0.8
        assert hi < 1.2

    def test_paired_requires_matching_ids(self):
        with pytest.raises(SchemaError):
            paired_deltas([_record("a", True)], [_record("b", True)])


class TestRecords:
    def _breakdown(self) -> RewardBreakdown:
        return RewardBreakdown(
            r_acc=1,
            r_key=0.75,
            r_len=-0.05,
            total=1.2125,
            inputs=RewardInputs(
                answer="yes", truth="yes", keys=("a",), gt_keys=("a", "b"), n_tok=100, p_tilde=0.5
            ),
        )

    def test_round_trip(self, tmp_path):
        path = tmp_path / "records.jsonl"
        records = [
            RunRecord(item_id="a", trace={"backend_calls": 9}, predicted="yes", correct=True,
                      rewards=self._breakdown()),
            _record("b", False),
        ]
        persist_records(str(path), records)
        assert load_records(str(path)) == records

    def test_append_preserves_earlier_lines(self, tmp_path):
        path = tmp_path / "records.jsonl"
        persist_records(str(path), [_record("a", True)])
        persist_records(str(path), [_record("b", False)], append=True)
        loaded = load_records(str(path))
        assert [r.item_id for r in loaded] == ["a", "b"]

    def test_corrupt_line(self, tmp_path):
        path = tmp_path / "records.jsonl"
        path.write_text('{"item_id": "a"}\n')
        with pytest.raises(SchemaError) as err:
            load_records(str(path))
        assert err.value.line_no == 1

    def test_accuracy_survives_round_trip(self, tmp_path):
        path = tmp_path / "records.jsonl"
        records = [_record(str(i), i % 3 != 0) for i in range(30)]
        persist_records(str(path), records)
        assert accuracy(load_records(str(path))) == accuracy(records)

    def test_make_record_derives_correct(self):
        item = synthesize_items(1, seed=0)[0]
        record = make_record(item, {"backend_calls": 1}, item.truth.upper() + ".")
        assert record.correct

    @settings(max_examples=40)
    @given(
        flags=st.lists(st.booleans(), min_size=1, max_size=20),
        with_rewards=st.booleans(),
    )
    def test_round_trip_property(self, flags, with_rewards):
        import tempfile

        records = [
            RunRecord(
                item_id=f"i{i}",
                trace={"backend_calls": i, "exit_reason": "consensus_at_t"},
                predicted="p",
                correct=flag,
                rewards=self._breakdown() if with_rewards else None,
            )
            for i, flag in enumerate(flags)
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/records.jsonl"
            persist_records(path, records)
            assert load_records(path) == records


class TestSummarize:
    def test_fields_with_baseline(self):
        method = [_record(str(i), i < 8) for i in range(10)]
        base = [_record(str(i), i < 5) for i in range(10)]
        summary = summarize(method, base, iterations=1000, seed=0)
        assert summary["accuracy"] == 0.8
        assert summary["baseline_accuracy"] == 0.5
        assert summary["delta"] == pytest.approx(0.3)
        assert summary["n_items"] == 10
        assert summary["backend_calls_total"] == 30
        assert isinstance(summary["significant"], bool)

    def test_fields_without_baseline(self):
        summary = summarize([_record("a", True)])
        assert summary["baseline_accuracy"] is None
        assert summary["ci_lo"] is None


class TestRunItems:
    def _engine_for(self, item):
        from visagg.backends import SimulatorBackend, SimulatorProfile
        from visagg.core import EngineConfig
        from visagg.engine import Engine

        backend = SimulatorBackend(
            SimulatorProfile(p_correct=1.0), item.truth, item.distractors(),
            tuple(sorted(item.gt_keys or ())), item.item_id, seed=0,
        )
        return Engine(backend, None, EngineConfig(seed=0))

    def test_parallel_matches_serial_order(self):
        from visagg.evalkit import run_items

        items = synthesize_items(6, seed=2)
        serial = run_items(items, self._engine_for, jobs=1)
        parallel = run_items(items, self._engine_for, jobs=3)
        assert serial == parallel

    def test_interrupt_carries_completed_prefix(self):
        from visagg.evalkit import RunInterrupted, run_items

        items = synthesize_items(5, seed=2)
        calls = {"n": 0}
        real = self._engine_for

        def flaky(item):
            if calls["n"] == 3:
                raise KeyboardInterrupt
            calls["n"] += 1
            return real(item)

        with pytest.raises(RunInterrupted) as err:
            run_items(items, flaky, jobs=1)
        assert [r.item_id for r in err.value.completed] == [i.item_id for i in items[:3]]


class TestSynthesizeItems:
    def test_deterministic(self):
        a = synthesize_items(20, seed=4)
        b = synthesize_items(20, seed=4)
        assert a == b

    def test_choice_mix(self):
        items = synthesize_items(400, seed=4)
        fours = sum(1 for item in items if len(item.choices) == 4)
        assert 0.3 <= fours / len(items) <= 0.5

    def test_truth_is_a_choice(self):
        for item in synthesize_items(50, seed=9):
            assert item.truth in item.choices
            assert len(item.gt_keys) == 2

    def test_fixture_scores_cover_gt_keys(self):
        items = synthesize_items(5, seed=1)
        table = fixture_scores(items, score=0.9)
        item = items[0]
        for key in item.gt_keys:
            assert table[(item.input.media_refs[0], key)] == 0.9
