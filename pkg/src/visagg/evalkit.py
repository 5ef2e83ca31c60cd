"""Dataset ingestion, run persistence, accuracy scoring, and bootstrap
confidence intervals, plus the synthetic-item generator behind simulator
studies."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import MultimodalInput, VisaggError
from .rewards import RewardBreakdown, r_acc


class DataError(VisaggError):
    pass


class SchemaError(DataError):
    def __init__(self, line_no: int | None, detail: str):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{detail}")
        self.line_no = line_no
        self.detail = detail


class EmptySet(DataError):
    pass


class BadLevel(DataError):
    pass


# ---------------------------------------------------------------------------
# Items
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalItem:
    """One dataset item: an input, its ground truth, and optional extras.

    ``choices`` constrains the answer space (the truth must normalize into
    it), ``gt_keys`` are annotated evidence objects, and ``candidates`` are
    pre-generated trajectory texts keyed by index when the source file
    carries them.
    """

    item_id: str
    input: MultimodalInput
    truth: str
    choices: tuple[str, ...] | None = None
    gt_keys: frozenset[str] | None = None
    candidates: dict[str, str] | None = None

    def __post_init__(self) -> None:
        from .core import normalize_answer

        if not self.truth:
            raise ValueError("truth must be non-empty")
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))
            normalized = {normalize_answer(c) for c in self.choices}
            if normalize_answer(self.truth) not in normalized:
                raise ValueError("truth does not normalize to any choice")
        if self.gt_keys is not None:
            object.__setattr__(self, "gt_keys", frozenset(k.casefold() for k in self.gt_keys))

    def distractors(self) -> tuple[str, ...]:
        from .core import normalize_answer

        if not self.choices:
            return ()
        want = normalize_answer(self.truth)
        return tuple(c for c in self.choices if normalize_answer(c) != want)


def _item_from_obj(obj: Mapping) -> EvalItem:
    if "question_id" in obj or "q" in obj:
        # Pre-generated instance schema: question_id/image/q/a/full_answer/candidates.
        media = obj["image"]
        refs = tuple(media) if isinstance(media, (list, tuple)) else (str(media),)
        candidates = obj.get("candidates")
        if candidates is not None:
            candidates = {str(k): str(v) for k, v in candidates.items()}
        return EvalItem(
            item_id=str(obj["question_id"]),
            input=MultimodalInput(media_refs=refs, question=obj["q"], media_type="image"),
            truth=str(obj["a"]),
            candidates=candidates,
        )
    # Generic harness schema.
    media = obj["media"]
    refs = tuple(media) if isinstance(media, (list, tuple)) else (str(media),)
    media_type = obj.get("media_type") or ("video" if len(refs) > 1 else "image")
    choices = obj.get("choices")
    gt_keys = obj.get("gt_keys")
    return EvalItem(
        item_id=str(obj["item_id"]),
        input=MultimodalInput(media_refs=refs, question=obj["question"], media_type=media_type),
        truth=str(obj["answer"]),
        choices=tuple(choices) if choices else None,
        gt_keys=frozenset(gt_keys) if gt_keys else None,
    )


def load_dataset_lenient(path: str) -> tuple[list[EvalItem], list[SchemaError]]:
    """Load a JSONL dataset, collecting (not raising) per-line schema errors."""
    items: list[EvalItem] = []
    errors: list[SchemaError] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("line is not a JSON object")
                items.append(_item_from_obj(obj))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, VisaggError) as exc:
                errors.append(SchemaError(line_no, str(exc)))
    return items, errors


def load_dataset(path: str) -> list[EvalItem]:
    """Strict JSONL loading: the first malformed line raises SchemaError.

    Accepts either the pre-generated instance schema
    (question_id/image/q/a/full_answer/candidates) or the generic schema
    (item_id/media/question/answer/choices/gt_keys).
    """
    items, errors = load_dataset_lenient(path)
    if errors:
        raise errors[0]
    return items


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    """One item's outcome: trace digest, prediction, correctness, rewards."""

    item_id: str
    trace: dict
    predicted: str
    correct: bool
    rewards: RewardBreakdown | None = None

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "trace": self.trace,
            "predicted": self.predicted,
            "correct": self.correct,
            "rewards": self.rewards.to_dict() if self.rewards is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        rewards = d.get("rewards")
        return cls(
            item_id=str(d["item_id"]),
            trace=dict(d["trace"]),
            predicted=str(d["predicted"]),
            correct=bool(d["correct"]),
            rewards=RewardBreakdown.from_dict(rewards) if rewards is not None else None,
        )


def make_record(item: EvalItem, trace_summary: dict, predicted: str,
                rewards: RewardBreakdown | None = None) -> RunRecord:
    """Build a record with correctness derived from exact match, never passed in."""
    return RunRecord(
        item_id=item.item_id,
        trace=trace_summary,
        predicted=predicted,
        correct=bool(r_acc(predicted, item.truth)),
        rewards=rewards,
    )


def persist_records(path: str, records: Iterable[RunRecord], append: bool = False) -> None:
    """Write records as one sorted-key JSON object per line (byte-stable)."""
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def load_records(path: str) -> list[RunRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(RunRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(line_no, f"bad record: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def accuracy(records: Sequence[RunRecord]) -> float:
    if not records:
        raise EmptySet("accuracy needs at least one record")
    return sum(r.correct for r in records) / len(records)


def _nearest_rank_index(q: float, n: int) -> int:
    """0-based index of the nearest-rank quantile in a sorted array of size n.

    The small tolerance keeps q*n products like 0.025*10000 from rounding up
    past the exact rank."""
    return min(max(math.ceil(q * n - 1e-12), 1), n) - 1


def bootstrap_ci(
    deltas: Sequence[float],
    iterations: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap CI for the mean of per-item paired deltas.

    Items are resampled with replacement ``iterations`` times; the interval
    endpoints are the nearest-rank quantiles of the sorted resampled means at
    (1-level)/2 and 1-(1-level)/2. Deterministic given the seed. A delta's
    sign convention is method minus baseline, so significance is "the
    interval excludes zero".
    """
    data = np.asarray(list(deltas), dtype=float)
    if data.size == 0:
        raise EmptySet("bootstrap needs at least one delta")
    if not 0 < level < 1:
        raise BadLevel(f"level must be in (0, 1), got {level}")
    if iterations < 1:
        raise BadLevel("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.size, size=(iterations, data.size))
    means = np.sort(data[idx].mean(axis=1))
    lo_q = (1 - level) / 2
    lo = means[_nearest_rank_index(lo_q, iterations)]
    hi = means[_nearest_rank_index(1 - lo_q, iterations)]
    return float(lo), float(hi)


def bootstrap_ci_unpaired(
    method_values: Sequence[float],
    baseline_values: Sequence[float],
    iterations: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Unpaired variant: each group is resampled independently and the
    interval covers the difference of resampled means."""
    a = np.asarray(list(method_values), dtype=float)
    b = np.asarray(list(baseline_values), dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptySet("bootstrap needs non-empty groups")
    if not 0 < level < 1:
        raise BadLevel(f"level must be in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    mean_a = a[rng.integers(0, a.size, size=(iterations, a.size))].mean(axis=1)
    mean_b = b[rng.integers(0, b.size, size=(iterations, b.size))].mean(axis=1)
    diffs = np.sort(mean_a - mean_b)
    lo_q = (1 - level) / 2
    return (
        float(diffs[_nearest_rank_index(lo_q, iterations)]),
        float(diffs[_nearest_rank_index(1 - lo_q, iterations)]),
    )


def paired_deltas(records: Sequence[RunRecord], baseline: Sequence[RunRecord]) -> list[float]:
    """Per-item correctness differences (method - baseline), joined on item_id."""
    base = {r.item_id: r for r in baseline}
    missing = [r.item_id for r in records if r.item_id not in base]
    if missing:
        raise SchemaError(None, f"baseline missing items: {missing[:5]}")
    return [float(r.correct) - float(base[r.item_id].correct) for r in records]


def summarize(
    records: Sequence[RunRecord],
    baseline: Sequence[RunRecord] | None = None,
    iterations: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
    paired: bool = True,
) -> dict:
    """Accuracy summary, with delta CI and significance when a baseline exists."""
    summary: dict = {
        "accuracy": accuracy(records),
        "n_items": len(records),
        "backend_calls_total": int(sum(r.trace.get("backend_calls", 0) for r in records)),
        "baseline_accuracy": None,
        "delta": None,
        "ci_lo": None,
        "ci_hi": None,
        "significant": None,
    }
    if baseline is not None:
        summary["baseline_accuracy"] = accuracy(baseline)
        summary["delta"] = summary["accuracy"] - summary["baseline_accuracy"]
        if paired:
            deltas = paired_deltas(records, baseline)
            lo, hi = bootstrap_ci(deltas, iterations=iterations, level=level, seed=seed)
        else:
            lo, hi = bootstrap_ci_unpaired(
                [float(r.correct) for r in records],
                [float(r.correct) for r in baseline],
                iterations=iterations,
                level=level,
                seed=seed,
            )
        summary["ci_lo"], summary["ci_hi"] = lo, hi
        summary["significant"] = not (lo <= 0.0 <= hi)
    return summary


# ---------------------------------------------------------------------------
# Synthetic items for simulator studies
# ---------------------------------------------------------------------------

_OPTION_WORDS = ("alpha", "beta", "gamma", "delta")


def synthesize_items(
    n_items: int,
    seed: int = 0,
    p_four_choice: float = 0.4,
    keys_per_item: int = 2,
) -> list[EvalItem]:
    """Generate deterministic synthetic multiple-choice items.

    Items mix three- and four-option questions (``p_four_choice`` of the
    latter), mirroring heterogeneous benchmark suites; each carries annotated
    evidence objects that a paired score fixture can verify.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E7]))
    items = []
    for i in range(n_items):
        n_choices = 4 if rng.random() < p_four_choice else 3
        choices = _OPTION_WORDS[:n_choices]
        truth = choices[int(rng.integers(n_choices))]
        gt_keys = frozenset(f"object-{i}-{j}" for j in range(keys_per_item))
        items.append(
            EvalItem(
                item_id=f"syn-{i:05d}",
                input=MultimodalInput(
                    media_refs=(f"synthetic://scene-{i}",),
                    question=f"Which label matches scene {i}?",
                    media_type="image",
                ),
                truth=truth,
                choices=choices,
                gt_keys=gt_keys,
            )
        )
    return items


def fixture_scores(items: Sequence[EvalItem], score: float = 0.9) -> dict[tuple[str, str], float]:
    """Verifier fixture scoring each item's annotated objects; all else is 0."""
    table = {}
    for item in items:
        for ref in item.input.media_refs:
            for key in item.gt_keys or ():
                table[(ref, key)] = score
    return table


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------


class RunInterrupted(VisaggError):
    """Raised when evaluation is cancelled; carries the completed prefix."""

    def __init__(self, completed: list["RunRecord"]):
        super().__init__(f"interrupted after {len(completed)} items")
        self.completed = completed


def run_items(
    items: Sequence[EvalItem],
    engine_for: Callable[[EvalItem], object],
    jobs: int = 1,
) -> list[RunRecord]:
    """Evaluate items, optionally in parallel; records come back in item order.

    Cancellation (Ctrl-C) raises RunInterrupted carrying the records completed
    so far, in order, so callers can flush them before exiting.
    """

    def one(item: EvalItem) -> RunRecord:
        engine = engine_for(item)
        trace = engine.run(item.input, item_key=item.item_id)
        return make_record(item, trace.summary(), trace.final.answer)

    records: list[RunRecord] = []
    if jobs <= 1:
        try:
            for item in items:
                records.append(one(item))
        except KeyboardInterrupt:
            raise RunInterrupted(records) from None
        return records
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(one, item) for item in items]
        try:
            for future in futures:
                records.append(future.result())
        except KeyboardInterrupt:
            for future in futures:
                future.cancel()
            raise RunInterrupted(records) from None
    return records
