"""Composite rollout reward: answer correctness, evidence-selection quality,
and a difficulty-aware length penalty driven by an EMA-smoothed solve rate."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping

from .core import RewardConfig, VisaggError, fold_keys, normalize_answer


class RewardError(VisaggError):
    pass


class EmptyRollouts(RewardError):
    pass


class OutOfRange(RewardError):
    pass


TokenCounter = Callable[[str], int]


def whitespace_tokens(text: str) -> int:
    """Default token counter: whitespace-delimited tokens.

    Any counter that is monotone under concatenation is an acceptable
    substitute (e.g. a real tokenizer's length function).
    """
    return len(text.split())


def r_acc(answer: str, truth: str) -> int:
    """1 iff the answers match exactly after normalization.

    Two empty strings count as a match; callers wanting stricter behavior
    should validate truths upstream.
    """
    return int(normalize_answer(answer) == normalize_answer(truth))


def r_key(keys: Iterable[str], gt_keys: Iterable[str], alpha: float, epsilon: float) -> float:
    """Balanced precision/recall score of predicted keys against annotations.

    Computes ``(1-alpha) * |K∩G| / (|G|+eps) + alpha * |K∩G| / (|K|+eps)``
    with case-insensitive set comparison. Bounded in [0, 1] for eps > 0;
    rewards recall at alpha=0, precision at alpha=1.
    """
    if not 0 <= alpha <= 1:
        raise OutOfRange("alpha must be in [0, 1]")
    if epsilon < 0:
        raise OutOfRange("epsilon must be >= 0")
    k = fold_keys(keys)
    g = fold_keys(gt_keys)
    hit = len(k & g)
    recall = hit / (len(g) + epsilon) if (len(g) + epsilon) > 0 else 0.0
    precision = hit / (len(k) + epsilon) if (len(k) + epsilon) > 0 else 0.0
    return (1 - alpha) * recall + alpha * precision


def solve_rate(rollout_answers: list[str], truth: str) -> float:
    """Fraction of rollouts whose answer exactly matches the truth."""
    if not rollout_answers:
        raise EmptyRollouts("need at least one rollout answer")
    return sum(r_acc(a, truth) for a in rollout_answers) / len(rollout_answers)


@dataclass(frozen=True)
class SolveRateTracker:
    """EMA-smoothed per-prompt solve rate.

    The first observation seeds the average directly (no cold-start bias
    toward 0 or 1); later observations decay with factor gamma.
    """

    current: float = 0.0
    gamma: float = 0.9
    initialized: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.current <= 1:
            raise OutOfRange("current must be in [0, 1]")
        if not 0 <= self.gamma < 1:
            raise OutOfRange("gamma must be in [0, 1)")


def ema_update(tracker: SolveRateTracker, p_hat: float) -> SolveRateTracker:
    """Fold one observed solve rate into the tracker, returning a new tracker."""
    if not 0 <= p_hat <= 1:
        raise OutOfRange("p_hat must be in [0, 1]")
    if not tracker.initialized:
        return replace(tracker, current=p_hat, initialized=True)
    return replace(tracker, current=tracker.gamma * tracker.current + (1 - tracker.gamma) * p_hat)


def r_len(n_tok: int, p_tilde: float, beta: float, j_rollouts: int) -> float:
    """Difficulty-aware length penalty: ``-beta * n_tok * max(p_tilde, 1/J)``.

    Easy prompts (high smoothed solve rate) pay more per token; the 1/J floor
    keeps the penalty from vanishing when nothing solves. Always <= 0.
    """
    if n_tok < 0:
        raise OutOfRange("n_tok must be >= 0")
    if j_rollouts < 1:
        raise OutOfRange("j_rollouts must be >= 1")
    if beta < 0:
        raise OutOfRange("beta must be >= 0")
    return -beta * n_tok * max(p_tilde, 1.0 / j_rollouts)


@dataclass(frozen=True)
class RewardInputs:
    """Audit snapshot of everything that entered a breakdown."""

    answer: str
    truth: str
    keys: tuple[str, ...]
    gt_keys: tuple[str, ...]
    n_tok: int
    p_tilde: float

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "truth": self.truth,
            "keys": list(self.keys),
            "gt_keys": list(self.gt_keys),
            "n_tok": self.n_tok,
            "p_tilde": self.p_tilde,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RewardInputs":
        return cls(
            answer=d["answer"],
            truth=d["truth"],
            keys=tuple(d["keys"]),
            gt_keys=tuple(d["gt_keys"]),
            n_tok=int(d["n_tok"]),
            p_tilde=float(d["p_tilde"]),
        )


@dataclass(frozen=True)
class RewardBreakdown:
    """Composite reward with its parts and inputs recorded for audit."""

    r_acc: int
    r_key: float
    r_len: float
    total: float
    inputs: RewardInputs

    def to_dict(self) -> dict:
        return {
            "r_acc": self.r_acc,
            "r_key": self.r_key,
            "r_len": self.r_len,
            "total": self.total,
            "inputs": self.inputs.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RewardBreakdown":
        return cls(
            r_acc=int(d["r_acc"]),
            r_key=float(d["r_key"]),
            r_len=float(d["r_len"]),
            total=float(d["total"]),
            inputs=RewardInputs.from_dict(d["inputs"]),
        )


def composite(
    answer: str,
    keys: Iterable[str],
    think_text: str,
    truth: str,
    gt_keys: Iterable[str],
    tracker: SolveRateTracker,
    config: RewardConfig,
    token_counter: TokenCounter = whitespace_tokens,
) -> RewardBreakdown:
    """Score one rollout: ``w_acc*R_acc + w_key*R_key + R_len``.

    Tokens are counted inside the think region only (``think_text``). An
    uninitialized tracker contributes a smoothed rate of 0, which activates
    the 1/J floor of the length penalty.
    """
    acc = r_acc(answer, truth)
    key = r_key(keys, gt_keys, config.alpha, config.epsilon)
    n_tok = token_counter(think_text)
    p_tilde = tracker.current if tracker.initialized else 0.0
    length = r_len(n_tok, p_tilde, config.beta, config.j_rollouts)
    total = config.w_acc * acc + config.w_key * key + length
    inputs = RewardInputs(
        answer=answer,
        truth=truth,
        keys=tuple(sorted(fold_keys(keys))),
        gt_keys=tuple(sorted(fold_keys(gt_keys))),
        n_tok=n_tok,
        p_tilde=p_tilde,
    )
    return RewardBreakdown(r_acc=acc, r_key=key, r_len=length, total=total, inputs=inputs)


class SolveRateBook:
    """Tracker registry, keyed per prompt or collapsed to one global stream.

    Single-writer by design: updates happen between training/eval steps.
    """

    def __init__(self, gamma: float = 0.9, mode: str = "per_prompt"):
        if mode not in ("per_prompt", "global"):
            raise OutOfRange("mode must be 'per_prompt' or 'global'")
        self.gamma = gamma
        self.mode = mode
        self._trackers: dict[str, SolveRateTracker] = {}

    def _key(self, prompt_id: str) -> str:
        return prompt_id if self.mode == "per_prompt" else "__global__"

    def tracker(self, prompt_id: str) -> SolveRateTracker:
        return self._trackers.get(self._key(prompt_id), SolveRateTracker(gamma=self.gamma))

    def observe(self, prompt_id: str, rollout_answers: list[str], truth: str) -> SolveRateTracker:
        """Fold one group of rollouts into the prompt's tracker."""
        p_hat = solve_rate(rollout_answers, truth)
        updated = ema_update(self.tracker(prompt_id), p_hat)
        self._trackers[self._key(prompt_id)] = updated
        return updated
