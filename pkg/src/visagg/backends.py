"""Model-generation backends: a chat-completions HTTP client plus deterministic
local backends (scripted and simulator) for tests and desk-scale studies."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from collections import Counter, deque
from dataclasses import dataclass

import requests

from . import tags
from .core import ConfigError, VisaggError, normalize_answer, spawn_rng

logger = logging.getLogger(__name__)

AGGREGATION_RULES = ("majority_of_subset", "copy_random", "oracle_if_any_correct")


class BackendError(VisaggError):
    """Base class for generation failures."""


class TransportError(BackendError):
    def __init__(self, detail: str, status: int | None = None):
        super().__init__(f"transport failure: {detail}")
        self.status = status
        self.detail = detail


class GenerationTimeout(BackendError):
    pass


class EmptyCompletion(BackendError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    """One completion request.

    ``request_tag`` identifies the call site (e.g. "init:i=3", "agg:t=2,i=5",
    "final") and drives both logging and scripted-mock routing.
    """

    prompt: str
    media_refs: tuple[str, ...] = ()
    temperature: float = 0.8
    top_p: float = 0.95
    max_tokens: int = 1024
    request_tag: str = "untagged"

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not self.request_tag:
            raise ConfigError("request_tag must be non-empty")
        object.__setattr__(self, "media_refs", tuple(self.media_refs))


class Backend:
    """Interface all backends implement.

    ``deterministic`` tells the engine whether fan-out must be serialized to
    keep runs bit-reproducible (local backends) or may go concurrent (HTTP).
    """

    deterministic = False

    def generate(self, request: GenerationRequest) -> str:
        raise NotImplementedError


class HttpChatBackend(Backend):
    """Client for chat-completion servers speaking the standard wire format.

    Posts JSON with a single user message whose content mixes one text part
    and one image part per media reference, and reads the first choice's
    message content. Auth is a bearer token from ``api_key_env`` when set.
    Safe for concurrent generate calls.
    """

    deterministic = False

    def __init__(
        self,
        base_url: str,
        model: str = "default",
        api_key_env: str = "VISAGG_API_KEY",
        timeout: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def generate(self, request: GenerationRequest) -> str:
        content: list[dict] = [{"type": "text", "text": request.prompt}]
        for ref in request.media_refs:
            content.append({"type": "image_url", "image_url": {"url": ref}})
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=self._headers(),
                timeout=self.timeout,
            )
        except requests.Timeout as exc:
            raise GenerationTimeout(f"request timed out after {self.timeout}s") from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code != 200:
            raise TransportError(resp.text[:500], status=resp.status_code)
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc
        if not text:
            raise EmptyCompletion(f"empty completion for tag {request.request_tag}")
        return text


class ScriptedBackend(Backend):
    """Deterministic mock that replays canned responses.

    Two modes, combinable: tag rules match ``request_tag`` against regex
    patterns (first match wins, reusable), and a FIFO queue serves any call
    no rule matches. Exhaustion raises EmptyCompletion so the engine's
    retry-then-invalidate path can be exercised. Thread-safe.
    """

    deterministic = True

    def __init__(
        self,
        responses: list[str] | None = None,
        rules: list[tuple[str, str]] | None = None,
    ):
        self._queue = deque(responses or [])
        self._rules = [(re.compile(pat), resp) for pat, resp in (rules or [])]
        self._lock = threading.Lock()
        self.calls: list[str] = []

    @classmethod
    def from_fixture(cls, path: str) -> "ScriptedBackend":
        """Load tag rules from a JSONL file of {request_tag_pattern, response}."""
        rules = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    rules.append((obj["request_tag_pattern"], obj["response"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ConfigError(f"bad scripted fixture line {line_no}: {exc}") from exc
        return cls(rules=rules)

    def generate(self, request: GenerationRequest) -> str:
        with self._lock:
            self.calls.append(request.request_tag)
            for pattern, response in self._rules:
                if pattern.search(request.request_tag):
                    return response
            if self._queue:
                return self._queue.popleft()
        raise EmptyCompletion(f"no scripted response for tag {request.request_tag}")


@dataclass(frozen=True)
class SimulatorProfile:
    """Behavior knobs for the simulator backend.

    ``hallucination_rate`` is the per-generation probability that one
    ungrounded object is added to the emitted keys and reasoning.
    """

    p_correct: float = 0.6
    aggregation_rule: str = "majority_of_subset"
    hallucination_rate: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.p_correct <= 1:
            raise ConfigError("p_correct must be in [0, 1]")
        if not 0 <= self.hallucination_rate <= 1:
            raise ConfigError("hallucination_rate must be in [0, 1]")
        if self.aggregation_rule not in AGGREGATION_RULES:
            raise ConfigError(f"aggregation_rule must be one of {AGGREGATION_RULES}")


_ANSWER_IN_BLOCK = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_CANDIDATE_MARKER = re.compile(r"### Candidate #\d+ ###:")
_KEY_OBJECTS_IN_PROMPT = re.compile(r"Key Objects:\s*\[(.*?)\]", re.DOTALL)


def _peer_answers(prompt: str) -> list[str]:
    """Pull the candidates' answers out of an aggregation prompt.

    Only the region between the candidate markers and the Key Objects line is
    scanned, so tag mentions in the surrounding instructions never count."""
    cut = prompt.find("\nKey Objects:")
    region = prompt[:cut] if cut != -1 else prompt
    answers = []
    for block in _CANDIDATE_MARKER.split(region)[1:]:
        m = _ANSWER_IN_BLOCK.search(block)
        if m:
            answers.append(m.group(1).strip())
    return answers


def _apply_rule(
    rule: str, subset_answers: list[str], truth: str, rng
) -> str:
    if rule == "copy_random":
        return subset_answers[int(rng.integers(len(subset_answers)))]
    if rule == "oracle_if_any_correct":
        want = normalize_answer(truth)
        if any(normalize_answer(a) == want for a in subset_answers):
            return truth
        return subset_answers[int(rng.integers(len(subset_answers)))]
    counts = Counter(subset_answers)
    top = max(counts.values())
    tied = sorted(a for a, c in counts.items() if c == top)
    return tied[int(rng.integers(len(tied)))]


def simulate_candidate(
    profile: SimulatorProfile,
    truth: str,
    distractors: tuple[str, ...],
    role: str,
    subset_answers: list[str],
    rng,
    *,
    base_keys: tuple[str, ...] = (),
    context_keys: tuple[str, ...] = (),
    phantom_prefix: str = "phantom",
) -> str:
    """Emit one tagged candidate as a stochastic stand-in for a model.

    ``role="init"`` answers correctly with probability ``p_correct`` and
    otherwise picks a uniform distractor; its keys are ``base_keys``.
    ``role="aggregate"`` applies the profile's aggregation rule to
    ``subset_answers`` (majority ties break uniformly at random over the tied
    answer set) and echoes ``context_keys``. Either role appends one fresh
    ungrounded object with probability ``hallucination_rate``.
    """
    if role == "init" or not subset_answers:
        if rng.random() < profile.p_correct or not distractors:
            answer = truth
        else:
            answer = distractors[int(rng.integers(len(distractors)))]
        keys = list(base_keys)
    elif role == "aggregate":
        answer = _apply_rule(profile.aggregation_rule, subset_answers, truth, rng)
        keys = list(context_keys)
    else:
        raise ConfigError(f"unknown simulator role: {role}")
    if rng.random() < profile.hallucination_rate:
        keys.append(f"{phantom_prefix}-{int(rng.integers(10**9))}")
    seen = ", ".join(keys) if keys else "nothing notable"
    reasoning = f"Observed {seen} in the scene; concluding {answer}."
    return tags.emit_output(reasoning, keys, answer)


class SimulatorBackend(Backend):
    """Per-item simulated model, fully determined by (seed, item, request tag).

    The role and any peer answers are recovered from the request itself: the
    tag names the call site and aggregation prompts embed the candidates'
    tagged texts and the verified key list. Repeated calls with one tag get
    fresh draws via an internal attempt counter, so retry paths stay
    deterministic under any thread interleaving.
    """

    deterministic = True

    def __init__(
        self,
        profile: SimulatorProfile,
        truth: str,
        distractors: tuple[str, ...],
        real_keys: tuple[str, ...] = (),
        item_key: str = "item",
        seed: int = 0,
    ):
        self.profile = profile
        self.truth = truth
        self.distractors = tuple(sorted(distractors))
        self.real_keys = tuple(sorted(real_keys))
        self.item_key = item_key
        self.seed = seed
        self._attempts: Counter[str] = Counter()
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> str:
        tag = request.request_tag
        with self._lock:
            attempt = self._attempts[tag]
            self._attempts[tag] += 1
        rng = spawn_rng(self.seed, "sim", self.item_key, tag, attempt)
        if tag.startswith("init"):
            role, answers, context = "init", [], ()
        else:
            answers = _peer_answers(request.prompt)
            m = _KEY_OBJECTS_IN_PROMPT.search(request.prompt)
            context = tuple(tags.parse_key_list(f"[{m.group(1)}]")) if m else ()
            role = "aggregate" if answers else "init"
        return simulate_candidate(
            self.profile,
            self.truth,
            self.distractors,
            role,
            answers,
            rng,
            base_keys=self.real_keys,
            context_keys=context,
            phantom_prefix=f"phantom-{self.item_key}",
        )
