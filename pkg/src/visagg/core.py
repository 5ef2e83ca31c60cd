"""Shared domain types, configuration, answer normalization, and seeded RNG plumbing."""

from __future__ import annotations

import hashlib
import json
import re
import string
from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np

MEDIA_TYPES = ("image", "video")


class VisaggError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VisaggError):
    """Invalid configuration value or malformed config file."""


# ---------------------------------------------------------------------------
# Answer normalization
# ---------------------------------------------------------------------------

_ANSWER_PREFIX = re.compile(r"^answer\s*[:\-]\s*", re.IGNORECASE)
_MC_PAREN = re.compile(r"^\(([A-Za-z])\)")
_MC_TRAILING = re.compile(r"^([A-Za-z])[.):]\s*$")
_SINGLE_LETTER = re.compile(r"^[a-z]$")
_STRIP_CHARS = string.punctuation + string.whitespace


def _normalize_once(text: str) -> str:
    s = _ANSWER_PREFIX.sub("", text.strip(), count=1).strip()
    m = _MC_PAREN.match(s)
    if m:
        return m.group(1).upper()
    m = _MC_TRAILING.match(s)
    if m:
        return m.group(1).upper()
    s = s.casefold().strip(_STRIP_CHARS)
    if _SINGLE_LETTER.match(s):
        return s.upper()
    return s


def normalize_answer(text: str) -> str:
    """Canonicalize a free-form answer for exact-match comparison.

    Case-folds, trims whitespace, and strips surrounding punctuation. If the
    text looks like a multiple-choice selection ("(B)", "B.", "Answer: B", or
    a lone letter), the bare option letter is returned uppercased.

    Total and idempotent: the single-pass rules run to a fixed point, so
    normalizing twice equals normalizing once (stripping punctuation can
    expose another prefix, e.g. a quoted "answer: b").
    """
    current = text
    previous = None
    while current != previous:
        previous = current
        current = _normalize_once(current)
    return current


# ---------------------------------------------------------------------------
# Reproducible RNG derivation
# ---------------------------------------------------------------------------


def _as_entropy_word(part: int | str) -> int:
    if isinstance(part, bool):  # bool is an int subclass; be explicit
        return int(part)
    if isinstance(part, int):
        return part & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def spawn_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Derive an independent generator from a root seed and a label path.

    The same (seed, path) always yields the same stream, on any platform and
    regardless of call order, so concurrent subsystems can each own a stream.
    """
    words = [_as_entropy_word(seed)] + [_as_entropy_word(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultimodalInput:
    """A question about one or more opaque media references.

    Media are never decoded here; perception happens in external services.
    Video inputs are represented as an ordered list of frame references.
    """

    media_refs: tuple[str, ...]
    question: str
    media_type: str = "image"

    def __post_init__(self) -> None:
        if not self.media_refs:
            raise ConfigError("media_refs must be non-empty")
        if not self.question.strip():
            raise ConfigError("question must be non-empty")
        if self.media_type not in MEDIA_TYPES:
            raise ConfigError(f"media_type must be one of {MEDIA_TYPES}")
        object.__setattr__(self, "media_refs", tuple(self.media_refs))


@dataclass(frozen=True)
class Trajectory:
    """One candidate reasoning trace: reasoning text plus a predicted answer.

    ``visual_keys`` is None when the output carried no key section at all,
    and a (possibly empty) frozenset when it did. Invalid trajectories keep
    their raw text for debugging but expose empty reasoning/answer.
    """

    reasoning: str
    answer: str
    visual_keys: frozenset[str] | None
    raw: str
    valid: bool

    def __post_init__(self) -> None:
        if self.valid and (not self.reasoning or not self.answer):
            raise ConfigError("valid trajectory requires non-empty reasoning and answer")
        if self.visual_keys is not None:
            object.__setattr__(
                self, "visual_keys", frozenset(k.casefold() for k in self.visual_keys)
            )

    @property
    def normalized_answer(self) -> str:
        return normalize_answer(self.answer)


@dataclass(frozen=True)
class Population:
    """The set of trajectories alive at one aggregation iteration.

    ``provenance`` records, per member, the indices into the previous
    population whose subset produced it (None for initial members). Invalid
    members are retained and flagged, never dropped.
    """

    iteration: int
    members: tuple[Trajectory, ...]
    provenance: tuple[tuple[int, ...] | None, ...] | None = None

    def __post_init__(self) -> None:
        if self.iteration < 1:
            raise ConfigError("iteration must be >= 1")
        if not self.members:
            raise ConfigError("population must have at least one member")
        object.__setattr__(self, "members", tuple(self.members))
        if self.provenance is not None:
            if len(self.provenance) != len(self.members):
                raise ConfigError("provenance must align with members")
            object.__setattr__(
                self,
                "provenance",
                tuple(tuple(p) if p is not None else None for p in self.provenance),
            )

    def valid_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.members) if t.valid]

    def valid_members(self) -> list[Trajectory]:
        return [t for t in self.members if t.valid]


@dataclass(frozen=True)
class EngineConfig:
    """Inference-time knobs for the aggregation engine.

    ``m_subset`` is the per-slot aggregation group size (some write-ups call
    the same quantity K). Constructors reject out-of-range values rather than
    clamping.
    """

    n_population: int = 8
    t_iterations: int = 3
    m_subset: int = 4
    temperature: float = 0.8
    top_p: float = 0.95
    grounding_threshold: float = 0.35
    seed: int = 0
    max_retries_per_generation: int = 2

    def __post_init__(self) -> None:
        if self.n_population < 1:
            raise ConfigError("n_population must be >= 1")
        if self.t_iterations < 1:
            raise ConfigError("t_iterations must be >= 1")
        if not 1 <= self.m_subset <= self.n_population:
            raise ConfigError("m_subset must satisfy 1 <= M <= N")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if not 0 < self.grounding_threshold < 1:
            raise ConfigError("grounding_threshold must be in (0, 1)")
        if self.max_retries_per_generation < 0:
            raise ConfigError("max_retries_per_generation must be >= 0")


@dataclass(frozen=True)
class RewardConfig:
    """Weights and constants for the composite reward and group-weighted loss.

    The preference sharpness is exposed as ``lambda_`` in code because
    ``lambda`` is reserved in Python; config files use the bare key "lambda".
    """

    w_acc: float = 1.0
    w_key: float = 0.35
    alpha: float = 0.5
    epsilon: float = 1e-8
    beta: float = 0.001
    gamma: float = 0.9
    j_rollouts: int = 4
    lambda_: float = 1.0
    alpha_kl: float = 0.02

    def __post_init__(self) -> None:
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must be in [0, 1]")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must be in [0, 1)")
        if self.j_rollouts < 1:
            raise ConfigError("j_rollouts must be >= 1")
        if self.alpha_kl < 0:
            raise ConfigError("alpha_kl must be >= 0")
        if not np.isfinite(self.lambda_):
            raise ConfigError("lambda must be finite")


# ---------------------------------------------------------------------------
# Config file IO (JSON with an "engine" and a "rewards" section)
# ---------------------------------------------------------------------------

_LAMBDA_KEY = "lambda"


def _build_config(cls, section: dict, label: str):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in section.items():
        name = "lambda_" if key == _LAMBDA_KEY else key
        if name not in known:
            raise ConfigError(f"unknown {label} config field: {key}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {label} config: {exc}") from exc


def load_config(path: str) -> tuple[EngineConfig, RewardConfig]:
    """Read engine and reward configuration from a JSON file.

    The file holds two optional objects, "engine" and "rewards", whose keys
    are the dataclass field names (with "lambda" spelled bare). Missing
    sections or fields fall back to defaults; unknown keys are rejected.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a JSON object")
    for section in raw:
        if section not in ("engine", "rewards"):
            raise ConfigError(f"unknown config section: {section}")
    engine = _build_config(EngineConfig, raw.get("engine", {}), "engine")
    rewards = _build_config(RewardConfig, raw.get("rewards", {}), "rewards")
    return engine, rewards


def dump_config(engine: EngineConfig, rewards: RewardConfig) -> str:
    """Serialize configs back to the JSON text format accepted by load_config."""
    eng = {f.name: getattr(engine, f.name) for f in fields(EngineConfig)}
    rew = {}
    for f in fields(RewardConfig):
        key = _LAMBDA_KEY if f.name == "lambda_" else f.name
        rew[key] = getattr(rewards, f.name)
    return json.dumps({"engine": eng, "rewards": rew}, indent=2, sort_keys=True)


def fold_keys(keys: Iterable[str]) -> frozenset[str]:
    """Case-fold and deduplicate a key collection, dropping blanks."""
    return frozenset(k.strip().casefold() for k in keys if k.strip())
