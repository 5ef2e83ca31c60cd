"""Object extraction from reasoning text and verification against the visual
input via an external grounding service.

The wire contract is ``POST /ground`` with body
``{"media_ref": str, "phrases": [str]}`` answered by ``{"scores": [number]}``
aligned by index. Verification failures fail closed (score 0), so a dead
service degrades aggregation to ungrounded instead of aborting runs.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field

import requests

from . import tags
from .core import ConfigError, VisaggError

logger = logging.getLogger(__name__)

EXTRACTION_MODES = ("auto", "keys", "backend", "heuristic")

# Small closed-class vocabulary; enough to keep object phrases, drop glue.
_STOPWORDS = frozenset(
    """a an the and or but if then else of in on at to from by with without for
    as is are was were be been being am do does did doing have has had having
    will would can could shall should may might must not no nor so than too
    very this that these those there here it its it's i you he she we they
    them his her their our your my me him us what which who whom whose when
    where why how all any both each few more most other some such only own
    same just also once during before after above below up down out off over
    under again further into through between because while about against
    answer question think reasoning conclude concluding concluded observed
    shows show seen see looks like appears appear likely maybe probably
    left right there's"""
    .split()
)


class GroundingError(VisaggError):
    """Base class for verification-service failures."""


class ServiceError(GroundingError):
    def __init__(self, detail: str):
        super().__init__(f"grounding service error: {detail}")
        self.detail = detail


class ExtractionBackendFailed(GroundingError):
    pass


@dataclass(frozen=True)
class VerifiedEvidence:
    """Grounded evidence for one trajectory.

    ``mentioned`` preserves first-occurrence order of the (case-folded,
    deduplicated) candidate objects; ``verified`` holds those whose confidence
    strictly exceeds ``threshold``. Ungrounded evidence (verification
    disabled) carries an empty score map.
    """

    mentioned: tuple[str, ...]
    scores: dict[str, float] = field(default_factory=dict)
    verified: frozenset[str] = frozenset()
    threshold: float = 0.35

    def __post_init__(self) -> None:
        mentioned = tuple(dict.fromkeys(m.strip().casefold() for m in self.mentioned if m.strip()))
        object.__setattr__(self, "mentioned", mentioned)
        object.__setattr__(self, "verified", frozenset(self.verified))
        if not self.verified <= set(self.mentioned):
            raise ConfigError("verified objects must be a subset of mentioned objects")
        for obj in self.verified:
            if obj in self.scores and not self.scores[obj] > self.threshold:
                raise ConfigError(f"verified object {obj!r} has score <= threshold")

    @classmethod
    def ungrounded(cls, objects: list[str] | tuple[str, ...], threshold: float) -> "VerifiedEvidence":
        """Evidence with verification switched off: every mention passes."""
        canon = tuple(dict.fromkeys(o.strip().casefold() for o in objects if o.strip()))
        return cls(mentioned=canon, scores={}, verified=frozenset(canon), threshold=threshold)


class Verifier:
    """Interface for grounding-confidence providers. Must allow concurrent calls."""

    def score_phrases(self, media_ref: str, phrases: list[str]) -> list[float]:
        raise NotImplementedError

    def verify(self, media_ref: str, phrase: str) -> float:
        """Convenience single-phrase score in [0, 1]."""
        return self.score_phrases(media_ref, [phrase])[0]


class HttpVerifier(Verifier):
    """Client for the /ground endpoint.

    Phrases are scored in one batched request per media reference by default;
    ``batch=False`` falls back to one request per phrase for servers that
    cannot take lists.
    """

    def __init__(self, base_url: str, timeout: float = 30.0, batch: bool = True):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.batch = batch

    def score_phrases(self, media_ref: str, phrases: list[str]) -> list[float]:
        if not phrases:
            return []
        if not self.batch and len(phrases) > 1:
            return [self._post(media_ref, [p])[0] for p in phrases]
        return self._post(media_ref, list(phrases))

    def _post(self, media_ref: str, phrases: list[str]) -> list[float]:
        try:
            resp = requests.post(
                f"{self.base_url}/ground",
                json={"media_ref": media_ref, "phrases": list(phrases)},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise ServiceError(str(exc)) from exc
        if resp.status_code != 200:
            raise ServiceError(f"status {resp.status_code}: {resp.text[:200]}")
        try:
            scores = resp.json()["scores"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ServiceError(f"malformed response: {exc}") from exc
        if not isinstance(scores, list) or len(scores) != len(phrases):
            raise ServiceError("scores not aligned with phrases")
        return [min(1.0, max(0.0, float(s))) for s in scores]


class FixtureVerifier(Verifier):
    """Scores from a fixed (media_ref, phrase) -> score map; unknown pairs are 0."""

    def __init__(self, scores: dict[tuple[str, str], float] | None = None):
        self._scores = {
            (ref, phrase.casefold()): float(s) for (ref, phrase), s in (scores or {}).items()
        }

    @classmethod
    def from_jsonl(cls, path: str) -> "FixtureVerifier":
        """Load a JSONL fixture of {"media_ref":…, "phrase":…, "score":…} rows."""
        table: dict[tuple[str, str], float] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    table[(obj["media_ref"], obj["phrase"])] = float(obj["score"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ConfigError(f"bad verifier fixture line {line_no}: {exc}") from exc
        return cls(table)

    def score_phrases(self, media_ref: str, phrases: list[str]) -> list[float]:
        return [self._scores.get((media_ref, p.casefold()), 0.0) for p in phrases]


class FailingVerifier(Verifier):
    """Always raises; handy for exercising the fail-closed path."""

    def score_phrases(self, media_ref: str, phrases: list[str]) -> list[float]:
        raise ServiceError("verifier unavailable")


# ---------------------------------------------------------------------------
# Object extraction
# ---------------------------------------------------------------------------

_EXTRACTION_PROMPT = (
    "List the physical objects mentioned in the following text as a "
    'Python-style list of quoted strings, e.g. ["object_1", "object_2"]. '
    "Output only the list.\n\nText:\n{text}\n\nObjects:"
)


def heuristic_objects(text: str, max_objects: int = 16) -> list[str]:
    """Offline fallback: stop-word-filtered unigrams and adjacent bigrams."""
    raw = re.findall(r"[a-z][a-z\-']+", text.casefold())
    out: list[str] = []
    prev: str | None = None
    for tok in raw:
        if tok in _STOPWORDS:
            prev = None
            continue
        if prev is not None:
            out.append(f"{prev} {tok}")
        out.append(tok)
        prev = tok
    return list(dict.fromkeys(out))[:max_objects]


def backend_objects(text: str, backend, request_tag: str = "extract") -> list[str]:
    """One backend call with an extraction prompt; returns the quoted list."""
    from .backends import BackendError, GenerationRequest

    prompt = _EXTRACTION_PROMPT.format(text=text)
    try:
        reply = backend.generate(
            GenerationRequest(prompt=prompt, temperature=0.0, request_tag=request_tag)
        )
    except BackendError as exc:
        raise ExtractionBackendFailed(str(exc)) from exc
    start = reply.find("[")
    end = reply.find("]", start)
    if start == -1 or end == -1:
        raise ExtractionBackendFailed("no bracketed list in extraction reply")
    try:
        return tags.parse_key_list(reply[start : end + 1])
    except tags.MalformedKeyList as exc:
        raise ExtractionBackendFailed(str(exc)) from exc


def extract_objects(
    text: str,
    mode: str = "auto",
    backend=None,
    request_tag: str = "extract",
) -> tuple[list[str], int]:
    """Extract candidate object phrases from a trajectory's text.

    Mode "keys" reads a verbatim ``<visual_keys>`` section, "backend" asks the
    generation backend, "heuristic" uses the offline fallback, and "auto"
    tries them in that order (skipping what is unavailable). A failed backend
    extraction falls back to the heuristic and logs the downgrade.

    Returns (objects, backend_calls_used).
    """
    if mode not in EXTRACTION_MODES:
        raise ConfigError(f"extraction mode must be one of {EXTRACTION_MODES}")
    if mode in ("auto", "keys"):
        keys = tags.find_keys(text)
        if keys is not None:
            return keys, 0
        if mode == "keys":
            return [], 0
    if mode in ("auto", "backend") and backend is not None:
        try:
            return backend_objects(text, backend, request_tag), 1
        except ExtractionBackendFailed as exc:
            logger.warning("extraction backend failed (%s); using heuristic", exc)
            return heuristic_objects(text), 1
    if mode == "backend" and backend is None:
        raise ConfigError("backend extraction requested but no backend configured")
    return heuristic_objects(text), 0


# ---------------------------------------------------------------------------
# Evidence assembly
# ---------------------------------------------------------------------------


class EvidenceCache:
    """Thread-safe (media_ref, object) -> confidence cache.

    Only successful lookups are cached, so a recovering service is retried.
    """

    def __init__(self) -> None:
        self._scores: dict[tuple[str, str], float] = {}
        self._lock = threading.Lock()

    def get(self, media_ref: str, obj: str) -> float | None:
        with self._lock:
            return self._scores.get((media_ref, obj))

    def put(self, media_ref: str, obj: str, score: float) -> None:
        with self._lock:
            self._scores[(media_ref, obj)] = score


def frame_subset(media_refs: tuple[str, ...], max_frames: int) -> tuple[str, ...]:
    """Evenly spaced subset of frame references, endpoints included."""
    if len(media_refs) <= max_frames or max_frames < 1:
        return tuple(media_refs)
    if max_frames == 1:
        return (media_refs[0],)
    last = len(media_refs) - 1
    idx = sorted({round(i * last / (max_frames - 1)) for i in range(max_frames)})
    return tuple(media_refs[i] for i in idx)


def verified_evidence(
    media_refs: tuple[str, ...],
    objects: list[str] | tuple[str, ...],
    threshold: float,
    verifier: Verifier,
    cache: EvidenceCache | None = None,
    max_frames: int = 4,
) -> VerifiedEvidence:
    """Score each object against the media and keep strict-threshold survivors.

    Objects are deduplicated before querying so each is verified once; for
    multi-frame inputs the per-object score is the max over an evenly spaced
    frame subset. Per-object service failures score 0 (fail closed) and the
    run continues.
    """
    if not 0 < threshold < 1:
        raise ConfigError("threshold must be in (0, 1)")
    mentioned = tuple(dict.fromkeys(o.strip().casefold() for o in objects if o.strip()))
    best: dict[str, float] = {o: 0.0 for o in mentioned}
    for ref in frame_subset(media_refs, max_frames):
        todo = [o for o in mentioned if cache is None or cache.get(ref, o) is None]
        scored: dict[str, float] = {}
        if todo:
            try:
                values = verifier.score_phrases(ref, todo)
                scored = dict(zip(todo, values))
                if cache is not None:
                    for obj, val in scored.items():
                        cache.put(ref, obj, val)
            except GroundingError as exc:
                logger.warning("verification failed for %s (%s); scoring 0", ref, exc)
                scored = {o: 0.0 for o in todo}
        for obj in mentioned:
            val = scored.get(obj)
            if val is None and cache is not None:
                val = cache.get(ref, obj)
            best[obj] = max(best[obj], val or 0.0)
    verified = frozenset(o for o, s in best.items() if s > threshold)
    return VerifiedEvidence(mentioned=mentioned, scores=best, verified=verified, threshold=threshold)
