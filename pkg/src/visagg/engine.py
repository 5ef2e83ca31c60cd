"""The iterative aggregation engine.

One run: sample an initial population of N trajectories, exit early whenever
every valid trajectory agrees on one normalized answer, otherwise rebuild the
population T-1 times (each new slot aggregates a random M-subset of peers
together with their verified visual evidence), and finish with one aggregation
over the whole surviving population.
"""

from __future__ import annotations

import logging
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources

from . import tags
from .backends import Backend, BackendError, GenerationRequest
from .core import (
    ConfigError,
    EngineConfig,
    MultimodalInput,
    Population,
    Trajectory,
    VisaggError,
    spawn_rng,
)
from .grounding import EvidenceCache, VerifiedEvidence, Verifier, extract_objects, verified_evidence

logger = logging.getLogger(__name__)

EXIT_CONSENSUS = "consensus_at_t"
EXIT_FINAL = "final_aggregation"


class EngineError(VisaggError):
    pass


class AllGenerationsFailed(EngineError):
    pass


class NoValidMembers(EngineError):
    pass


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptSet:
    init: str
    aggregate: str
    final: str


def load_prompts(directory: str | None = None) -> PromptSet:
    """Load the three stage templates, from package data by default."""
    if directory is None:
        root = resources.files("visagg").joinpath("prompts")
        read = lambda name: root.joinpath(name).read_text(encoding="utf-8")  # noqa: E731
    else:
        read = lambda name: open(f"{directory}/{name}", encoding="utf-8").read()  # noqa: E731
    return PromptSet(init=read("init.txt"), aggregate=read("aggregate.txt"), final=read("final.txt"))


_CANDIDATE_SLOT = re.compile(r"### Candidate #(\d+) ###: \{candidate\1\}")
_PLACEHOLDER = re.compile(r"\{(media_type|question|visual_keys|candidate\d+)\}")


def _resize_candidate_block(template: str, count: int) -> str:
    """Rewrite the template's numbered candidate slots to exactly ``count``."""
    slots = list(_CANDIDATE_SLOT.finditer(template))
    if not slots:
        if count:
            raise ConfigError("template has no candidate slots")
        return template
    block = "\n\n".join(f"### Candidate #{k} ###: {{candidate{k}}}" for k in range(1, count + 1))
    return template[: slots[0].start()] + block + template[slots[-1].end() :]


def render_prompt(
    template: str,
    media_type: str,
    question: str,
    candidates: list[str] | None = None,
    visual_keys: list[str] | None = None,
) -> str:
    """Fill a stage template.

    Candidate slots are regrown to match the number of candidates supplied,
    and the key list renders as a sorted quoted list (empty keys still render
    as []). Substitution is a single pass, so replacement text containing
    placeholder-like braces is never re-expanded.
    """
    candidates = candidates or []
    filled = _resize_candidate_block(template, len(candidates))
    keys_rendered = ", ".join(f'"{k}"' for k in sorted(visual_keys or []))
    values = {"media_type": media_type, "question": question, "visual_keys": keys_rendered}
    for idx, text in enumerate(candidates, 1):
        values[f"candidate{idx}"] = text

    def lookup(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise ConfigError(f"unfilled placeholder: {name}")
        return values[name]

    return _PLACEHOLDER.sub(lookup, filled)


# ---------------------------------------------------------------------------
# Run trace
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunTrace:
    """Everything one run did: populations, evidence, the final trajectory,
    why it exited, and the generation-attempt count."""

    input: MultimodalInput
    populations: tuple[Population, ...]
    evidence: dict[str, VerifiedEvidence]
    final: Trajectory
    exit_reason: str
    backend_calls: int
    wall_time: float

    def to_dict(self, include_wall_time: bool = True) -> dict:
        doc = {
            "input": {
                "media_refs": list(self.input.media_refs),
                "question": self.input.question,
                "media_type": self.input.media_type,
            },
            "populations": [
                {
                    "iteration": pop.iteration,
                    "members": [
                        {
                            "reasoning": t.reasoning,
                            "answer": t.answer,
                            "visual_keys": sorted(t.visual_keys) if t.visual_keys is not None else None,
                            "raw": t.raw,
                            "valid": t.valid,
                        }
                        for t in pop.members
                    ],
                    "provenance": [list(p) if p is not None else None for p in pop.provenance]
                    if pop.provenance is not None
                    else None,
                }
                for pop in self.populations
            ],
            "evidence": {
                key: {
                    "mentioned": list(ev.mentioned),
                    "scores": {k: ev.scores[k] for k in sorted(ev.scores)},
                    "verified": sorted(ev.verified),
                    "threshold": ev.threshold,
                }
                for key, ev in sorted(self.evidence.items())
            },
            "final": {
                "reasoning": self.final.reasoning,
                "answer": self.final.answer,
                "visual_keys": sorted(self.final.visual_keys)
                if self.final.visual_keys is not None
                else None,
                "valid": self.final.valid,
            },
            "exit_reason": self.exit_reason,
            "backend_calls": self.backend_calls,
        }
        if include_wall_time:
            doc["wall_time"] = self.wall_time
        return doc

    def summary(self) -> dict:
        """Compact, timing-free digest for persisted run records."""
        return {
            "exit_reason": self.exit_reason,
            "iterations": len(self.populations),
            "backend_calls": self.backend_calls,
            "final_answer": self.final.answer,
            "final_keys": sorted(self.final.visual_keys) if self.final.visual_keys is not None else None,
            "final_valid": self.final.valid,
        }


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


def check_consensus(population: Population) -> str | None:
    """The shared normalized answer if every valid member agrees, else None.

    Invalid members are ignored; a population with no valid members is a
    caller error.
    """
    valid = population.valid_members()
    if not valid:
        raise NoValidMembers(f"population at iteration {population.iteration} has no valid members")
    answers = {t.normalized_answer for t in valid}
    if len(answers) == 1:
        return next(iter(answers))
    return None


def sample_subset(population: Population, m: int, rng) -> list[int]:
    """Uniformly sample M distinct valid members; shrink when fewer exist.

    Returns member indices so callers can record provenance. Each target slot
    is expected to call this with its own generator.
    """
    valid = population.valid_indices()
    if not valid:
        raise NoValidMembers("cannot sample a subset without valid members")
    if len(valid) < m:
        logger.info(
            "subset shrink: %d valid < M=%d at iteration %d", len(valid), m, population.iteration
        )
        return list(valid)
    picked = rng.choice(len(valid), size=m, replace=False)
    return [valid[i] for i in picked]


def plurality_answer(population: Population) -> str:
    """Most common normalized answer among valid members.

    Ties break toward the answer whose earliest holder has the lowest index.
    """
    valid = [(i, t.normalized_answer) for i, t in enumerate(population.members) if t.valid]
    if not valid:
        raise NoValidMembers("plurality vote needs valid members")
    counts = Counter(answer for _, answer in valid)
    top = max(counts.values())
    first_index = {}
    for i, answer in valid:
        if answer not in first_index:
            first_index[answer] = i
    tied = [a for a, c in counts.items() if c == top]
    return min(tied, key=lambda a: first_index[a])


class Engine:
    """Runs the aggregation loop against a generation backend and a verifier.

    Shareable across items; all randomness derives from (config seed,
    item_key), so runs are bit-reproducible with deterministic backends.
    With ``grounding_enabled=False`` extraction still happens but every
    mention counts as evidence (the no-verification ablation arm).
    """

    def __init__(
        self,
        backend: Backend,
        verifier: Verifier | None = None,
        config: EngineConfig | None = None,
        *,
        prompts: PromptSet | None = None,
        grounding_enabled: bool = True,
        extraction_mode: str = "auto",
        extraction_backend: Backend | None = None,
        max_tokens: int = 1024,
        max_in_flight: int = 8,
        max_frames: int = 4,
    ):
        self.backend = backend
        self.verifier = verifier
        self.config = config or EngineConfig()
        self.prompts = prompts or load_prompts()
        self.grounding_enabled = grounding_enabled and verifier is not None
        self.extraction_mode = extraction_mode
        self.extraction_backend = extraction_backend
        self.max_tokens = max_tokens
        self.max_in_flight = max(1, max_in_flight)
        self.max_frames = max_frames
        self.cache = EvidenceCache()

    # -- generation ---------------------------------------------------------

    def _request(self, prompt: str, x: MultimodalInput, tag: str) -> GenerationRequest:
        return GenerationRequest(
            prompt=prompt,
            media_refs=x.media_refs,
            temperature=self.config.temperature,
            top_p=self.config.top_p,
            max_tokens=self.max_tokens,
            request_tag=tag,
        )

    def _generate_trajectory(self, prompt: str, x: MultimodalInput, tag: str) -> tuple[Trajectory, int]:
        """One slot's generation with retry-then-invalidate semantics."""
        attempts = 0
        last_raw = ""
        for _ in range(self.config.max_retries_per_generation + 1):
            attempts += 1
            try:
                raw = self.backend.generate(self._request(prompt, x, tag))
            except BackendError as exc:
                logger.debug("generation failed for %s: %s", tag, exc)
                continue
            last_raw = raw
            try:
                parsed = tags.parse_output(raw, require_keys=False)
            except tags.ParseError as exc:
                logger.debug("unparseable output for %s: %s", tag, exc)
                continue
            if parsed.think and parsed.answer:
                keys = frozenset(parsed.visual_keys) if parsed.visual_keys is not None else None
                return (
                    Trajectory(
                        reasoning=parsed.think,
                        answer=parsed.answer,
                        visual_keys=keys,
                        raw=raw,
                        valid=True,
                    ),
                    attempts,
                )
        return Trajectory(reasoning="", answer="", visual_keys=None, raw=last_raw, valid=False), attempts

    def _fan_out(self, jobs: list[tuple[str, str]], x: MultimodalInput) -> tuple[list[Trajectory], int]:
        """Run (prompt, tag) jobs, threaded for remote backends, serial for
        deterministic local ones; results come back in job order either way."""
        if getattr(self.backend, "deterministic", False) or len(jobs) == 1:
            results = [self._generate_trajectory(p, x, t) for p, t in jobs]
        else:
            with ThreadPoolExecutor(max_workers=min(self.max_in_flight, len(jobs))) as pool:
                results = list(pool.map(lambda job: self._generate_trajectory(job[0], x, job[1]), jobs))
        members = [r[0] for r in results]
        calls = sum(r[1] for r in results)
        return members, calls

    # -- evidence -----------------------------------------------------------

    def _evidence_for(self, traj: Trajectory, x: MultimodalInput) -> tuple[VerifiedEvidence, int]:
        if traj.visual_keys is not None:
            objects, extra_calls = sorted(traj.visual_keys), 0
        else:
            objects, extra_calls = extract_objects(
                traj.raw or traj.reasoning,
                mode=self.extraction_mode,
                backend=self.extraction_backend,
            )
        if not self.grounding_enabled or self.verifier is None:
            return VerifiedEvidence.ungrounded(objects, self.config.grounding_threshold), extra_calls
        evidence = verified_evidence(
            x.media_refs,
            objects,
            self.config.grounding_threshold,
            self.verifier,
            cache=self.cache,
            max_frames=self.max_frames,
        )
        return evidence, extra_calls

    # -- stages -------------------------------------------------------------

    def init_population(self, x: MultimodalInput) -> tuple[Population, int]:
        """Sample the initial population of N trajectories."""
        prompt = render_prompt(self.prompts.init, x.media_type, x.question)
        jobs = [(prompt, f"init:i={i}") for i in range(1, self.config.n_population + 1)]
        members, calls = self._fan_out(jobs, x)
        if not any(t.valid for t in members):
            raise AllGenerationsFailed(f"all {len(members)} initial generations invalid after retries")
        provenance = tuple(None for _ in members)
        return Population(iteration=1, members=tuple(members), provenance=provenance), calls

    def aggregate_prompt(
        self, x: MultimodalInput, subset: list[Trajectory], evidences: list[VerifiedEvidence]
    ) -> str:
        keys = sorted(set().union(*(ev.verified for ev in evidences)) if evidences else set())
        return render_prompt(
            self.prompts.aggregate,
            x.media_type,
            x.question,
            candidates=[t.raw for t in subset],
            visual_keys=keys,
        )

    def final_prompt(
        self, x: MultimodalInput, candidates: list[Trajectory], evidences: list[VerifiedEvidence]
    ) -> str:
        keys = sorted(set().union(*(ev.verified for ev in evidences)) if evidences else set())
        return render_prompt(
            self.prompts.final,
            x.media_type,
            x.question,
            candidates=[t.raw for t in candidates],
            visual_keys=keys,
        )

    def aggregate_step(
        self,
        x: MultimodalInput,
        subset: list[Trajectory],
        evidences: list[VerifiedEvidence],
        tag: str = "agg:t=2,i=1",
    ) -> tuple[Trajectory, int]:
        """Synthesize one new trajectory from a peer subset and its evidence.

        Returns the trajectory (invalid after exhausted retries, never an
        exception) and the number of generation attempts spent.
        """
        if not subset:
            raise NoValidMembers("aggregation needs a non-empty subset")
        return self._generate_trajectory(self.aggregate_prompt(x, subset, evidences), x, tag)

    # -- full run -----------------------------------------------------------

    def run(self, x: MultimodalInput, item_key: str = "item") -> RunTrace:
        """Execute one full aggregation run for one input."""
        started = time.perf_counter()
        cfg = self.config
        backend_calls = 0
        evidence_log: dict[str, VerifiedEvidence] = {}

        population, calls = self.init_population(x)
        backend_calls += calls
        populations = [population]
        consensus = check_consensus(population)

        t = 1
        while consensus is None and t < cfg.t_iterations:
            target = t + 1
            jobs: list[tuple[str, str]] = []
            provenance: list[tuple[int, ...]] = []
            for i in range(1, cfg.n_population + 1):
                rng = spawn_rng(cfg.seed, item_key, "subset", target, i)
                idx = sample_subset(population, cfg.m_subset, rng)
                subset = [population.members[j] for j in idx]
                evidences = []
                for j, member in zip(idx, subset):
                    ev_key = f"t{population.iteration}:{j}"
                    if ev_key not in evidence_log:
                        ev, extra = self._evidence_for(member, x)
                        evidence_log[ev_key] = ev
                        backend_calls += extra
                    evidences.append(evidence_log[ev_key])
                jobs.append((self.aggregate_prompt(x, subset, evidences), f"agg:t={target},i={i}"))
                provenance.append(tuple(idx))
            # All N aggregate_step generations for this iteration fan out together.
            members, calls = self._fan_out(jobs, x)
            backend_calls += calls
            if not any(m.valid for m in members):
                raise AllGenerationsFailed(f"all aggregation generations invalid at iteration {target}")
            population = Population(iteration=target, members=tuple(members), provenance=tuple(provenance))
            populations.append(population)
            consensus = check_consensus(population)
            t += 1

        if consensus is not None:
            final = population.valid_members()[0]
            exit_reason = EXIT_CONSENSUS
        else:
            final, calls = self.final_aggregate(x, population, evidence_log)
            backend_calls += calls
            exit_reason = EXIT_FINAL

        return RunTrace(
            input=x,
            populations=tuple(populations),
            evidence=evidence_log,
            final=final,
            exit_reason=exit_reason,
            backend_calls=backend_calls,
            wall_time=time.perf_counter() - started,
        )

    def final_aggregate(
        self,
        x: MultimodalInput,
        population: Population,
        evidence_log: dict[str, VerifiedEvidence] | None = None,
    ) -> tuple[Trajectory, int]:
        """Merge the last population; fall back to a plurality vote on failure."""
        if evidence_log is None:
            evidence_log = {}
        calls = 0
        candidates = population.valid_members()
        indices = population.valid_indices()
        evidences = []
        for j, member in zip(indices, candidates):
            ev_key = f"t{population.iteration}:{j}"
            if ev_key not in evidence_log:
                ev, extra = self._evidence_for(member, x)
                evidence_log[ev_key] = ev
                calls += extra
            evidences.append(evidence_log[ev_key])
        prompt = self.final_prompt(x, candidates, evidences)
        final, attempts = self._generate_trajectory(prompt, x, "final")
        calls += attempts
        if final.valid:
            return final, calls
        winner = plurality_answer(population)
        logger.warning("final aggregation failed; plurality fallback chose %r", winner)
        fallback = Trajectory(
            reasoning="final aggregation failed; answer chosen by plurality vote",
            answer=winner,
            visual_keys=None,
            raw="",
            valid=True,
        )
        return fallback, calls
