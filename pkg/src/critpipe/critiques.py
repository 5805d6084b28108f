"""Step-level critique generation, validation, and Monte-Carlo filtering.

Two annotation strategies: holistic (one call over the whole path) and
incremental (one call per step, stopping at the first error). Candidates on
flawed paths go through a k-sample refinement filter; candidates on correct
paths are kept only when every step verdict is correct.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from . import grading, prompts
from .backends import Gateway, GenerationRequest
from .core import (
    Critique,
    GenParams,
    Query,
    ReasoningPath,
    SCHEMA_VERSION,
    VERDICT_CORRECT,
    VERDICT_INCORRECT,
    VERDICT_NOT_EVALUATED,
)
from .critformat import parse_critique_reply, parse_step_reply
from .errors import BackendError, ReplyParseError
from .flaws import FlawRecord, HINT_NONE
from .jsonl import write_jsonl
from .seeds import derive_seed

logger = logging.getLogger(__name__)

STRATEGY_HOLISTIC = "holistic"
STRATEGY_INCREMENTAL = "incremental"

FILTER_SOFT = "soft"
FILTER_HARD = "hard"
DEFAULT_FILTER_K = 10
DEFAULT_FILTER_TAU = 0.3


@dataclass(frozen=True)
class CritiqueCandidate:
    """An annotated critique of one target path, before filtering."""

    query_id: str
    target_path: ReasoningPath
    hint: str
    critique: Critique
    annotator_backend_id: str
    strategy: str

    def __post_init__(self) -> None:
        if self.strategy not in (STRATEGY_HOLISTIC, STRATEGY_INCREMENTAL):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == STRATEGY_INCREMENTAL and self.critique.is_flawed:
            k = self.critique.first_error_index
            tail = self.critique.step_verdicts[k + 1 :]
            if any(v != VERDICT_NOT_EVALUATED for v in tail):
                raise ValueError("incremental critiques stop evaluating after the first error")

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "query_id": self.query_id,
            "target_path": self.target_path.to_json(),
            "hint": self.hint,
            "critique": self.critique.to_json(),
            "annotator_backend_id": self.annotator_backend_id,
            "strategy": self.strategy,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CritiqueCandidate":
        return cls(
            query_id=obj["query_id"],
            target_path=ReasoningPath.from_json(obj["target_path"]),
            hint=obj["hint"],
            critique=Critique.from_json(obj["critique"]),
            annotator_backend_id=obj["annotator_backend_id"],
            strategy=obj["strategy"],
        )


def decide_retention(successes: int, k: int, tau: float, mode: str) -> bool:
    """The filter rule: soft keeps successes/k strictly above tau; hard keeps >= 1."""
    if not 0 <= successes <= k:
        raise ValueError("successes must be in [0, k]")
    if mode == FILTER_SOFT:
        return successes / k > tau
    if mode == FILTER_HARD:
        return successes >= 1
    raise ValueError(f"unknown filter mode {mode!r}")


@dataclass(frozen=True)
class FilterVerdict:
    k: int
    successes: int
    mode: str
    threshold: float
    retained: bool

    def __post_init__(self) -> None:
        if self.retained != decide_retention(self.successes, self.k, self.threshold, self.mode):
            raise ValueError("retained flag inconsistent with the filter rule")

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "k": self.k,
            "successes": self.successes,
            "mode": self.mode,
            "threshold": self.threshold,
            "retained": self.retained,
        }


def critique_holistic(
    gateway: Gateway,
    annotator_id: str,
    query: Query,
    path: ReasoningPath,
    hint: str = HINT_NONE,
    record: Optional[FlawRecord] = None,
    seed: int = 0,
    temperature: float = 0.0,
) -> Optional[CritiqueCandidate]:
    """One annotator call over the whole path; None on an unparseable reply."""
    messages = prompts.build_holistic_critique_messages(query, path, hint, record)
    request = GenerationRequest(
        messages=messages,
        temperature=temperature,
        n=1,
        seed=derive_seed("holistic", seed, query.id, path.fingerprint()),
        backend_id=annotator_id,
    )
    reply = gateway.generate(request)[0]
    try:
        critique = parse_critique_reply(reply, len(path.steps))
    except ReplyParseError as exc:
        logger.info("discarding holistic candidate for %s: %s", query.id, exc)
        return None
    return CritiqueCandidate(
        query_id=query.id,
        target_path=path,
        hint=hint,
        critique=critique,
        annotator_backend_id=annotator_id,
        strategy=STRATEGY_HOLISTIC,
    )


def critique_incremental(
    gateway: Gateway,
    annotator_id: str,
    query: Query,
    path: ReasoningPath,
    hint: str = HINT_NONE,
    record: Optional[FlawRecord] = None,
    seed: int = 0,
    temperature: float = 0.0,
) -> Optional[CritiqueCandidate]:
    """One annotator call per step, stopping at the first incorrect verdict."""
    n_steps = len(path.steps)
    verdicts: list[str] = []
    first_error: Optional[int] = None
    feedback = ""
    for i in range(n_steps):
        messages = prompts.build_step_critique_messages(query, path, i)
        request = GenerationRequest(
            messages=messages,
            temperature=temperature,
            n=1,
            seed=derive_seed("incremental", seed, query.id, path.fingerprint(), i),
            backend_id=annotator_id,
        )
        reply = gateway.generate(request)[0]
        try:
            verdict, step_feedback = parse_step_reply(reply)
        except ReplyParseError as exc:
            logger.info("discarding incremental candidate for %s: %s", query.id, exc)
            return None
        verdicts.append(verdict)
        if verdict == VERDICT_INCORRECT:
            first_error = i
            feedback = step_feedback
            break
    verdicts.extend([VERDICT_NOT_EVALUATED] * (n_steps - len(verdicts)))
    critique = Critique(
        step_verdicts=tuple(verdicts),
        first_error_index=first_error,
        feedback=feedback,
        overall_verdict="flawed" if first_error is not None else "correct",
    )
    return CritiqueCandidate(
        query_id=query.id,
        target_path=path,
        hint=hint,
        critique=critique,
        annotator_backend_id=annotator_id,
        strategy=STRATEGY_INCREMENTAL,
    )


def verdict_matches_oracle(candidate: CritiqueCandidate, query: Query) -> bool:
    """Cross-check: the critique's overall verdict must agree with the reward."""
    is_correct = grading.reward(query, candidate.target_path) == 1
    return candidate.critique.is_flawed != is_correct


def validate_correct_path_critique(candidate: CritiqueCandidate, query: Query) -> bool:
    """Keep a correct-path critique only when every step verdict is correct.

    Any non-correct verdict means either a false-positive path or an
    annotator error; either way the candidate is discarded.
    """
    if grading.reward(query, candidate.target_path) != 1:
        raise ValueError("validate_correct_path_critique requires a reward-correct target")
    return all(v == VERDICT_CORRECT for v in candidate.critique.step_verdicts)


def mc_filter(
    gateway: Gateway,
    refiner_id: str,
    query: Query,
    candidate: CritiqueCandidate,
    k: int = DEFAULT_FILTER_K,
    tau: float = DEFAULT_FILTER_TAU,
    mode: str = FILTER_SOFT,
    seed: int = 0,
    temperature: float = 0.7,
) -> FilterVerdict:
    """Run k independent refinements conditioned on (query, path, critique).

    A backend failure on a sample counts as a failed refinement. Retention
    follows decide_retention.
    """
    if grading.reward(query, candidate.target_path) != 0:
        raise ValueError("mc_filter requires a flawed target path")
    messages = prompts.build_refinement_messages(query, candidate.target_path, candidate.critique)
    successes = 0
    for i in range(k):
        request = GenerationRequest(
            messages=messages,
            temperature=temperature,
            n=1,
            seed=derive_seed("mc-filter", seed, query.id, candidate.critique.fingerprint(), i),
            backend_id=refiner_id,
        )
        try:
            text = gateway.generate(request)[0]
        except BackendError as exc:
            logger.warning("mc_filter sample %d failed for %s: %s", i, query.id, exc)
            continue
        if grading.reward_text(query, text) == 1:
            successes += 1
    return FilterVerdict(
        k=k,
        successes=successes,
        mode=mode,
        threshold=tau,
        retained=decide_retention(successes, k, tau, mode),
    )


def emit_dataset(candidates: Sequence[CritiqueCandidate], path) -> dict:
    """Write retained (query, response, critique) triples plus a stats summary.

    Exact duplicate rows — same (query_id, path hash, critique hash) — are
    dropped and counted. Re-running on the same inputs is byte-identical.
    """
    seen: set[tuple[str, str, str]] = set()
    rows: list[dict] = []
    duplicates = 0
    queries: set[str] = set()
    golden: set[tuple[str, str]] = set()
    for cand in candidates:
        key = (cand.query_id, cand.target_path.fingerprint(), cand.critique.fingerprint())
        if key in seen:
            duplicates += 1
            continue
        seen.add(key)
        queries.add(cand.query_id)
        if not cand.critique.is_flawed:
            golden.add((cand.query_id, cand.target_path.fingerprint()))
        rows.append(cand.to_json())
    write_jsonl(path, rows)
    stats = {
        "queries": len(queries),
        "golden_paths": len(golden),
        "critiques": len(rows),
        "duplicates_dropped": duplicates,
    }
    return stats
