"""Domain types for the two-player actor/critic protocol.

Everything here is an immutable value object: safe to share across threads
and tasks without synchronization. Serialization is canonical JSON with the
exact field names below and a schema_version tag on every record.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional

SCHEMA_VERSION = 1

SOURCES = ("gsm8k-like", "math-like", "custom")
PROVENANCES = ("sampled", "rg1", "rg2", "rg3", "refinement", "self-talk")
VERDICT_CORRECT = "correct"
VERDICT_INCORRECT = "incorrect"
VERDICT_NOT_EVALUATED = "not-evaluated"
STEP_VERDICTS = (VERDICT_CORRECT, VERDICT_INCORRECT, VERDICT_NOT_EVALUATED)
OVERALL_CORRECT = "correct"
OVERALL_FLAWED = "flawed"

ROLE_QUERY = "query"
ROLE_RESPONSE = "response"
ROLE_CRITIQUE = "critique"


@dataclass(frozen=True)
class Message:
    """One ordered context segment handed to a backend."""

    role: str
    content: str


@dataclass(frozen=True)
class Query:
    """A problem with its gold answer and optional difficulty level (1..5)."""

    id: str
    text: str
    gold_answer: str
    source: str = "custom"
    difficulty: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("query id must be non-empty")
        if not self.gold_answer or not self.gold_answer.strip():
            raise ValueError(f"query {self.id}: gold_answer must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"query {self.id}: unknown source {self.source!r}")
        if self.difficulty is not None and not 1 <= self.difficulty <= 5:
            raise ValueError(f"query {self.id}: difficulty must be in [1,5]")

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "text": self.text,
            "gold_answer": self.gold_answer,
            "source": self.source,
            "difficulty": self.difficulty,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Query":
        return cls(
            id=obj["id"],
            text=obj["text"],
            gold_answer=obj["gold_answer"],
            source=obj.get("source", "custom"),
            difficulty=obj.get("difficulty"),
        )


def load_queries(rows: Iterable[dict]) -> list[Query]:
    """Parse query records, enforcing id uniqueness within the dataset."""
    queries: list[Query] = []
    seen: set[str] = set()
    for row in rows:
        q = Query.from_json(row)
        if q.id in seen:
            raise ValueError(f"duplicate query id {q.id!r} in dataset")
        seen.add(q.id)
        queries.append(q)
    return queries


@dataclass(frozen=True)
class Step:
    index: int
    text: str


@dataclass(frozen=True)
class GenParams:
    """Sampling parameters recorded as provenance on a path."""

    temperature: float = 0.0
    seed: int = 0
    backend_id: str = ""

    def to_json(self) -> dict:
        return {
            "temperature": self.temperature,
            "seed": self.seed,
            "backend_id": self.backend_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GenParams":
        return cls(
            temperature=obj.get("temperature", 0.0),
            seed=obj.get("seed", 0),
            backend_id=obj.get("backend_id", ""),
        )


def split_steps(text: str) -> tuple[Step, ...]:
    """Split a response into steps on newlines, dropping blank lines."""
    lines = [ln.strip() for ln in text.splitlines()]
    return tuple(Step(index=i, text=ln) for i, ln in enumerate(ln for ln in lines if ln))


@dataclass(frozen=True)
class ReasoningPath:
    """An ordered sequence of reasoning steps plus the extracted final answer."""

    steps: tuple[Step, ...]
    final_answer: Optional[str]
    provenance: str
    gen_params: GenParams = field(default_factory=GenParams)

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for i, step in enumerate(self.steps):
            if step.index != i:
                raise ValueError(f"step indices must be contiguous from 0, got {step.index} at {i}")
        if self.final_answer is not None:
            from . import grading  # local import: grading depends on this module

            extracted = grading.extract_final_answer(self)
            if extracted is None or extracted.raw != self.final_answer:
                raise ValueError(
                    "final_answer does not match extraction of the concatenated steps"
                )

    @classmethod
    def from_text(
        cls,
        text: str,
        provenance: str = "sampled",
        gen_params: GenParams | None = None,
    ) -> "ReasoningPath":
        """Build a path from raw response text; final_answer is extracted."""
        from . import grading

        steps = split_steps(text)
        extracted = grading.extract_answer_from_text("\n".join(s.text for s in steps))
        return cls(
            steps=steps,
            final_answer=extracted.raw if extracted is not None else None,
            provenance=provenance,
            gen_params=gen_params or GenParams(),
        )

    @property
    def text(self) -> str:
        return "\n".join(s.text for s in self.steps)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "steps": [s.text for s in self.steps],
            "final_answer": self.final_answer,
            "provenance": self.provenance,
            "gen_params": self.gen_params.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReasoningPath":
        steps = tuple(Step(index=i, text=t) for i, t in enumerate(obj["steps"]))
        return cls(
            steps=steps,
            final_answer=obj.get("final_answer"),
            provenance=obj["provenance"],
            gen_params=GenParams.from_json(obj.get("gen_params", {})),
        )


@dataclass(frozen=True)
class Critique:
    """Step-level verdicts with the first error location and feedback.

    Internal consistency is enforced on construction and therefore on every
    deserialization path: a flawed verdict has a first_error_index whose
    prefix is all-correct, a correct verdict has every step correct, and
    not-evaluated may only appear after the first error.
    """

    step_verdicts: tuple[str, ...]
    first_error_index: Optional[int]
    feedback: str
    overall_verdict: str

    def __post_init__(self) -> None:
        for v in self.step_verdicts:
            if v not in STEP_VERDICTS:
                raise ValueError(f"unknown step verdict {v!r}")
        if self.overall_verdict not in (OVERALL_CORRECT, OVERALL_FLAWED):
            raise ValueError(f"unknown overall verdict {self.overall_verdict!r}")
        flawed = self.overall_verdict == OVERALL_FLAWED
        if flawed != (self.first_error_index is not None):
            raise ValueError("overall_verdict=flawed iff first_error_index is present")
        if flawed:
            k = self.first_error_index
            if not 0 <= k < len(self.step_verdicts):
                raise ValueError(f"first_error_index {k} out of range")
            if any(v != VERDICT_CORRECT for v in self.step_verdicts[:k]):
                raise ValueError("verdicts before the first error must all be correct")
            if self.step_verdicts[k] != VERDICT_INCORRECT:
                raise ValueError("verdict at first_error_index must be incorrect")
        else:
            if any(v != VERDICT_CORRECT for v in self.step_verdicts):
                raise ValueError("a correct critique must mark every step correct")
        for i, v in enumerate(self.step_verdicts):
            if v == VERDICT_NOT_EVALUATED and (
                self.first_error_index is None or i <= self.first_error_index
            ):
                raise ValueError("not-evaluated only allowed after the first error")

    @property
    def is_flawed(self) -> bool:
        return self.overall_verdict == OVERALL_FLAWED

    @classmethod
    def all_correct(cls, n_steps: int, feedback: str = "") -> "Critique":
        return cls(
            step_verdicts=(VERDICT_CORRECT,) * n_steps,
            first_error_index=None,
            feedback=feedback,
            overall_verdict=OVERALL_CORRECT,
        )

    @classmethod
    def flawed_at(cls, n_steps: int, first_error_index: int, feedback: str) -> "Critique":
        """Flawed critique in the incremental shape: early-stop after the error."""
        verdicts = (
            (VERDICT_CORRECT,) * first_error_index
            + (VERDICT_INCORRECT,)
            + (VERDICT_NOT_EVALUATED,) * (n_steps - first_error_index - 1)
        )
        return cls(
            step_verdicts=verdicts,
            first_error_index=first_error_index,
            feedback=feedback,
            overall_verdict=OVERALL_FLAWED,
        )

    def fingerprint(self) -> str:
        body = "|".join(self.step_verdicts) + f"|{self.first_error_index}|{self.feedback}"
        return hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "step_verdicts": list(self.step_verdicts),
            "first_error_index": self.first_error_index,
            "feedback": self.feedback,
            "overall_verdict": self.overall_verdict,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Critique":
        return cls(
            step_verdicts=tuple(obj["step_verdicts"]),
            first_error_index=obj.get("first_error_index"),
            feedback=obj.get("feedback", ""),
            overall_verdict=obj["overall_verdict"],
        )


@dataclass(frozen=True)
class RefinementRecord:
    """One (response, critique, refinement) exchange for a query."""

    query_id: str
    base_path: ReasoningPath
    critique: Critique
    refined_path: ReasoningPath
    round_index: int

    def __post_init__(self) -> None:
        if self.round_index < 1:
            raise ValueError("round_index starts at 1 (round 0 is the initial response)")
        if self.refined_path.provenance != "refinement":
            raise ValueError("refined_path must carry refinement provenance")

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "query_id": self.query_id,
            "base_path": self.base_path.to_json(),
            "critique": self.critique.to_json(),
            "refined_path": self.refined_path.to_json(),
            "round_index": self.round_index,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RefinementRecord":
        return cls(
            query_id=obj["query_id"],
            base_path=ReasoningPath.from_json(obj["base_path"]),
            critique=Critique.from_json(obj["critique"]),
            refined_path=ReasoningPath.from_json(obj["refined_path"]),
            round_index=obj["round_index"],
        )


@dataclass(frozen=True)
class InteractionHistory:
    """The multi-round record (x, y_0, (c_1, y_1), (c_2, y_2), ...).

    Round 0 is the initial response; completed rounds are (critique,
    refinement) pairs indexed from 1. Histories are append-only: append_round
    returns a new value and never mutates prior rounds.
    """

    query: Query
    initial: ReasoningPath
    rounds: tuple[tuple[Critique, ReasoningPath], ...] = ()

    def latest_response(self) -> ReasoningPath:
        return self.rounds[-1][1] if self.rounds else self.initial

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "query": self.query.to_json(),
            "initial": self.initial.to_json(),
            "rounds": [
                {"critique": c.to_json(), "refinement": y.to_json()} for c, y in self.rounds
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InteractionHistory":
        rounds = tuple(
            (Critique.from_json(r["critique"]), ReasoningPath.from_json(r["refinement"]))
            for r in obj["rounds"]
        )
        return cls(
            query=Query.from_json(obj["query"]),
            initial=ReasoningPath.from_json(obj["initial"]),
            rounds=rounds,
        )


def append_round(
    history: InteractionHistory,
    critique: Critique,
    refinement: ReasoningPath,
    round_index: Optional[int] = None,
) -> InteractionHistory:
    """Return a new history with one more (critique, refinement) round.

    round_index, when given, must equal len(rounds) + 1; anything else is a
    contiguity violation and is rejected.
    """
    expected = len(history.rounds) + 1
    if round_index is not None and round_index != expected:
        raise ValueError(f"round_index {round_index} != expected {expected}")
    return InteractionHistory(
        query=history.query,
        initial=history.initial,
        rounds=history.rounds + ((critique, refinement),),
    )


def context_view(
    history: InteractionHistory,
    role: str,
    mode: str = "full",
    pending_critique: Optional[Critique] = None,
) -> tuple[Message, ...]:
    """Pure function building the message context for the next call.

    role="critique": context for producing c_i where i = len(rounds)+1.
      full      -> (x, y_0, c_1, y_1, ..., c_{i-1}, y_{i-1})
      truncated -> (x, y_{i-1}) only
    role="refinement": context for producing y_i; requires the current
      round's critique (pending_critique = c_i).
      full      -> (x, y_0, c_1, y_1, ..., c_i)
      truncated -> (x, y_{i-1}, c_i)
    """
    from .critformat import render_critique

    if role not in (ROLE_CRITIQUE, "refinement"):
        raise ValueError(f"unknown role {role!r}")
    if mode not in ("full", "truncated"):
        raise ValueError(f"unknown mode {mode!r}")
    if role == "refinement" and pending_critique is None:
        raise ValueError("refinement context requires the current round's critique")

    x = Message(ROLE_QUERY, history.query.text)
    prev = Message(ROLE_RESPONSE, history.latest_response().text)

    if mode == "truncated":
        out = [x, prev]
    else:
        out = [x, Message(ROLE_RESPONSE, history.initial.text)]
        for critique, refinement in history.rounds:
            out.append(Message(ROLE_CRITIQUE, render_critique(critique)))
            out.append(Message(ROLE_RESPONSE, refinement.text))
    if role == "refinement":
        out.append(Message(ROLE_CRITIQUE, render_critique(pending_critique)))
    return tuple(out)
