"""Flawed reasoning path construction (stage 1 of the critique data pipeline).

Three strategies:
  rg1 — repeated sampling at exploration temperature, partitioned by reward;
  rg2 — prefix-preserving regeneration from a chosen step at escalating
        temperature, recording the error start step;
  rg3 — instructed mistake injection with location, type, and detail
        metadata, retried up to a fixed attempt budget.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from . import grading, prompts
from .backends import Gateway, GenerationRequest
from .core import GenParams, Query, ReasoningPath, SCHEMA_VERSION
from .errors import ReplyParseError
from .jsonl import write_jsonl
from .seeds import derive_seed

logger = logging.getLogger(__name__)

HINT_NONE = "none"
HINT_REFERENCE = "reference-only"
HINT_REFERENCE_START = "reference+start-step"
HINT_LOCATION_DETAIL = "location+detail"
HINTS = (HINT_NONE, HINT_REFERENCE, HINT_REFERENCE_START, HINT_LOCATION_DETAIL)

DEFAULT_TAXONOMY = (
    "calculation-error",
    "misread-condition",
    "wrong-operation",
    "unit-error",
    "skipped-justification",
)

RG1_TEMPERATURE = 0.7
RG2_TEMPERATURES = (0.7, 1.0, 1.3)
RG3_MAX_ATTEMPTS = 16


@dataclass(frozen=True)
class FlawRecord:
    """A flawed path plus the error metadata its strategy can vouch for."""

    query_id: str
    flawed_path: ReasoningPath
    hint: str
    reference_path: Optional[ReasoningPath] = None
    error_start_step: Optional[int] = None
    error_type: Optional[str] = None
    error_detail: Optional[str] = None

    def __post_init__(self) -> None:
        if self.hint not in HINTS:
            raise ValueError(f"unknown hint {self.hint!r}")
        # hint levels are strictly nested: each level adds fields
        if self.hint != HINT_NONE and self.reference_path is None:
            raise ValueError(f"hint {self.hint} requires a reference path")
        if self.hint in (HINT_REFERENCE_START, HINT_LOCATION_DETAIL):
            if self.error_start_step is None:
                raise ValueError(f"hint {self.hint} requires error_start_step")
        if self.hint == HINT_LOCATION_DETAIL:
            if not self.error_type or not self.error_detail:
                raise ValueError("location+detail requires error_type and error_detail")

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "query_id": self.query_id,
            "flawed_path": self.flawed_path.to_json(),
            "reference_path": None
            if self.reference_path is None
            else self.reference_path.to_json(),
            "hint": self.hint,
            "error_start_step": self.error_start_step,
            "error_type": self.error_type,
            "error_detail": self.error_detail,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FlawRecord":
        ref = obj.get("reference_path")
        return cls(
            query_id=obj["query_id"],
            flawed_path=ReasoningPath.from_json(obj["flawed_path"]),
            reference_path=None if ref is None else ReasoningPath.from_json(ref),
            hint=obj["hint"],
            error_start_step=obj.get("error_start_step"),
            error_type=obj.get("error_type"),
            error_detail=obj.get("error_detail"),
        )


@dataclass
class RG1Result:
    flawed: list[FlawRecord]
    correct: list[ReasoningPath]


def rg1_sample(
    gateway: Gateway,
    actor_id: str,
    query: Query,
    budget: int,
    temperature: float = RG1_TEMPERATURE,
    seed: int = 0,
) -> RG1Result:
    """Sample `budget` responses and partition them by reward.

    Flawed records get a reference-only hint when a correct sibling exists
    in the same batch, else no hint. An empty flawed list is a valid outcome.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    messages = prompts.build_reasoning_messages(query)
    request = GenerationRequest(
        messages=messages,
        temperature=temperature,
        n=budget,
        seed=derive_seed("rg1", seed, query.id),
        backend_id=actor_id,
    )
    params = GenParams(temperature=temperature, seed=request.seed, backend_id=actor_id)
    paths = [
        ReasoningPath.from_text(text, provenance="rg1", gen_params=params)
        for text in gateway.generate(request)
    ]
    correct = [p for p in paths if grading.reward(query, p) == 1]
    reference = correct[0] if correct else None
    flawed = [
        FlawRecord(
            query_id=query.id,
            flawed_path=p,
            hint=HINT_REFERENCE if reference is not None else HINT_NONE,
            reference_path=reference,
        )
        for p in paths
        if grading.reward(query, p) == 0
    ]
    return RG1Result(flawed=flawed, correct=correct)


def default_rg2_schedule(n_steps: int) -> list[tuple[int, float]]:
    """(step, temperature) pairs: middle-to-last steps swept per temperature.

    Each retry moves to a different step; once the step candidates are
    exhausted the temperature escalates.
    """
    start = max(n_steps // 3, 0)
    candidates = list(range(start, n_steps)) or [0]
    return [(k, t) for t in RG2_TEMPERATURES for k in candidates]


def rg2_error_location(
    gateway: Gateway,
    actor_id: str,
    query: Query,
    correct_path: ReasoningPath,
    schedule: Optional[Sequence[tuple[int, float]]] = None,
    seed: int = 0,
) -> Optional[FlawRecord]:
    """Regenerate from a chosen step until the continuation breaks the answer.

    Steps before the chosen one are carried over byte-identically. Returns
    None when the schedule is exhausted without producing a flawed path.
    """
    if grading.reward(query, correct_path) != 1:
        raise ValueError("rg2 requires a reward-correct base path")
    if schedule is None:
        schedule = default_rg2_schedule(len(correct_path.steps))
    for attempt, (k, temperature) in enumerate(schedule):
        prefix = correct_path.steps[:k]
        messages = prompts.build_continuation_messages(query, prefix)
        request = GenerationRequest(
            messages=messages,
            temperature=temperature,
            n=1,
            seed=derive_seed("rg2", seed, query.id, attempt),
            backend_id=actor_id,
        )
        continuation = gateway.generate(request)[0]
        prefix_text = "\n".join(s.text for s in prefix)
        full_text = f"{prefix_text}\n{continuation}" if prefix_text else continuation
        params = GenParams(temperature=temperature, seed=request.seed, backend_id=actor_id)
        candidate = ReasoningPath.from_text(full_text, provenance="rg2", gen_params=params)
        if grading.reward(query, candidate) == 0:
            return FlawRecord(
                query_id=query.id,
                flawed_path=candidate,
                hint=HINT_REFERENCE_START,
                reference_path=correct_path,
                error_start_step=k,
            )
    return None


_INJECTION_RE = re.compile(
    r"ERROR_STEP\s*:\s*(\d+)\s*\n\s*ERROR_TYPE\s*:\s*(.+?)\s*\n\s*ERROR_DETAIL\s*:\s*(.+?)\s*\n\s*FLAWED_RESPONSE\s*:\s*\n(.*)",
    re.IGNORECASE | re.DOTALL,
)


def parse_injection_reply(text: str, taxonomy: Sequence[str]) -> tuple[int, str, str, str]:
    """Parse an injection reply into (step, type, detail, flawed response)."""
    m = _INJECTION_RE.search(text)
    if not m:
        raise ReplyParseError("reply is missing the ERROR_STEP/FLAWED_RESPONSE structure")
    step = int(m.group(1))
    error_type = m.group(2).strip().lower()
    if error_type not in taxonomy:
        raise ReplyParseError(f"error type {error_type!r} not in taxonomy")
    detail = m.group(3).strip()
    flawed_text = m.group(4).strip()
    if not detail or not flawed_text:
        raise ReplyParseError("empty error detail or flawed response")
    return step, error_type, detail, flawed_text


def rg3_inject_mistake(
    gateway: Gateway,
    actor_id: str,
    query: Query,
    correct_path: ReasoningPath,
    taxonomy: Sequence[str] = DEFAULT_TAXONOMY,
    max_attempts: int = RG3_MAX_ATTEMPTS,
    temperature: float = RG1_TEMPERATURE,
    seed: int = 0,
) -> Optional[FlawRecord]:
    """Instruct the actor to inject a mistake and reason onward from it.

    The injected response must actually fail the reward check; otherwise the
    attempt is retried, up to max_attempts. Returns None on exhaustion.
    """
    if grading.reward(query, correct_path) != 1:
        raise ValueError("rg3 requires a reward-correct base path")
    messages = prompts.build_injection_messages(query, correct_path, tuple(taxonomy))
    for attempt in range(max_attempts):
        request = GenerationRequest(
            messages=messages,
            temperature=temperature,
            n=1,
            seed=derive_seed("rg3", seed, query.id, attempt),
            backend_id=actor_id,
        )
        reply = gateway.generate(request)[0]
        try:
            step, error_type, detail, flawed_text = parse_injection_reply(reply, taxonomy)
        except ReplyParseError as exc:
            logger.debug("rg3 attempt %d parse failure: %s", attempt + 1, exc)
            continue
        params = GenParams(temperature=temperature, seed=request.seed, backend_id=actor_id)
        candidate = ReasoningPath.from_text(flawed_text, provenance="rg3", gen_params=params)
        if step >= len(candidate.steps):
            logger.debug("rg3 attempt %d: error step out of range", attempt + 1)
            continue
        if grading.reward(query, candidate) == 0:
            return FlawRecord(
                query_id=query.id,
                flawed_path=candidate,
                hint=HINT_LOCATION_DETAIL,
                reference_path=correct_path,
                error_start_step=step,
                error_type=error_type,
                error_detail=detail,
            )
    return None


def write_flaw_store(path, records: Sequence[FlawRecord], queries: dict[str, Query]) -> int:
    """Persist flaw records, re-checking reward = 0 for every row at write time."""
    rows = []
    for record in records:
        query = queries.get(record.query_id)
        if query is None:
            raise ValueError(f"flaw record references unknown query {record.query_id}")
        if grading.reward(query, record.flawed_path) != 0:
            raise ValueError(
                f"flaw record for {record.query_id} passes the reward check; refusing to store"
            )
        rows.append({"kind": "flaw", **record.to_json()})
    return write_jsonl(path, rows)
