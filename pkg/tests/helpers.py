"""Shared test scaffolding: deterministic rule-driven backends and builders."""

from __future__ import annotations

from critpipe.core import Critique, GenParams, Message, Query, ReasoningPath
from critpipe.critformat import render_critique


class RuleBackend:
    """Deterministic scripted backend driven by a rule function.

    fn(request, sample_index) -> completion text. Records every request for
    call-count and context assertions.
    """

    def __init__(self, fn):
        self.fn = fn
        self.requests = []

    def generate(self, request):
        self.requests.append(request)
        return [self.fn(request, i) for i in range(request.n)]


def segment(messages, role):
    found = None
    for m in messages:
        if m.role == role:
            found = m.content
    return found


def query_of(messages):
    return segment(messages, "query")


def make_query(i: int = 0, gold: str = "72", difficulty=None, text=None) -> Query:
    return Query(
        id=f"q{i}",
        text=text or f"Problem number {i}: compute the quantity.",
        gold_answer=gold,
        source="custom",
        difficulty=difficulty,
    )


def response_text(answer: str, filler: str = "work") -> str:
    return f"Step 0: set things up ({filler}).\nStep 1: therefore the result is {answer}.\n#### {answer}"


def make_path(answer: str, provenance: str = "sampled", filler: str = "work") -> ReasoningPath:
    return ReasoningPath.from_text(response_text(answer, filler), provenance=provenance)


def flawed_reply(n_steps: int, index: int, feedback: str = "Recheck the arithmetic.") -> str:
    return render_critique(Critique.flawed_at(n_steps, index, feedback))


def correct_reply(n_steps: int) -> str:
    return render_critique(Critique.all_correct(n_steps))
