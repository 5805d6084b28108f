"""Machine-readable critique reply grammar.

Annotator and critic replies must end in a strict trailer so parsing is
deterministic:

    VERDICTS: correct, correct, incorrect, not-evaluated
    FIRST_ERROR: 2            (or: none)
    FEEDBACK: free text, may span the remaining lines

Incremental per-step replies use the two-line form:

    STEP_VERDICT: correct     (or: incorrect)
    FEEDBACK: ...
"""

from __future__ import annotations

import re
from typing import Optional

from .core import (
    Critique,
    OVERALL_CORRECT,
    OVERALL_FLAWED,
    STEP_VERDICTS,
    VERDICT_CORRECT,
    VERDICT_INCORRECT,
)
from .errors import ReplyParseError

_VERDICTS_RE = re.compile(r"^\s*VERDICTS\s*:\s*(.*)$", re.IGNORECASE)
_FIRST_ERROR_RE = re.compile(r"^\s*FIRST_ERROR\s*:\s*(.*)$", re.IGNORECASE)
_FEEDBACK_RE = re.compile(r"^\s*FEEDBACK\s*:\s*(.*)$", re.IGNORECASE)
_STEP_VERDICT_RE = re.compile(r"^\s*STEP_VERDICT\s*:\s*(\S+)\s*$", re.IGNORECASE)


def render_critique(critique: Critique) -> str:
    """Canonical text form of a critique (inverse of parse_critique_reply)."""
    lines = []
    if critique.feedback and critique.is_flawed:
        lines.append(f"Review: the solution goes wrong at step {critique.first_error_index}.")
    lines.append("VERDICTS: " + ", ".join(critique.step_verdicts))
    first = "none" if critique.first_error_index is None else str(critique.first_error_index)
    lines.append(f"FIRST_ERROR: {first}")
    lines.append(f"FEEDBACK: {critique.feedback}")
    return "\n".join(lines)


def parse_critique_reply(text: str, n_steps: int) -> Critique:
    """Parse a trailer-bearing reply into a Critique aligned with n_steps.

    Raises ReplyParseError on a missing trailer, unknown verdict tokens,
    verdict-count mismatch, or an out-of-range first-error index; Critique's
    own constructor enforces internal consistency on top.
    """
    verdicts: Optional[list[str]] = None
    first_error: Optional[int] = None
    saw_first_error = False
    feedback_parts: list[str] = []
    in_feedback = False

    for line in text.splitlines():
        m = _VERDICTS_RE.match(line)
        if m and not in_feedback:
            tokens = [t.strip().lower() for t in m.group(1).split(",") if t.strip()]
            verdicts = tokens
            continue
        m = _FIRST_ERROR_RE.match(line)
        if m and not in_feedback:
            tok = m.group(1).strip().lower()
            saw_first_error = True
            if tok in ("none", "-", ""):
                first_error = None
            else:
                try:
                    first_error = int(tok)
                except ValueError:
                    raise ReplyParseError(f"bad FIRST_ERROR value {tok!r}")
            continue
        m = _FEEDBACK_RE.match(line)
        if m:
            in_feedback = True
            feedback_parts.append(m.group(1))
            continue
        if in_feedback:
            feedback_parts.append(line)

    if verdicts is None or not saw_first_error:
        raise ReplyParseError("reply is missing the VERDICTS/FIRST_ERROR trailer")
    for tok in verdicts:
        if tok not in STEP_VERDICTS:
            raise ReplyParseError(f"unknown verdict token {tok!r}")
    if len(verdicts) != n_steps:
        raise ReplyParseError(f"expected {n_steps} verdicts, got {len(verdicts)}")
    if first_error is not None and not 0 <= first_error < n_steps:
        raise ReplyParseError(f"first error index {first_error} out of range for {n_steps} steps")

    feedback = "\n".join(feedback_parts).strip()
    overall = OVERALL_CORRECT if first_error is None else OVERALL_FLAWED
    try:
        return Critique(
            step_verdicts=tuple(verdicts),
            first_error_index=first_error,
            feedback=feedback,
            overall_verdict=overall,
        )
    except ValueError as exc:
        raise ReplyParseError(f"inconsistent critique reply: {exc}") from exc


def parse_step_reply(text: str) -> tuple[str, str]:
    """Parse one incremental step reply into (verdict, feedback)."""
    verdict: Optional[str] = None
    feedback_parts: list[str] = []
    in_feedback = False
    for line in text.splitlines():
        m = _STEP_VERDICT_RE.match(line)
        if m and not in_feedback:
            verdict = m.group(1).strip().lower()
            continue
        m = _FEEDBACK_RE.match(line)
        if m:
            in_feedback = True
            feedback_parts.append(m.group(1))
            continue
        if in_feedback:
            feedback_parts.append(line)
    if verdict not in (VERDICT_CORRECT, VERDICT_INCORRECT):
        raise ReplyParseError(f"missing or unknown STEP_VERDICT in reply: {verdict!r}")
    return verdict, "\n".join(feedback_parts).strip()
