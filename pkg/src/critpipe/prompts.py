"""Prompt builders over the editable template assets in critpipe/templates/.

Builders return ordered Message tuples. Domain segments keep their domain
roles (query/response/critique/prefix) so scripted and simulated backends
can inspect them structurally; the HTTP backend flattens them into chat
messages at the wire.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

from .core import Critique, Message, Query, ReasoningPath, ROLE_CRITIQUE, ROLE_QUERY, ROLE_RESPONSE
from .critformat import render_critique

ROLE_SYSTEM = "system"
ROLE_PREFIX = "prefix"


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return (resources.files("critpipe") / "templates" / f"{name}.txt").read_text("utf-8").strip()


def build_reasoning_messages(query: Query) -> tuple[Message, ...]:
    return (Message(ROLE_SYSTEM, load_template("reasoning")), Message(ROLE_QUERY, query.text))


def build_continuation_messages(query: Query, prefix_steps: tuple) -> tuple[Message, ...]:
    prefix_text = "\n".join(s.text for s in prefix_steps)
    return (
        Message(ROLE_SYSTEM, load_template("continue_from_prefix")),
        Message(ROLE_QUERY, query.text),
        Message(ROLE_PREFIX, prefix_text),
    )


def render_hint_section(hint: str, record) -> str:
    """Human-readable hint block for the holistic critique prompt."""
    if hint == "none":
        return "No reference material is provided."
    parts = []
    if record is not None and record.reference_path is not None:
        parts.append(
            "A reference solution known to be correct:\n" + record.reference_path.text
        )
    if hint in ("reference+start-step", "location+detail") and record is not None:
        if record.error_start_step is not None:
            if hint == "reference+start-step":
                parts.append(f"The error likely starts at step {record.error_start_step}.")
            else:
                parts.append(f"The error starts at step {record.error_start_step}.")
    if hint == "location+detail" and record is not None:
        if record.error_type:
            parts.append(f"Error type: {record.error_type}.")
        if record.error_detail:
            parts.append(f"Details: {record.error_detail}")
    return "\n".join(parts) if parts else "No reference material is provided."


def build_holistic_critique_messages(
    query: Query, path: ReasoningPath, hint: str = "none", record=None
) -> tuple[Message, ...]:
    system = load_template("critique_holistic").format(
        hint_section=render_hint_section(hint, record)
    )
    return (
        Message(ROLE_SYSTEM, system),
        Message(ROLE_QUERY, query.text),
        Message(ROLE_RESPONSE, path.text),
    )


def build_step_critique_messages(
    query: Query, path: ReasoningPath, step_index: int
) -> tuple[Message, ...]:
    system = load_template("critique_step").format(step_index=step_index)
    context = "\n".join(s.text for s in path.steps[: step_index + 1])
    return (
        Message(ROLE_SYSTEM, system),
        Message(ROLE_QUERY, query.text),
        Message(ROLE_RESPONSE, context),
    )


def build_refinement_messages(
    query: Query, path: ReasoningPath, critique: Critique
) -> tuple[Message, ...]:
    return (
        Message(ROLE_SYSTEM, load_template("refinement")),
        Message(ROLE_QUERY, query.text),
        Message(ROLE_RESPONSE, path.text),
        Message(ROLE_CRITIQUE, render_critique(critique)),
    )


def build_injection_messages(
    query: Query, correct_path: ReasoningPath, taxonomy: tuple[str, ...]
) -> tuple[Message, ...]:
    system = load_template("inject_mistake").format(taxonomy=", ".join(taxonomy))
    return (
        Message(ROLE_SYSTEM, system),
        Message(ROLE_QUERY, query.text),
        Message(ROLE_RESPONSE, correct_path.text),
    )


def build_smoothing_messages(query: Query, rigid_text: str) -> tuple[Message, ...]:
    return (
        Message(ROLE_SYSTEM, load_template("smooth")),
        Message(ROLE_QUERY, query.text),
        Message(ROLE_RESPONSE, rigid_text),
    )


def with_system(messages: tuple[Message, ...], system_name: str) -> tuple[Message, ...]:
    """Prepend a template system message to a bare context (e.g. a context_view)."""
    return (Message(ROLE_SYSTEM, load_template(system_name)),) + tuple(messages)
