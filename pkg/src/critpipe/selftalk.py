"""Step-level self-talk data construction.

Three stages: interleave critique feedback into a reasoning path as
reflections, iterate refine+re-critique until a full critic pass is clean,
then smooth the rigid chain into flowing think-aloud text. Only chains whose
final answer passes the reward check are stored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from . import grading, prompts
from .backends import Gateway, GenerationRequest
from .core import Critique, Query, ReasoningPath, SCHEMA_VERSION, split_steps
from .critformat import parse_critique_reply
from .errors import ReplyParseError
from .seeds import derive_seed

logger = logging.getLogger(__name__)

SEGMENT_STEP = "reasoning-step"
SEGMENT_REFLECTION = "reflection"
SEGMENT_TRANSITION = "transition"
DEFAULT_MAX_ITERS = 4


@dataclass(frozen=True)
class Segment:
    kind: str
    text: str


@dataclass(frozen=True)
class ThinkingChain:
    """A reasoning chain with interleaved reflections.

    clean is set only after a full critic pass over the live suffix finds no
    errors; pending_error_index tracks the first erroneous reasoning step
    reported by the most recent critique (None when that critique was clean).
    """

    segments: tuple[Segment, ...]
    clean: bool = False
    iterations_used: int = 0
    pending_error_index: Optional[int] = None
    smoothed_text: Optional[str] = None
    rigid: bool = False

    def __post_init__(self) -> None:
        if not any(s.kind == SEGMENT_STEP for s in self.segments):
            raise ValueError("a thinking chain needs at least one reasoning step")

    def reasoning_steps(self) -> list[str]:
        return [s.text for s in self.segments if s.kind == SEGMENT_STEP]

    def rigid_text(self) -> str:
        return "\n".join(s.text for s in self.segments)

    def emitted_text(self) -> str:
        return self.smoothed_text if self.smoothed_text is not None else self.rigid_text()

    def as_path(self) -> ReasoningPath:
        return ReasoningPath.from_text("\n".join(self.reasoning_steps()), provenance="self-talk")


def interleave_feedback(
    path: ReasoningPath, critique: Critique, insert_affirmations: bool = False
) -> ThinkingChain:
    """Insert the critique's feedback as a reflection after the step it targets.

    The critique's verdicts must align with the path's steps. All-correct
    critiques yield a reflection only where feedback text exists (after the
    final step), or affirmative reflections when insert_affirmations is set.
    """
    if len(critique.step_verdicts) != len(path.steps):
        raise ValueError(
            f"critique covers {len(critique.step_verdicts)} steps, path has {len(path.steps)}"
        )
    segments: list[Segment] = []
    for step in path.steps:
        segments.append(Segment(SEGMENT_STEP, step.text))
        if critique.is_flawed and step.index == critique.first_error_index and critique.feedback:
            segments.append(Segment(SEGMENT_REFLECTION, critique.feedback))
        elif insert_affirmations and not critique.is_flawed:
            segments.append(Segment(SEGMENT_REFLECTION, "This step checks out."))
    if not critique.is_flawed and critique.feedback and not insert_affirmations:
        segments.append(Segment(SEGMENT_REFLECTION, critique.feedback))
    return ThinkingChain(
        segments=tuple(segments),
        clean=False,
        iterations_used=0,
        pending_error_index=critique.first_error_index,
    )


def _critique_steps(
    gateway: Gateway,
    critic_id: str,
    query: Query,
    step_texts: Sequence[str],
    seed_parts: tuple,
) -> Critique:
    path = ReasoningPath.from_text("\n".join(step_texts), provenance="sampled")
    request = GenerationRequest(
        messages=prompts.build_holistic_critique_messages(query, path),
        temperature=0.0,
        n=1,
        seed=derive_seed(*seed_parts),
        backend_id=critic_id,
    )
    reply = gateway.generate(request)[0]
    try:
        return parse_critique_reply(reply, max(len(step_texts), 1))
    except ReplyParseError:
        return Critique.flawed_at(max(len(step_texts), 1), 0, reply.strip())


def iterate_until_clean(
    gateway: Gateway,
    actor_id: str,
    critic_id: str,
    query: Query,
    chain: ThinkingChain,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
    temperature: float = 0.7,
) -> Optional[ThinkingChain]:
    """Refine and re-critique until a critic pass finds no errors.

    Chains built from an error-free critique pass straight through with zero
    iterations. Otherwise each pass critiques the live suffix (from the first
    refined step onward; earlier segments are frozen), interleaves new
    feedback, and refines from the first erroneous step. Chains still dirty
    after max_iters passes are dropped (None, logged).
    """
    if chain.pending_error_index is None:
        return replace(chain, clean=True)

    segments = list(chain.segments)
    suffix_start = 0  # index into reasoning steps: critic scope starts here
    passes = 0
    while passes < max_iters:
        passes += 1
        steps = [s.text for s in segments if s.kind == SEGMENT_STEP]
        scope = steps[suffix_start:]
        critique = _critique_steps(
            gateway, critic_id, query, scope, ("selftalk-critique", seed, query.id, passes)
        )
        if not critique.is_flawed:
            return ThinkingChain(
                segments=tuple(segments),
                clean=True,
                iterations_used=passes,
                pending_error_index=None,
            )
        error_step = suffix_start + critique.first_error_index
        # locate the segment position right after the erroneous reasoning step
        seen = -1
        insert_at = len(segments)
        for pos, seg in enumerate(segments):
            if seg.kind == SEGMENT_STEP:
                seen += 1
                if seen == error_step:
                    insert_at = pos + 1
                    break
        if critique.feedback and not (
            insert_at < len(segments)
            and segments[insert_at].kind == SEGMENT_REFLECTION
            and segments[insert_at].text == critique.feedback
        ):
            segments.insert(insert_at, Segment(SEGMENT_REFLECTION, critique.feedback))
            insert_at += 1
        # the erroneous step stays in the chain (mistake + reflection +
        # correction reads as self-talk); the superseded continuation after
        # it is dropped and regenerated from the steps before the error
        tail = segments[insert_at:]
        segments = segments[:insert_at] + [s for s in tail if s.kind != SEGMENT_STEP]
        prefix_steps = split_steps("\n".join(steps[:error_step]))
        request = GenerationRequest(
            messages=prompts.build_continuation_messages(query, prefix_steps),
            temperature=temperature,
            n=1,
            seed=derive_seed("selftalk-refine", seed, query.id, passes),
            backend_id=actor_id,
        )
        continuation = gateway.generate(request)[0]
        new_steps = [s.text for s in split_steps(continuation)]
        segments.extend(Segment(SEGMENT_STEP, t) for t in new_steps)
        # re-critique spans exactly the refined suffix; the kept erroneous
        # step sits at error_step, so the first refined step is one past it
        suffix_start = error_step + 1
    logger.info("dropping chain for %s: still dirty after %d passes", query.id, max_iters)
    return None


def smooth(
    gateway: Gateway,
    smoother_id: str,
    query: Query,
    chain: ThinkingChain,
    seed: int = 0,
    temperature: float = 0.7,
) -> ThinkingChain:
    """Rewrite a clean chain into flowing self-talk, preserving the answer.

    The smoothed text must extract to the same final answer; otherwise one
    retry is made, and a second failure emits the rigid form with a flag.
    """
    if not chain.clean:
        raise ValueError("smooth requires a clean chain")
    target = grading.extract_answer_from_text(chain.rigid_text())
    for attempt in range(2):
        request = GenerationRequest(
            messages=prompts.build_smoothing_messages(query, chain.rigid_text()),
            temperature=temperature,
            n=1,
            seed=derive_seed("smooth", seed, query.id, attempt),
            backend_id=smoother_id,
        )
        candidate = gateway.generate(request)[0]
        extracted = grading.extract_answer_from_text(candidate)
        if (
            target is not None
            and extracted is not None
            and grading.equivalent(extracted, target)
        ):
            return replace(chain, smoothed_text=candidate, rigid=False)
        logger.info("smoothing attempt %d changed the answer for %s; rejected", attempt + 1, query.id)
    return replace(chain, smoothed_text=None, rigid=True)


def verify_and_store(chain: ThinkingChain, query: Query) -> Optional[dict]:
    """Final gate: keep the record only when the emitted text earns reward 1."""
    if grading.reward_text(query, chain.emitted_text()) != 1:
        return None
    return {
        "schema_version": SCHEMA_VERSION,
        "query_id": query.id,
        "self_talk_text": chain.emitted_text(),
        "iterations_used": chain.iterations_used,
        "rigid_flag": chain.rigid,
    }


def build_self_talk_record(
    gateway: Gateway,
    actor_id: str,
    critic_id: str,
    smoother_id: str,
    query: Query,
    path: ReasoningPath,
    critique: Critique,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
    insert_affirmations: bool = False,
) -> Optional[dict]:
    """Full pipeline for one (path, critique) pair: interleave, iterate,
    smooth, verify. None when the chain is dropped or fails verification."""
    chain = interleave_feedback(path, critique, insert_affirmations=insert_affirmations)
    chain = iterate_until_clean(
        gateway, actor_id, critic_id, query, chain, max_iters=max_iters, seed=seed
    )
    if chain is None:
        return None
    chain = smooth(gateway, smoother_id, query, chain, seed=seed)
    return verify_and_store(chain, query)
