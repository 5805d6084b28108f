"""Uniform generation gateway over three backend kinds.

* HttpChatBackend — chat-completions JSON over HTTP with bounded concurrency
  and capped-exponential-backoff retries.
* ScriptedBackend — deterministic table lookup keyed by an exact prompt hash
  (JSONL rows of {match, completions}); completions cycle by sample index.
* Simulated backends — a calibrated stochastic actor/critic pair whose output
  is a pure function of (request content, seed, sample index), so every
  pipeline is runnable and statistically checkable without GPUs.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Protocol, Sequence

from . import grading
from .core import (
    Critique,
    GenParams,
    Message,
    Query,
    ReasoningPath,
    ROLE_CRITIQUE,
    ROLE_QUERY,
    ROLE_RESPONSE,
    split_steps,
)
from .critformat import parse_critique_reply, render_critique
from .errors import BackendError, BackendUnavailable, ConfigError, MalformedResponse
from .jsonl import dumps_canonical, read_jsonl, sha256_text, write_jsonl
from .seeds import derive_seed, rng_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationRequest:
    """One generation call: ordered messages plus decoding parameters."""

    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    n: int = 1
    seed: int = 0
    backend_id: str = ""

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


def prompt_fingerprint(messages: Sequence[Message]) -> str:
    """Exact-prompt hash used by the scripted table format."""
    payload = dumps_canonical([[m.role, m.content] for m in messages])
    return sha256_text(payload)


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> list[str]: ...


class Gateway:
    """Registry dispatching requests to backends by backend_id."""

    def __init__(self) -> None:
        self._backends: dict[str, Backend] = {}
        self.call_log: list[GenerationRequest] = []
        self.log_calls = False

    def register(self, backend_id: str, backend: Backend) -> None:
        self._backends[backend_id] = backend

    def alias(self, new_id: str, existing_id: str) -> None:
        self._backends[new_id] = self._backends[existing_id]

    def has(self, backend_id: str) -> bool:
        return backend_id in self._backends

    def generate(self, request: GenerationRequest) -> list[str]:
        backend = self._backends.get(request.backend_id)
        if backend is None:
            raise ConfigError(f"no backend registered under {request.backend_id!r}")
        if self.log_calls:
            self.call_log.append(request)
        completions = backend.generate(request)
        if len(completions) != request.n:
            raise MalformedResponse(
                f"backend {request.backend_id!r} returned {len(completions)} completions, "
                f"expected {request.n}"
            )
        return completions


class ScriptedBackend:
    """Deterministic prompt-table backend.

    The table maps prompt_fingerprint(messages) to a completion list; sample
    i receives completions[i % len]. Unknown prompts raise unless a default
    completion is configured.
    """

    def __init__(self, default: Optional[str] = None) -> None:
        self._table: dict[str, list[str]] = {}
        self.default = default

    def add(self, messages: Sequence[Message], completions: Sequence[str]) -> None:
        if not completions:
            raise ValueError("completions must be non-empty")
        self._table[prompt_fingerprint(messages)] = list(completions)

    @classmethod
    def from_jsonl(cls, path, default: Optional[str] = None) -> "ScriptedBackend":
        backend = cls(default=default)
        for row in read_jsonl(path):
            backend._table[row["match"]] = list(row["completions"])
        return backend

    def to_jsonl(self, path) -> int:
        rows = [
            {"schema_version": 1, "match": key, "completions": comps}
            for key, comps in sorted(self._table.items())
        ]
        return write_jsonl(path, rows)

    def generate(self, request: GenerationRequest) -> list[str]:
        key = prompt_fingerprint(request.messages)
        completions = self._table.get(key)
        if completions is None:
            if self.default is not None:
                return [self.default] * request.n
            raise BackendError(f"no scripted completion for prompt {key[:12]}…")
        return [completions[i % len(completions)] for i in range(request.n)]


# ---------------------------------------------------------------------------
# Simulated backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StochasticActorSpec:
    """Actor simulation: per-difficulty correct probability plus a wrong-answer
    model (one dominant distractor with the given conditional mass, the rest
    uniform over the pool)."""

    level_accuracy: tuple[float, float, float, float, float]
    dominant_mass: float = 0.5
    distractor_pool: int = 4

    def __post_init__(self) -> None:
        if len(self.level_accuracy) != 5:
            raise ValueError("level_accuracy must cover levels 1..5")
        for a in self.level_accuracy:
            if not 0.0 <= a <= 1.0:
                raise ValueError("level accuracies must be in [0,1]")
        for lo, hi in zip(self.level_accuracy[1:], self.level_accuracy[:-1]):
            if lo > hi + 1e-12:
                raise ValueError("level_accuracy must be non-increasing in difficulty")
        if not 0.0 <= self.dominant_mass <= 1.0:
            raise ValueError("dominant_mass must be in [0,1]")
        if self.distractor_pool < 1:
            raise ValueError("distractor_pool must be >= 1")

    @classmethod
    def uniform(
        cls, accuracy: float, dominant_mass: float = 0.5, distractor_pool: int = 4
    ) -> "StochasticActorSpec":
        return cls((accuracy,) * 5, dominant_mass, distractor_pool)

    def accuracy_for(self, difficulty: Optional[int]) -> float:
        level = difficulty if difficulty is not None else 3
        return self.level_accuracy[level - 1]


@dataclass(frozen=True)
class StochasticCriticSpec:
    """Critic simulation: discriminability on both classes, refinement
    helpfulness, and survival of falsely-flagged correct responses."""

    flag_flawed_prob: float  # P[flawed response is flagged flawed]
    pass_correct_prob: float  # P[correct response is passed as correct]
    fix_prob: float  # P[flagged flawed response is fixed by refinement]
    keep_correct_prob: float = 0.9  # P[falsely flagged correct response stays correct]

    def __post_init__(self) -> None:
        for name in ("flag_flawed_prob", "pass_correct_prob", "fix_prob", "keep_correct_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")


def distractor_answers(query: Query, pool_size: int) -> list[str]:
    """Deterministic wrong answers for a query, derived from its id hash.

    Numeric golds get distinct nonzero offsets; anything else gets suffixed
    variants. Index 0 is the dominant distractor.
    """
    gold = grading.canonicalize(query.gold_answer)
    rng = rng_for("distractors", query.id)
    if gold.kind in (grading.KIND_INTEGER, grading.KIND_RATIONAL, grading.KIND_DECIMAL):
        offsets = list(range(1, pool_size + 1))
        rng.shuffle(offsets)
        out = []
        for off in offsets:
            sign = 1 if rng.random() < 0.5 else -1
            value = gold.value + Fraction(sign * off)
            if value.denominator == 1:
                out.append(str(value.numerator))
            else:
                out.append(f"{value.numerator}/{value.denominator}")
        return out
    return [f"{gold.canonical}-alt{j}" for j in range(1, pool_size + 1)]


def _draw_wrong_answer(query: Query, spec: StochasticActorSpec, rng) -> str:
    pool = distractor_answers(query, spec.distractor_pool)
    if spec.distractor_pool == 1 or rng.random() < spec.dominant_mass:
        return pool[0]
    return pool[1 + rng.randrange(spec.distractor_pool - 1)]


def _response_text(answer: str, nonce: str) -> str:
    return (
        f"Step 0: restate the problem and set up the computation (trace {nonce})."
        f"\nStep 1: carry out the arithmetic, which gives {answer}."
        f"\n#### {answer}"
    )


def _continuation_text(answer: str, nonce: str) -> str:
    return f"Continuing, the remaining work gives {answer} (trace {nonce}).\n#### {answer}"


def simulate_critique(
    spec: StochasticCriticSpec,
    path_is_correct: bool,
    seed: int,
    n_steps: int = 1,
) -> Critique:
    """Draw a critique verdict for a path of known oracle correctness.

    Flawed paths are flagged with probability flag_flawed_prob; correct paths
    pass with probability pass_correct_prob. The first-error index of a
    flagged verdict is a seeded draw over the steps (the simulator knows
    final-answer correctness, not step-level truth).
    """
    rng = rng_for("critique", seed)
    if path_is_correct:
        flagged = rng.random() >= spec.pass_correct_prob
    else:
        flagged = rng.random() < spec.flag_flawed_prob
    if not flagged:
        return Critique.all_correct(n_steps)
    index = rng.randrange(max(n_steps, 1))
    feedback = f"Step {index} does not hold up; rework the computation (ref {rng.getrandbits(32):08x})."
    return Critique.flawed_at(max(n_steps, 1), index, feedback)


def simulate_refinement(
    critic_spec: StochasticCriticSpec,
    actor_spec: StochasticActorSpec,
    query: Query,
    was_correct: bool,
    was_flagged: bool,
    seed: int,
    backend_id: str = "simulated",
) -> ReasoningPath:
    """Draw a refinement outcome for a flagged response.

    Flawed+flagged becomes correct with probability fix_prob; correct+flagged
    stays correct with probability keep_correct_prob. Unflagged paths are
    never refined — calling this on one is a precondition violation.
    """
    if not was_flagged:
        raise ValueError("refinement requires a flagged response")
    rng = rng_for("refinement", seed)
    success = rng.random() < (critic_spec.keep_correct_prob if was_correct else critic_spec.fix_prob)
    answer = query.gold_answer if success else _draw_wrong_answer(query, actor_spec, rng)
    text = _response_text(answer, f"{rng.getrandbits(32):08x}")
    return ReasoningPath.from_text(
        text, provenance="refinement", gen_params=GenParams(seed=seed, backend_id=backend_id)
    )


class SimulatedWorld:
    """A query universe shared by a simulated actor/critic backend pair."""

    def __init__(
        self,
        queries: Sequence[Query],
        actor_spec: StochasticActorSpec,
        critic_spec: StochasticCriticSpec,
    ) -> None:
        self.actor_spec = actor_spec
        self.critic_spec = critic_spec
        self._by_text: dict[str, Query] = {}
        for q in queries:
            if q.text in self._by_text and self._by_text[q.text].id != q.id:
                raise ConfigError(f"simulated world requires unique query texts ({q.id})")
            self._by_text[q.text] = q

    def lookup(self, messages: Sequence[Message]) -> Query:
        for m in messages:
            if m.role == ROLE_QUERY:
                query = self._by_text.get(m.content)
                if query is None:
                    raise BackendError(f"simulated world does not know this query")
                return query
        raise BackendError("request carries no query segment")

    def actor_backend(self, backend_id: str = "sim-actor") -> "SimulatedActorBackend":
        return SimulatedActorBackend(self, backend_id)

    def critic_backend(self, backend_id: str = "sim-critic") -> "SimulatedCriticBackend":
        return SimulatedCriticBackend(self, backend_id)


def _segment(messages: Sequence[Message], role: str) -> Optional[str]:
    found = None
    for m in messages:
        if m.role == role:
            found = m.content
    return found


class SimulatedActorBackend:
    """Stochastic actor: initial responses, prefix continuations, refinements.

    Output is a pure function of (request content, seed, sample index); at
    temperature 0 with n=1 it is therefore deterministic by construction.
    """

    def __init__(self, world: SimulatedWorld, backend_id: str) -> None:
        self.world = world
        self.backend_id = backend_id

    def generate(self, request: GenerationRequest) -> list[str]:
        query = self.world.lookup(request.messages)
        key = prompt_fingerprint(request.messages)
        critique_text = _segment(request.messages, ROLE_CRITIQUE)
        out = []
        for i in range(request.n):
            rng = rng_for("actor", key, request.seed, i)
            if critique_text is not None:
                out.append(self._refine(query, request.messages, critique_text, rng))
            else:
                accuracy = self.world.actor_spec.accuracy_for(query.difficulty)
                success = rng.random() < accuracy
                answer = (
                    query.gold_answer
                    if success
                    else _draw_wrong_answer(query, self.world.actor_spec, rng)
                )
                nonce = f"{rng.getrandbits(32):08x}"
                if _segment(request.messages, "prefix") is not None:
                    out.append(_continuation_text(answer, nonce))
                else:
                    out.append(_response_text(answer, nonce))
        return out

    def _refine(self, query: Query, messages, critique_text: str, rng) -> str:
        response_text = _segment(messages, ROLE_RESPONSE)
        if response_text is None:
            raise BackendError("refinement request carries no response segment")
        n_steps = max(len(split_steps(response_text)), 1)
        try:
            critique = parse_critique_reply(critique_text, n_steps)
            flagged = critique.is_flawed
        except Exception:
            flagged = True  # free-form critique text: treat as actionable feedback
        if not flagged:
            # precondition: unflagged paths are never refined
            raise BackendError("refinement requested for an unflagged response")
        was_correct = grading.reward_text(query, response_text) == 1
        success_prob = (
            self.world.critic_spec.keep_correct_prob
            if was_correct
            else self.world.critic_spec.fix_prob
        )
        success = rng.random() < success_prob
        answer = (
            query.gold_answer if success else _draw_wrong_answer(query, self.world.actor_spec, rng)
        )
        return _response_text(answer, f"{rng.getrandbits(32):08x}")


class SimulatedCriticBackend:
    """Stochastic critic: grades the response segment against the gold answer,
    then flips the verdict per the discriminability spec."""

    def __init__(self, world: SimulatedWorld, backend_id: str) -> None:
        self.world = world
        self.backend_id = backend_id

    def generate(self, request: GenerationRequest) -> list[str]:
        query = self.world.lookup(request.messages)
        response_text = _segment(request.messages, ROLE_RESPONSE)
        if response_text is None:
            raise BackendError("critique request carries no response segment")
        is_correct = grading.reward_text(query, response_text) == 1
        n_steps = max(len(split_steps(response_text)), 1)
        key = prompt_fingerprint(request.messages)
        out = []
        for i in range(request.n):
            critique = simulate_critique(
                self.world.critic_spec,
                is_correct,
                derive_seed(key, request.seed, i),
                n_steps=n_steps,
            )
            out.append(render_critique(critique))
        return out


# ---------------------------------------------------------------------------
# Closed-form helpers for the simulated protocol
# ---------------------------------------------------------------------------


def single_round_accuracy(actor_accuracy: float, critic: StochasticCriticSpec) -> float:
    """Analytic accuracy of one non-gated critique+refinement round."""
    a = actor_accuracy
    return a * (
        critic.pass_correct_prob + (1.0 - critic.pass_correct_prob) * critic.keep_correct_prob
    ) + (1.0 - a) * critic.flag_flawed_prob * critic.fix_prob


def post_refinement_masses(
    gold_mass: float,
    distractor_masses: Sequence[float],
    critic: StochasticCriticSpec,
    dominant_mass: float,
) -> tuple[float, list[float]]:
    """Analytic answer-mass transfer of one critique+refinement round.

    Correct mass survives via pass/keep; flagged wrong mass is fixed with
    fix_prob, and every failed or broken refinement redraws a wrong answer
    from the distractor distribution (dominant_mass to the first distractor,
    the remainder uniform).
    """
    d_c, d_f = critic.pass_correct_prob, critic.flag_flawed_prob
    h, p_keep = critic.fix_prob, critic.keep_correct_prob
    wrong_total = sum(distractor_masses)
    gold_out = gold_mass * (d_c + (1.0 - d_c) * p_keep) + wrong_total * d_f * h
    redrawn = gold_mass * (1.0 - d_c) * (1.0 - p_keep) + wrong_total * d_f * (1.0 - h)
    k = len(distractor_masses)
    shares = [dominant_mass] + [(1.0 - dominant_mass) / (k - 1)] * (k - 1) if k > 1 else [1.0]
    out = [w * (1.0 - d_f) + redrawn * s for w, s in zip(distractor_masses, shares)]
    return gold_out, out


# ---------------------------------------------------------------------------
# HTTP chat-completions backend
# ---------------------------------------------------------------------------

_CHAT_ROLES = ("system", "user", "assistant")
_SECTION_TITLES = {ROLE_QUERY: "Problem", ROLE_RESPONSE: "Response", ROLE_CRITIQUE: "Critique"}


def render_chat_messages(messages: Sequence[Message]) -> list[dict]:
    """Flatten domain segments into chat-completions messages.

    System messages pass through; consecutive domain segments are folded
    into one labelled user message so any chat endpoint can serve them.
    """
    out: list[dict] = []
    pending: list[str] = []

    def flush() -> None:
        if pending:
            out.append({"role": "user", "content": "\n\n".join(pending)})
            pending.clear()

    for m in messages:
        if m.role in _CHAT_ROLES:
            flush()
            out.append({"role": m.role, "content": m.content})
        else:
            title = _SECTION_TITLES.get(m.role, m.role.capitalize())
            pending.append(f"{title}:\n{m.content}")
    flush()
    return out


class HttpChatBackend:
    """Chat-completions client with bounded concurrency and capped backoff.

    transport is injectable for tests: a callable (url, payload, headers,
    timeout) -> (status_code, parsed_json_or_None).
    """

    RETRYABLE_STATUS = (429, 500, 502, 503, 504)

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: Optional[str] = None,
        max_concurrency: int = 4,
        max_retries: int = 3,
        timeout: float = 60.0,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        transport: Optional[Callable] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if max_retries < 1:
            raise ConfigError("max_retries must be >= 1")
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.max_retries = max_retries
        self.timeout = timeout
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._sem = threading.Semaphore(max_concurrency)
        self._transport = transport or self._requests_transport
        self._sleep = sleep

    def _requests_transport(self, url, payload, headers, timeout):
        import requests

        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            raise BackendUnavailable(f"request failed: {exc}") from exc
        try:
            body = resp.json()
        except ValueError:
            body = None
        return resp.status_code, body

    def generate(self, request: GenerationRequest) -> list[str]:
        payload = {
            "model": self.model,
            "messages": render_chat_messages(request.messages),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "n": request.n,
            "seed": request.seed,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.endpoint}/chat/completions"

        last_error: Optional[str] = None
        with self._sem:
            for attempt in range(self.max_retries):
                if attempt:
                    delay = min(self.backoff_base * (2 ** (attempt - 1)), self.backoff_cap)
                    self._sleep(delay)
                try:
                    status, body = self._transport(url, payload, headers, self.timeout)
                except BackendUnavailable as exc:
                    last_error = str(exc)
                    logger.warning("transport failure (attempt %d): %s", attempt + 1, exc)
                    continue
                if status in self.RETRYABLE_STATUS:
                    last_error = f"HTTP {status}"
                    logger.warning("retryable HTTP %s (attempt %d)", status, attempt + 1)
                    continue
                if status != 200:
                    raise BackendUnavailable(f"HTTP {status} from {url}")
                return self._parse_body(body, request.n)
        raise BackendUnavailable(
            f"backend unavailable after {self.max_retries} attempts ({last_error})"
        )

    @staticmethod
    def _parse_body(body, n: int) -> list[str]:
        if not isinstance(body, dict) or "choices" not in body:
            raise MalformedResponse(f"response has no choices: {json.dumps(body)[:200]}")
        try:
            texts = [choice["message"]["content"] for choice in body["choices"]]
        except (KeyError, TypeError) as exc:
            raise MalformedResponse(f"bad choice structure: {exc}") from exc
        if len(texts) != n:
            raise MalformedResponse(f"expected {n} choices, got {len(texts)}")
        return texts
