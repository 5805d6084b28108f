"""Critique-supervised inference protocols and their evaluation metrics.

Modes: response-only, single/multi round critique+refine, parallel-K
triplets, and sequential-K chains with truncated context. Every backend call
is recorded in the transcript (purpose, messages, output) so context
contracts can be inspected exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import grading, prompts
from .backends import Gateway, GenerationRequest
from .core import (
    Critique,
    GenParams,
    InteractionHistory,
    Message,
    Query,
    ReasoningPath,
    append_round,
    context_view,
)
from .errors import BackendError
from .grading import Answer
from .seeds import derive_seed

logger = logging.getLogger(__name__)

MODE_RESPONSE_ONLY = "response-only"
MODE_SINGLE_ROUND = "with-critic-single-round"
MODE_MULTI_ROUND = "with-critic-multi-round"
MODE_PARALLEL = "parallel-K"
MODE_SEQUENTIAL = "sequential-K"
MODES = (MODE_RESPONSE_ONLY, MODE_SINGLE_ROUND, MODE_MULTI_ROUND, MODE_PARALLEL, MODE_SEQUENTIAL)

CONTEXT_FULL = "full"
CONTEXT_TRUNCATED = "truncated"


@dataclass(frozen=True)
class ProtocolConfig:
    mode: str = MODE_SINGLE_ROUND
    K: int = 1
    oracle_gated: bool = False
    context_mode: Optional[str] = None  # None -> truncated for sequential, full otherwise
    temperature: float = 0.7
    rounds: int = 1  # round budget for the multi-round mode
    stop_on_correct_verdict: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.K < 1 or self.rounds < 1:
            raise ValueError("K and rounds must be >= 1")
        if self.mode not in (MODE_PARALLEL, MODE_SEQUENTIAL) and self.K != 1:
            raise ValueError("K = 1 for non-scaling modes")
        if self.context_mode not in (None, CONTEXT_FULL, CONTEXT_TRUNCATED):
            raise ValueError(f"unknown context mode {self.context_mode!r}")

    @property
    def effective_context_mode(self) -> str:
        if self.context_mode is not None:
            return self.context_mode
        return CONTEXT_TRUNCATED if self.mode == MODE_SEQUENTIAL else CONTEXT_FULL


@dataclass(frozen=True)
class CallRecord:
    """One backend call as the protocol issued it."""

    purpose: str  # "initial" | "critique" | "refinement"
    round_index: int
    messages: tuple[Message, ...]
    output: str
    backend_id: str

    def context_segments(self) -> tuple[Message, ...]:
        """Domain segments only (system instructions stripped)."""
        return tuple(m for m in self.messages if m.role in ("query", "response", "critique"))


@dataclass
class RoundOutcome:
    critique: Critique
    flagged: bool
    target_was_correct: bool
    refinement: Optional[ReasoningPath] = None


@dataclass
class SampleTranscript:
    initial: ReasoningPath
    rounds: list[RoundOutcome] = field(default_factory=list)
    calls: list[CallRecord] = field(default_factory=list)
    gated_out: bool = False

    @property
    def final(self) -> ReasoningPath:
        for outcome in reversed(self.rounds):
            if outcome.refinement is not None:
                return outcome.refinement
        return self.initial

    def answer_sequence(self) -> list[ReasoningPath]:
        """y_0 followed by each round's resulting response (carried forward
        unchanged when the critique was unflagged)."""
        seq = [self.initial]
        for outcome in self.rounds:
            seq.append(outcome.refinement if outcome.refinement is not None else seq[-1])
        return seq


@dataclass
class QueryTranscript:
    query: Query
    mode: str
    samples: list[SampleTranscript] = field(default_factory=list)
    error: Optional[str] = None


def maj_at_k(answers: Sequence[Optional[Answer]]) -> Optional[Answer]:
    """Modal answer over equivalence classes; ties break to first occurrence.

    Unparseable answers (None) form their own class that never wins unless
    every answer is unparseable, in which case None is returned.
    """
    if not answers:
        raise ValueError("maj_at_k requires a non-empty answer list")
    parsed = [(i, a) for i, a in enumerate(answers) if a is not None]
    if not parsed:
        return None
    # group by canonical text first, then merge canonically distinct groups
    # that are tolerance-equivalent (connected components, order-independent)
    groups: dict[str, list[int]] = {}
    reps: dict[str, Answer] = {}
    for i, a in parsed:
        key = a.canonical
        groups.setdefault(key, []).append(i)
        reps.setdefault(key, a)
    keys = sorted(groups)
    parent = {k: k for k in keys}

    def find(k: str) -> str:
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for i, ka in enumerate(keys):
        for kb in keys[i + 1 :]:
            if grading.equivalent(reps[ka], reps[kb]):
                parent[find(kb)] = find(ka)

    classes: dict[str, list[int]] = {}
    for k in keys:
        classes.setdefault(find(k), []).extend(groups[k])
    best_key = None
    best = (-1, len(answers))  # (count, first occurrence)
    for k, indices in classes.items():
        score = (len(indices), -min(indices))
        if score > (best[0], -best[1]):
            best = (len(indices), min(indices))
            best_key = k
    winner_indices = classes[best_key]
    return answers[min(winner_indices)]


def pass_at_k(rewards: Sequence[int], K: int) -> int:
    """1 iff any of the first K rewards is 1."""
    if len(rewards) < K:
        raise ValueError(f"need at least K={K} rewards, got {len(rewards)}")
    return 1 if any(r == 1 for r in rewards[:K]) else 0


def bucket_for_correct_count(correct: int, samples: int = 100) -> int:
    """Difficulty level 1..5 from the correct count over `samples` draws.

    Equal-width bands on the correct fraction: >0.8 -> 1, >0.6 -> 2,
    >0.4 -> 3, >0.2 -> 4, else 5.
    """
    if not 0 <= correct <= samples:
        raise ValueError("correct count out of range")
    fraction = correct / samples
    for level, floor in enumerate((0.8, 0.6, 0.4, 0.2), start=1):
        if fraction > floor:
            return level
    return 5


def difficulty_bucket(
    gateway: Gateway,
    actor_id: str,
    query: Query,
    samples: int = 100,
    temperature: float = 0.7,
    seed: int = 0,
) -> int:
    """Assign a difficulty level by sampling the actor `samples` times."""
    request = GenerationRequest(
        messages=prompts.build_reasoning_messages(query),
        temperature=temperature,
        n=samples,
        seed=derive_seed("difficulty", seed, query.id),
        backend_id=actor_id,
    )
    texts = gateway.generate(request)
    correct = sum(grading.reward_text(query, t) for t in texts)
    return bucket_for_correct_count(correct, samples)


class _ProtocolRunner:
    def __init__(self, gateway: Gateway, actor_id: str, critic_id: Optional[str], config: ProtocolConfig, seed: int):
        self.gateway = gateway
        self.actor_id = actor_id
        self.critic_id = critic_id
        self.config = config
        self.seed = seed

    def _generate(self, purpose: str, round_index: int, backend_id: str, messages, temperature, seed_parts) -> CallRecord:
        request = GenerationRequest(
            messages=tuple(messages),
            temperature=temperature,
            n=1,
            seed=derive_seed(*seed_parts),
            backend_id=backend_id,
        )
        output = self.gateway.generate(request)[0]
        return CallRecord(
            purpose=purpose,
            round_index=round_index,
            messages=tuple(request.messages),
            output=output,
            backend_id=backend_id,
        )

    def _initial(self, query: Query, sample_index: int) -> tuple[ReasoningPath, CallRecord]:
        messages = prompts.build_reasoning_messages(query)
        call = self._generate(
            "initial", 0, self.actor_id, messages, self.config.temperature,
            ("protocol", self.seed, query.id, "initial", sample_index),
        )
        path = ReasoningPath.from_text(
            call.output,
            provenance="sampled",
            gen_params=GenParams(self.config.temperature, derive_seed("protocol", self.seed, query.id, "initial", sample_index), self.actor_id),
        )
        return path, call

    def _critique_refine_rounds(self, query: Query, sample: SampleTranscript, n_rounds: int, sample_index: int) -> None:
        """Run up to n_rounds critique(+refinement) rounds on a sample."""
        history = InteractionHistory(query=query, initial=sample.initial)
        mode = self.config.effective_context_mode
        for r in range(1, n_rounds + 1):
            target = history.latest_response()
            target_correct = grading.reward(query, target) == 1
            ctx = context_view(history, role="critique", mode=mode)
            call = self._generate(
                "critique", r, self.critic_id, ctx, 0.0,
                ("protocol", self.seed, query.id, "critique", sample_index, r),
            )
            sample.calls.append(call)
            critique = self._parse_critique(call.output, len(target.steps))
            flagged = critique.is_flawed
            outcome = RoundOutcome(critique=critique, flagged=flagged, target_was_correct=target_correct)
            sample.rounds.append(outcome)
            if not flagged:
                if self.config.stop_on_correct_verdict:
                    break
                continue
            ref_ctx = context_view(history, role="refinement", mode=mode, pending_critique=critique)
            ref_call = self._generate(
                "refinement", r, self.actor_id, ref_ctx, self.config.temperature,
                ("protocol", self.seed, query.id, "refinement", sample_index, r),
            )
            sample.calls.append(ref_call)
            refined = ReasoningPath.from_text(
                ref_call.output,
                provenance="refinement",
                gen_params=GenParams(self.config.temperature, 0, self.actor_id),
            )
            outcome.refinement = refined
            history = append_round(history, critique, refined)

    @staticmethod
    def _parse_critique(text: str, n_steps: int) -> Critique:
        from .critformat import parse_critique_reply
        from .errors import ReplyParseError

        try:
            return parse_critique_reply(text, max(n_steps, 1))
        except ReplyParseError:
            # free-form critic reply: treat as a flawed verdict with feedback
            return Critique.flawed_at(max(n_steps, 1), 0, text.strip())

    def run_query(self, query: Query) -> QueryTranscript:
        cfg = self.config
        transcript = QueryTranscript(query=query, mode=cfg.mode)
        n_samples = cfg.K if cfg.mode == MODE_PARALLEL else 1
        for s in range(n_samples):
            initial, call = self._initial(query, s)
            sample = SampleTranscript(initial=initial, calls=[call])
            transcript.samples.append(sample)
            if cfg.mode == MODE_RESPONSE_ONLY:
                continue
            if cfg.oracle_gated and grading.reward(query, initial) == 1:
                sample.gated_out = True
                continue
            if cfg.mode in (MODE_SINGLE_ROUND, MODE_PARALLEL):
                self._critique_refine_rounds(query, sample, 1, s)
            elif cfg.mode == MODE_MULTI_ROUND:
                self._critique_refine_rounds(query, sample, cfg.rounds, s)
            elif cfg.mode == MODE_SEQUENTIAL:
                self._critique_refine_rounds(query, sample, cfg.K, s)
        return transcript


def run_protocol(
    queries: Sequence[Query],
    gateway: Gateway,
    actor_id: str,
    critic_id: Optional[str],
    config: ProtocolConfig,
    seed: int = 0,
) -> list[QueryTranscript]:
    """Run the configured protocol over the queries.

    Per-query backend failures are caught: the transcript records the error
    and evaluate() excludes (and counts) those queries.
    """
    if config.mode != MODE_RESPONSE_ONLY and critic_id is None:
        raise ValueError(f"mode {config.mode} requires a critic backend")
    runner = _ProtocolRunner(gateway, actor_id, critic_id, config, seed)
    transcripts = []
    for query in queries:
        try:
            transcripts.append(runner.run_query(query))
        except BackendError as exc:
            logger.warning("query %s failed: %s", query.id, exc)
            transcripts.append(QueryTranscript(query=query, mode=config.mode, error=str(exc)))
    return transcripts


@dataclass
class EvalReport:
    accuracy: Optional[float]
    discriminability: Optional[float]
    helpfulness: Optional[float]
    maj_at_k: dict[int, float]
    pass_at_k: dict[int, float]
    per_difficulty_accuracy: dict[int, float]
    correct_fraction_histogram: list[dict]
    counts: dict[str, int]

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "accuracy": self.accuracy,
            "discriminability": self.discriminability,
            "helpfulness": self.helpfulness,
            "maj_at_k": {str(k): v for k, v in sorted(self.maj_at_k.items())},
            "pass_at_k": {str(k): v for k, v in sorted(self.pass_at_k.items())},
            "per_difficulty_accuracy": {
                str(k): v for k, v in sorted(self.per_difficulty_accuracy.items())
            },
            "correct_fraction_histogram": self.correct_fraction_histogram,
            "counts": dict(sorted(self.counts.items())),
        }


def _sample_answer_rewards(query: Query, sample: SampleTranscript, sequential: bool):
    paths = sample.answer_sequence() if sequential else [sample.final]
    answers = [grading.extract_final_answer(p) for p in paths]
    gold = grading.parse_gold_answer(query.gold_answer)
    rewards = [1 if a is not None and grading.equivalent(a, gold) else 0 for a in answers]
    return answers, rewards


def default_k_grid(n: int) -> list[int]:
    """K values for the scaling curves: dense when small, log-spaced when large."""
    if n <= 32:
        return list(range(1, n + 1))
    grid = [1]
    while grid[-1] * 2 < n:
        grid.append(grid[-1] * 2)
    grid.append(n)
    return grid


def evaluate(
    transcripts: Sequence[QueryTranscript],
    histogram_samples: Optional[int] = None,
    k_grid: Optional[Sequence[int]] = None,
) -> EvalReport:
    """Compute accuracy, discriminability, helpfulness, and scaling curves.

    accuracy        — reward rate of final answers over all samples;
    discriminability — critiques whose verdict matches the oracle correctness
                      of the path they critiqued;
    helpfulness     — among initially incorrect, flagged-and-refined paths,
                      the fraction whose refinement is correct. Empty
                      denominators are reported as absent (None).
    """
    final_correct = total_samples = 0
    verdict_matches = n_critiques = 0
    helpful = n_refined_incorrect = 0
    failed = 0
    per_difficulty: dict[int, list[int]] = {}
    maj_curves: dict[int, list[int]] = {}
    pass_curves: dict[int, list[int]] = {}
    histogram: list[dict] = []

    for transcript in transcripts:
        if transcript.error is not None:
            failed += 1
            continue
        query = transcript.query
        gold = grading.parse_gold_answer(query.gold_answer)
        sequential = transcript.mode == MODE_SEQUENTIAL
        query_rewards: list[int] = []
        query_answers: list[Optional[Answer]] = []
        for sample in transcript.samples:
            answers, rewards = _sample_answer_rewards(query, sample, sequential)
            if sequential:
                query_answers, query_rewards = answers, rewards
            else:
                query_answers.append(answers[0])
                query_rewards.append(rewards[0])
            final_reward = grading.reward(query, sample.final)
            final_correct += final_reward
            total_samples += 1
            if query.difficulty is not None:
                per_difficulty.setdefault(query.difficulty, []).append(final_reward)
            for outcome in sample.rounds:
                n_critiques += 1
                if outcome.flagged != outcome.target_was_correct:
                    verdict_matches += 1
                if not outcome.target_was_correct and outcome.refinement is not None:
                    n_refined_incorrect += 1
                    helpful += grading.reward(query, outcome.refinement)
        if len(query_rewards) > 1:
            grid = k_grid if k_grid is not None else default_k_grid(len(query_rewards))
            for K in grid:
                if K > len(query_rewards):
                    continue
                winner = maj_at_k(query_answers[:K])
                maj_ok = 1 if winner is not None and grading.equivalent(winner, gold) else 0
                maj_curves.setdefault(K, []).append(maj_ok)
                pass_curves.setdefault(K, []).append(pass_at_k(query_rewards, K))
            n_hist = min(histogram_samples or len(query_rewards), len(query_rewards))
            fraction = sum(query_rewards[:n_hist]) / n_hist
            winner = maj_at_k(query_answers[:n_hist])
            histogram.append(
                {
                    "query_id": query.id,
                    "fraction": fraction,
                    "maj_correct": bool(winner is not None and grading.equivalent(winner, gold)),
                }
            )

    def rate(num: int, den: int) -> Optional[float]:
        return num / den if den else None

    return EvalReport(
        accuracy=rate(final_correct, total_samples),
        discriminability=rate(verdict_matches, n_critiques),
        helpfulness=rate(helpful, n_refined_incorrect),
        maj_at_k={k: sum(v) / len(v) for k, v in maj_curves.items()},
        pass_at_k={k: sum(v) / len(v) for k, v in pass_curves.items()},
        per_difficulty_accuracy={
            lvl: sum(v) / len(v) for lvl, v in sorted(per_difficulty.items())
        },
        correct_fraction_histogram=histogram,
        counts={
            "queries": len(transcripts),
            "failed_queries": failed,
            "samples": total_samples,
            "critiques": n_critiques,
            "refined_incorrect": n_refined_incorrect,
        },
    )


def correct_fraction_histogram(
    transcripts: Sequence[QueryTranscript], samples: int = 1000
) -> list[dict]:
    """Per-query correct fraction and majority-vote correctness over parallel samples."""
    report = evaluate(transcripts, histogram_samples=samples)
    return report.correct_fraction_histogram
