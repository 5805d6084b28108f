"""Iterative exploration + learning with optional critique supervision.

One code path serves both variants: the vanilla loop disables the critic
(zero critique/refinement calls), the critique-in-the-loop variant issues L
critiques per incorrect sample and one refinement per flagged critique.
Correct initial responses bypass the critic entirely; every iteration
fine-tunes from the original base checkpoint via an external trainer hook.
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import grading, prompts
from .backends import Gateway, GenerationRequest
from .core import Critique, GenParams, Query, ReasoningPath, SCHEMA_VERSION
from .critformat import parse_critique_reply
from .errors import BackendError, ReplyParseError, ResumableInterruption
from .jsonl import read_jsonl, sha256_text, write_jsonl
from .seeds import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoopConfig:
    iterations: int = 3  # T
    n_samples: int = 5  # N, exploration samples per query
    l_critiques: int = 2  # L, critique/refinement attempts per incorrect response
    temperature: float = 0.7
    beta: float = 1.0  # reasoning/refinement mixing weight, recorded into exports
    trainer_hook: Optional[str] = None  # command template with {artifact}
    vanilla: bool = False  # critic disabled; same loop otherwise
    refinements_per_critique: int = 1
    include_new_refinements: bool = False
    failure_abort_fraction: float = 0.05

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.n_samples < 1:
            raise ValueError("iterations and n_samples must be >= 1")
        if not self.vanilla and self.l_critiques < 1:
            raise ValueError("l_critiques must be >= 1 when the critic is enabled")
        if self.refinements_per_critique < 1:
            raise ValueError("refinements_per_critique must be >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")

    @property
    def effective_l(self) -> int:
        return 0 if self.vanilla else self.l_critiques


@dataclass
class Solution:
    """One collected (query, solution) pair for the training union."""

    query_id: str
    text: str
    origin: str  # "initial" | "refinement"

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "query_id": self.query_id,
            "text": self.text,
            "origin": self.origin,
        }


@dataclass
class RefinementTriple:
    query_id: str
    response_text: str
    critique_text: str
    refined_text: str

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "query_id": self.query_id,
            "response_text": self.response_text,
            "critique_text": self.critique_text,
            "refined_text": self.refined_text,
        }


@dataclass
class IterationLedger:
    t: int
    counts: dict[str, int] = field(default_factory=dict)
    per_difficulty_proportions: dict[int, float] = field(default_factory=dict)
    dataset_artifacts: list[str] = field(default_factory=list)
    base_checkpoint_id: str = ""
    query_set_hash: str = ""

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "t": self.t,
            "counts": dict(sorted(self.counts.items())),
            "per_difficulty_proportions": {
                str(k): v for k, v in sorted(self.per_difficulty_proportions.items())
            },
            "dataset_artifacts": list(self.dataset_artifacts),
            "base_checkpoint_id": self.base_checkpoint_id,
            "query_set_hash": self.query_set_hash,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "IterationLedger":
        return cls(
            t=obj["t"],
            counts=dict(obj["counts"]),
            per_difficulty_proportions={
                int(k): v for k, v in obj["per_difficulty_proportions"].items()
            },
            dataset_artifacts=list(obj["dataset_artifacts"]),
            base_checkpoint_id=obj["base_checkpoint_id"],
            query_set_hash=obj.get("query_set_hash", ""),
        )


def query_set_hash(queries: Sequence[Query]) -> str:
    return sha256_text("\x1f".join(sorted(q.id for q in queries)))[:16]


@dataclass
class ExploreResult:
    solutions: list[Solution]
    new_refinements: list[RefinementTriple]
    ledger: IterationLedger


def explore(
    gateway: Gateway,
    actor_id: str,
    critic_id: Optional[str],
    queries: Sequence[Query],
    config: LoopConfig,
    t: int,
    seed: int = 0,
    base_checkpoint_id: str = "",
) -> ExploreResult:
    """One exploration step: sample N responses per query, split by reward,
    and run L critique+refinement attempts on each incorrect response.

    Correct initial responses are collected directly and never critiqued.
    Per-sample backend failures are logged and excluded; the iteration aborts
    only when the failure fraction exceeds the configured threshold.
    """
    if not config.vanilla and critic_id is None:
        raise ValueError("critique-in-the-loop exploration requires a critic backend")
    L = config.effective_l
    solutions: list[Solution] = []
    new_refinements: list[RefinementTriple] = []
    counts = {
        "sampled": 0,
        "correct_initial": 0,
        "incorrect_initial": 0,
        "critiques_issued": 0,
        "refinements_correct": 0,
        "failures": 0,
    }
    per_level: dict[int, int] = {}

    def collect(query: Query, text: str, origin: str) -> None:
        solutions.append(Solution(query_id=query.id, text=text, origin=origin))
        if query.difficulty is not None:
            per_level[query.difficulty] = per_level.get(query.difficulty, 0) + 1

    for query in queries:
        request = GenerationRequest(
            messages=prompts.build_reasoning_messages(query),
            temperature=config.temperature,
            n=config.n_samples,
            seed=derive_seed("explore", seed, t, query.id),
            backend_id=actor_id,
        )
        try:
            texts = gateway.generate(request)
        except BackendError as exc:
            logger.warning("exploration failed for %s: %s", query.id, exc)
            counts["failures"] += config.n_samples
            continue
        counts["sampled"] += len(texts)
        for s_idx, text in enumerate(texts):
            if grading.reward_text(query, text) == 1:
                counts["correct_initial"] += 1
                collect(query, text, "initial")
                continue
            counts["incorrect_initial"] += 1
            for l_idx in range(L):
                self_improve_critique_refine(
                    gateway,
                    actor_id,
                    critic_id,
                    query,
                    text,
                    config,
                    counts,
                    collect,
                    new_refinements,
                    seed_parts=("improve", seed, t, query.id, s_idx, l_idx),
                )

    total_attempted = counts["sampled"] + counts["failures"]
    if total_attempted and counts["failures"] / total_attempted > config.failure_abort_fraction:
        raise ResumableInterruption(
            f"iteration {t}: failure fraction {counts['failures']}/{total_attempted} "
            "exceeds the abort threshold"
        )

    total_solutions = len(solutions)
    proportions = (
        {lvl: c / total_solutions for lvl, c in sorted(per_level.items())}
        if total_solutions
        else {}
    )
    ledger = IterationLedger(
        t=t,
        counts=counts,
        per_difficulty_proportions=proportions,
        base_checkpoint_id=base_checkpoint_id,
        query_set_hash=query_set_hash(queries),
    )
    return ExploreResult(solutions=solutions, new_refinements=new_refinements, ledger=ledger)


def self_improve_critique_refine(
    gateway: Gateway,
    actor_id: str,
    critic_id: str,
    query: Query,
    response_text: str,
    config: LoopConfig,
    counts: dict,
    collect,
    new_refinements: list[RefinementTriple],
    seed_parts: tuple,
) -> None:
    """One critique attempt plus its refinements for an incorrect response."""
    path = ReasoningPath.from_text(response_text, provenance="sampled")
    critique_messages = prompts.build_holistic_critique_messages(query, path)
    request = GenerationRequest(
        messages=critique_messages,
        temperature=0.0,
        n=1,
        seed=derive_seed(*seed_parts, "critique"),
        backend_id=critic_id,
    )
    try:
        reply = gateway.generate(request)[0]
    except BackendError as exc:
        logger.warning("critique failed for %s: %s", query.id, exc)
        counts["failures"] += 1
        return
    counts["critiques_issued"] += 1
    try:
        critique = parse_critique_reply(reply, max(len(path.steps), 1))
    except ReplyParseError:
        critique = Critique.flawed_at(max(len(path.steps), 1), 0, reply.strip())
    if not critique.is_flawed:
        return  # unflagged paths are never refined
    refine_messages = prompts.build_refinement_messages(query, path, critique)
    for r_idx in range(config.refinements_per_critique):
        ref_request = GenerationRequest(
            messages=refine_messages,
            temperature=config.temperature,
            n=1,
            seed=derive_seed(*seed_parts, "refine", r_idx),
            backend_id=actor_id,
        )
        try:
            refined_text = gateway.generate(ref_request)[0]
        except BackendError as exc:
            logger.warning("refinement failed for %s: %s", query.id, exc)
            counts["failures"] += 1
            continue
        triple = RefinementTriple(
            query_id=query.id,
            response_text=response_text,
            critique_text=reply,
            refined_text=refined_text,
        )
        new_refinements.append(triple)
        if grading.reward_text(query, refined_text) == 1:
            counts["refinements_correct"] += 1
            collect(query, refined_text, "refinement")


def assemble_training_set(
    solutions: Sequence[Solution],
    d_reason: Sequence[dict],
    d_refine: Sequence[dict],
    queries: dict[str, Query],
    out_path,
    beta: float,
    base_checkpoint_id: str,
    new_refinements: Sequence[RefinementTriple] = (),
    include_new_refinements: bool = False,
) -> dict:
    """Emit the iteration-t training artifact: D_reason ∪ D_correct plus the
    static refinement set, with exact-duplicate (query_id, text) pairs dropped.

    Collected solutions are re-verified against the reward function at
    assembly time. Newly generated refinement triples are exported under the
    separate "refinement-candidate" kind unless include_new_refinements is
    set, in which case they join the "refinement" kind.
    """
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": "header",
        "beta": beta,
        "base_checkpoint_id": base_checkpoint_id,
    }
    rows: list[dict] = [header]
    seen: set[tuple[str, str]] = set()
    n_reasoning = dropped = 0
    for rec in d_reason:
        key = (rec["query_id"], rec["text"])
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        rows.append(
            {
                "schema_version": SCHEMA_VERSION,
                "kind": "reasoning",
                "query_id": rec["query_id"],
                "text": rec["text"],
            }
        )
        n_reasoning += 1
    for sol in solutions:
        query = queries.get(sol.query_id)
        if query is None or grading.reward_text(query, sol.text) != 1:
            raise ValueError(f"collected solution for {sol.query_id} fails the reward re-check")
        key = (sol.query_id, sol.text)
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        rows.append({"kind": "reasoning", **sol.to_json()})
        n_reasoning += 1
    n_refine = 0
    for rec in d_refine:
        rows.append({"schema_version": SCHEMA_VERSION, "kind": "refinement", **rec})
        n_refine += 1
    for triple in new_refinements:
        kind = "refinement" if include_new_refinements else "refinement-candidate"
        rows.append({"kind": kind, **triple.to_json()})
        if include_new_refinements:
            n_refine += 1
    write_jsonl(out_path, rows)
    return {
        "reasoning_rows": n_reasoning,
        "refinement_rows": n_refine,
        "duplicates_dropped": dropped,
        "refinement_candidates": 0 if include_new_refinements else len(new_refinements),
    }


def invoke_trainer(artifact_path: str, hook: Optional[str], current_actor_id: str) -> str:
    """Run the external trainer hook, returning the new actor backend id.

    A missing hook is the no-op case (simulation-only runs): the actor id is
    returned unchanged. The hook command gets {artifact} substituted and must
    print the new backend descriptor as its last non-empty stdout line; a
    nonzero exit halts the iteration in a resumable state.
    """
    if not hook:
        return current_actor_id
    command = hook.format(artifact=str(artifact_path))
    result = subprocess.run(
        shlex.split(command), capture_output=True, text=True, check=False
    )
    if result.returncode != 0:
        raise ResumableInterruption(
            f"trainer hook exited {result.returncode}: {result.stderr.strip()[:500]}"
        )
    lines = [ln.strip() for ln in result.stdout.splitlines() if ln.strip()]
    if not lines:
        raise ResumableInterruption("trainer hook printed no backend descriptor")
    return lines[-1]


def run_loop(
    gateway: Gateway,
    actor_id: str,
    critic_id: Optional[str],
    queries: Sequence[Query],
    config: LoopConfig,
    manifest,
    out_dir,
    seed: int = 0,
    d_reason: Sequence[dict] = (),
    d_refine: Sequence[dict] = (),
) -> list[IterationLedger]:
    """Run the full T-iteration loop under a resumable manifest.

    Stages explore-t{t} / learn-t{t} write their artifacts exactly once;
    resuming skips done stages (recovering the actor lineage from the learn
    artifacts) and re-runs anything that did not finish. base_checkpoint_id
    stays the original actor for every iteration.
    """
    from pathlib import Path

    from .manifest import run_stage

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_checkpoint_id = actor_id
    current_actor = actor_id
    ledgers: list[IterationLedger] = []
    query_map = {q.id: q for q in queries}

    for t in range(1, config.iterations + 1):
        explore_name = f"explore-t{t}"
        solutions_path = out / f"solutions-t{t}.jsonl"
        ledger_path = out / f"ledger-t{t}.json"
        refinements_path = out / f"refinements-t{t}.jsonl"

        def exploration_stage(t=t, current_actor=current_actor):
            result = explore(
                gateway,
                current_actor,
                critic_id,
                queries,
                config,
                t,
                seed=seed,
                base_checkpoint_id=base_checkpoint_id,
            )
            write_jsonl(solutions_path, [s.to_json() for s in result.solutions])
            write_jsonl(refinements_path, [r.to_json() for r in result.new_refinements])
            ledger_path.write_text(
                json.dumps(result.ledger.to_json(), indent=2, sort_keys=True) + "\n", "utf-8"
            )
            return [str(solutions_path), str(refinements_path), str(ledger_path)]

        upstream = [f"learn-t{t-1}"] if t > 1 else []
        run_stage(manifest, explore_name, exploration_stage, upstream=upstream)

        learn_name = f"learn-t{t}"
        train_path = out / f"train-t{t}.jsonl"
        learn_meta_path = out / f"learn-t{t}.json"

        def learning_stage(t=t, current_actor=current_actor):
            solutions = [
                Solution(query_id=r["query_id"], text=r["text"], origin=r["origin"])
                for r in read_jsonl(solutions_path)
            ]
            triples = [
                RefinementTriple(
                    query_id=r["query_id"],
                    response_text=r["response_text"],
                    critique_text=r["critique_text"],
                    refined_text=r["refined_text"],
                )
                for r in read_jsonl(refinements_path)
            ]
            assemble_training_set(
                solutions,
                d_reason,
                d_refine,
                query_map,
                train_path,
                beta=config.beta,
                base_checkpoint_id=base_checkpoint_id,
                new_refinements=triples,
                include_new_refinements=config.include_new_refinements,
            )
            new_actor = invoke_trainer(str(train_path), config.trainer_hook, current_actor)
            learn_meta_path.write_text(
                json.dumps({"actor_backend_id": new_actor}, sort_keys=True) + "\n", "utf-8"
            )
            return [str(train_path), str(learn_meta_path)]

        run_stage(manifest, learn_name, learning_stage, upstream=[explore_name])

        new_actor = json.loads(learn_meta_path.read_text("utf-8"))["actor_backend_id"]
        if not gateway.has(new_actor):
            logger.info("registering trainer-produced actor %s as an alias", new_actor)
            gateway.alias(new_actor, current_actor)
        current_actor = new_actor
        ledgers.append(IterationLedger.from_json(json.loads(ledger_path.read_text("utf-8"))))
    return ledgers


def tail_narrowing_report(
    ledgers: Sequence[IterationLedger],
    baseline_ledgers: Optional[Sequence[IterationLedger]],
) -> list[dict[int, float]]:
    """Per-iteration, per-difficulty deltas: critique-run proportion minus
    vanilla-run proportion. Requires a baseline over the same query set."""
    if not baseline_ledgers:
        raise ValueError("tail_narrowing_report requires a vanilla baseline run")
    if len(ledgers) != len(baseline_ledgers):
        raise ValueError("ledger sequences must cover the same iterations")
    deltas: list[dict[int, float]] = []
    for ours, base in zip(ledgers, baseline_ledgers):
        if ours.query_set_hash != base.query_set_hash:
            raise ValueError("runs cover different query sets")
        levels = sorted(set(ours.per_difficulty_proportions) | set(base.per_difficulty_proportions))
        deltas.append(
            {
                lvl: ours.per_difficulty_proportions.get(lvl, 0.0)
                - base.per_difficulty_proportions.get(lvl, 0.0)
                for lvl in levels
            }
        )
    return deltas
